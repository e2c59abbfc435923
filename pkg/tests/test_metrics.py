import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tess.metrics import confusion_matrix, f1_score, metric_set


def oracle(preds, labels, average, k, pos=1):
    """Independent tally: per-class counts by direct enumeration, plain fractions."""
    from fractions import Fraction

    def f1_for(c):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        if tp == 0:
            return Fraction(0)
        prec, rec = Fraction(tp, tp + fp), Fraction(tp, tp + fn)
        return 2 * prec * rec / (prec + rec)

    if average == "binary":
        return float(f1_for(pos))
    if average == "micro":
        # pooled counts over classes
        tp = sum(1 for p, y in zip(preds, labels) if p == y)
        fp = fn = len(preds) - tp
        return float(Fraction(2 * tp, 2 * tp + fp + fn)) if preds else 0.0
    scores = [f1_for(c) for c in range(k)]
    if average == "macro":
        return float(sum(scores, Fraction(0)) / k)
    support = [sum(1 for y in labels if y == c) for c in range(k)]
    n = sum(support)
    return float(sum((s * w for s, w in zip(scores, support)), Fraction(0)) / n) if n else 0.0


def test_hand_worked_binary_case():
    preds, labels = [1, 1, 0, 0], [1, 0, 0, 0]
    assert f1_score(preds, labels, "binary") == pytest.approx(2 / 3, abs=1e-15)
    m = metric_set(preds, labels, 2)
    assert m.f1[0] == pytest.approx(0.8, abs=1e-15)
    assert m.f1_macro == pytest.approx(11 / 15, abs=1e-15)
    assert m.accuracy == 0.75
    assert m.selection_score == m.f1_binary


def test_perfect_and_all_wrong():
    for avg in ("micro", "macro", "weighted", "binary"):
        assert f1_score([0, 1, 1], [0, 1, 1], avg) == 1.0
    assert f1_score([0, 0, 1], [1, 1, 0], "binary") == 0.0


def test_absent_class_counts_in_macro():
    # class 2 never occurs; its zero still divides the macro average
    assert f1_score([0, 1], [0, 1], "macro", num_classes=3) == pytest.approx(2 / 3)


def test_length_mismatch():
    with pytest.raises(ValueError):
        f1_score([0], [0, 1])


def test_confusion_matrix_orientation():
    cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
    assert cm.tolist() == [[1, 1], [0, 1]]


def test_oracle_agreement_on_1000_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 40))
        preds = rng.integers(0, k, size=n).tolist()
        labels = rng.integers(0, k, size=n).tolist()
        for avg in ("micro", "macro", "weighted"):
            assert f1_score(preds, labels, avg, num_classes=k) == oracle(preds, labels, avg, k)
        assert f1_score(preds, labels, "binary", num_classes=k) == oracle(preds, labels,
                                                                          "binary", k)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
def test_metric_set_bounds_and_consistency(pairs):
    preds, labels = zip(*pairs)
    m = metric_set(list(preds), list(labels), 4)
    values = [m.accuracy, m.f1_macro, m.f1_weighted, *m.precision, *m.recall, *m.f1]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert m.accuracy == f1_score(list(preds), list(labels), "micro", num_classes=4)
    for p, r, f in zip(m.precision, m.recall, m.f1):
        expect = 0.0 if p + r == 0 else 2 * p * r / (p + r)
        assert f == pytest.approx(expect, abs=1e-12)


def test_exhaustive_tiny_binary():
    for n in range(1, 5):
        for preds in itertools.product([0, 1], repeat=n):
            for labels in itertools.product([0, 1], repeat=n):
                for avg in ("micro", "macro", "weighted", "binary"):
                    assert f1_score(preds, labels, avg, num_classes=2) == \
                        oracle(preds, labels, avg, 2)
