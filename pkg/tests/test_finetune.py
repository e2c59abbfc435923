from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tess.data_io import ClassificationExample, DataError
from tess.finetune import (REPORT_HEADER, FinetuneConfig, SweepConfig, evaluate, fewshot_sweep,
                           finetune, parameter_digest, stratified_quotas, subsample,
                           subsample_indices)
from tess.model import ModelConfig, build_model
from tess.synthetic import separable_task, task_corpus
from tess.tokenizer import train_vocab

VOCAB = train_vocab(task_corpus(separable_task(300, seed=9)), 90)


def small_model(seed=0):
    cfg = ModelConfig(vocab_size=len(VOCAB), embed_dim=8, hidden_dim=16, layers=2, heads=2,
                      ffn_dim=32, max_positions=32, dropout=0.0)
    return build_model(cfg, seed=seed)


def three_class(n=100):
    labels = [0] * (n // 2) + [1] * (3 * n // 10) + [2] * (n - n // 2 - 3 * n // 10)
    return [ClassificationExample(f"x{i}", None, y) for i, y in enumerate(labels)]


def test_stratified_fifty_thirty_twenty():
    data = three_class(200)
    picked = subsample(data, 100, seed=0)
    assert Counter(ex.label for ex in picked) == {0: 50, 1: 30, 2: 20}


def test_largest_remainder_ties_go_to_lower_class():
    assert stratified_quotas({0: 1, 1: 1, 2: 1}, 2) == {0: 1, 1: 1, 2: 0}
    assert stratified_quotas({0: 5, 1: 3, 2: 2}, 7) == {0: 4, 1: 2, 2: 1}


@given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.data())
def test_stratified_proportions_within_one(counts, data):
    labels = [c for c, k in enumerate(counts) for _ in range(k)]
    n = data.draw(st.integers(1, len(labels)))
    idx = subsample_indices(labels, n, seed=1)
    assert len(idx) == len(set(idx)) == n
    got = Counter(labels[i] for i in idx)
    for c, k in enumerate(counts):
        assert abs(got.get(c, 0) - n * k / len(labels)) < 1


def test_subsample_identity_determinism_and_range():
    data = three_class()
    assert sorted(subsample_indices([ex.label for ex in data], 100, 3)) == list(range(100))
    a = subsample_indices([ex.label for ex in data], 37, 5, stratified=False)
    assert a == subsample_indices([ex.label for ex in data], 37, 5, stratified=False)
    with pytest.raises(ValueError):
        subsample(data, 0, 0)
    with pytest.raises(ValueError):
        subsample(data, 101, 0)


def test_two_steps_per_epoch_for_32_examples():
    res = finetune(small_model(), separable_task(32, seed=0), VOCAB,
                   FinetuneConfig(lr=1e-3, epochs=1, max_len=32), 2)
    assert res.steps == 2


def test_overfit_32_examples_to_perfect_train_f1():
    train = separable_task(32, seed=0)
    res = finetune(small_model(), train, VOCAB, FinetuneConfig(lr=3e-3, epochs=100, max_len=32),
                   2)
    assert res.steps <= 200
    m = evaluate(res.model, train, VOCAB, 32)
    assert m.f1_binary == 1.0 and m.f1_macro == 1.0


def test_finetune_is_deterministic_and_leaves_base_untouched():
    base = small_model()
    before = parameter_digest(base)
    data = separable_task(40, seed=1)
    cfg = FinetuneConfig(lr=1e-3, epochs=2, max_len=32, seed=4)
    a = evaluate(finetune(base, data, VOCAB, cfg, 2).model, data, VOCAB, 32)
    b = evaluate(finetune(base, data, VOCAB, cfg, 2).model, data, VOCAB, 32)
    assert a == b
    assert parameter_digest(base) == before


def test_bad_label_reports_record_index():
    data = separable_task(5, seed=0) + [ClassificationExample("aa", None, 7)]
    with pytest.raises(DataError, match="record 5"):
        finetune(small_model(), data, VOCAB, FinetuneConfig(max_len=32), 2)


def test_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(lr=0).validate()
    with pytest.raises(ValueError):
        FinetuneConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        FinetuneConfig(max_len=100).validate(64)
    with pytest.raises(ValueError):
        SweepConfig(sizes=[20, 10]).validate(100)
    with pytest.raises(ValueError):
        SweepConfig(sizes=[10, 200]).validate(100)


def test_grid_row_count_arithmetic():
    assert SweepConfig(sizes=[50, 200, 500, 800, 1000, 3305]).num_cells == 54


def small_sweep(**kw):
    base = dict(sizes=[8, 16], lrs=[1e-3, 3e-3], epochs_grid=[1, 2], seeds=[0], max_len=32)
    base.update(kw)
    return SweepConfig(**base)


def test_sweep_rows_best_and_digests(tmp_path):
    train, dev = separable_task(60, seed=2), separable_task(30, seed=3)
    base = small_model()
    report = fewshot_sweep(base, train, dev, VOCAB, small_sweep())
    assert len(report.rows) == 8 and not report.partial
    assert len(set(report.base_digests)) == 1
    assert report.base_digests[0] == parameter_digest(base)
    for best in report.best:
        group = [r for r in report.rows if r.train_size == best.train_size]
        assert best.metrics.selection_score == max(r.metrics.selection_score for r in group)
    report_path, best_path = report.write(tmp_path)
    lines = report_path.read_text().splitlines()
    assert lines[0] == ",".join(REPORT_HEADER) and len(lines) == 9
    assert len(best_path.read_text().splitlines()) == 3


def test_sweep_threads_match_serial(tmp_path):
    train, dev = separable_task(60, seed=2), separable_task(30, seed=3)
    a = fewshot_sweep(small_model(), train, dev, VOCAB, small_sweep(), workers=1)
    b = fewshot_sweep(small_model(), train, dev, VOCAB, small_sweep(), workers=3)
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()


def test_failed_cell_marks_report_partial(tmp_path):
    train, dev = separable_task(60, seed=2), separable_task(30, seed=3)
    bad = (16, 1e-3, 2, 0)
    report = fewshot_sweep(small_model(), train, dev, VOCAB, small_sweep(), fail_cells={bad})
    assert report.partial and len(report.rows) == 7
    assert report.failures[0][0] == bad
    report.write(tmp_path)
    assert "injected failure" in (tmp_path / "failures.csv").read_text()


def test_multiclass_selection_uses_macro():
    rng = np.random.default_rng(0)
    data = [ClassificationExample(ex.text_a, None, int(rng.integers(3)))
            for ex in separable_task(30, seed=4)]
    report = fewshot_sweep(small_model(), data, data, VOCAB,
                           small_sweep(sizes=[15], lrs=[1e-3], epochs_grid=[1]))
    m = report.rows[0].metrics
    assert m.f1_binary is None and m.selection_score == m.f1_macro
