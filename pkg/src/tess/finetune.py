"""Classification fine-tuning, evaluation and the few-shot sweep."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data_io import ClassificationExample, DataError
from .metrics import MetricSet, metric_set
from .model import EncoderModel, collate
from .pretrain import OptimizerState, adamw_step, lr_schedule
from .tokenizer import EncodedSequence, Vocabulary, encode_pair

log = logging.getLogger(__name__)

GRID_LRS = (1e-5, 3e-5, 5e-5)
GRID_EPOCHS = (1, 3, 5)
PAIR_TASK_SIZES = (50, 200, 500, 800, 1000, 3305)
BINARY_TASK_SIZES = (100, 400, 700, 1000)

REPORT_HEADER = ["train_size", "lr", "epochs", "seed", "split", "accuracy", "f1_macro",
                 "f1_weighted", "f1_binary"]


@dataclass
class FinetuneConfig:
    lr: float = 3e-5
    epochs: int = 3
    batch_size: int = 16
    seed: int = 0
    max_len: int = 768
    weight_decay: float = 0.01
    warmup_fraction: float = 0.0

    def validate(self, t_max: int | None = None) -> "FinetuneConfig":
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.max_len < 8 or (t_max is not None and self.max_len > t_max):
            raise ValueError(f"max_len {self.max_len} must lie in [8, {t_max}]")
        return self


@dataclass
class SweepConfig:
    sizes: list[int]
    lrs: list[float] = field(default_factory=lambda: list(GRID_LRS))
    epochs_grid: list[int] = field(default_factory=lambda: list(GRID_EPOCHS))
    seeds: list[int] = field(default_factory=lambda: [0])
    stratified: bool = True
    batch_size: int = 16
    max_len: int = 768

    def validate(self, dataset_size: int) -> "SweepConfig":
        if not self.sizes or list(self.sizes) != sorted(self.sizes):
            raise ValueError(f"sizes must be non-empty and ascending, got {self.sizes}")
        if self.sizes[0] < 1 or self.sizes[-1] > dataset_size:
            raise ValueError(f"sizes must lie in [1, {dataset_size}], got {self.sizes}")
        if not (self.lrs and self.epochs_grid and self.seeds):
            raise ValueError("lrs, epochs_grid and seeds must be non-empty")
        return self

    @property
    def num_cells(self) -> int:
        return len(self.sizes) * len(self.lrs) * len(self.epochs_grid) * len(self.seeds)


# ------------------------------------------------------------------ subsampling


def stratified_quotas(counts: dict[int, int], n: int) -> dict[int, int]:
    """Per-class quotas proportional to ``counts`` with largest-remainder rounding.

    Ties in the remainder go to the lower class id.
    """
    total = sum(counts.values())
    exact = {c: Fraction(n * k, total) for c, k in counts.items()}
    quotas = {c: math.floor(q) for c, q in exact.items()}
    short = n - sum(quotas.values())
    order = sorted(counts, key=lambda c: (-(exact[c] - quotas[c]), c))
    for c in order[:short]:
        quotas[c] += 1
    return quotas


def subsample_indices(labels: Sequence[int], n: int, seed: int, stratified: bool = True
                      ) -> list[int]:
    N = len(labels)
    if not 1 <= n <= N:
        raise ValueError(f"subsample size {n} outside [1, {N}]")
    rng = np.random.default_rng([seed, n])
    if not stratified:
        return sorted(int(i) for i in rng.choice(N, size=n, replace=False))
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        by_class.setdefault(int(y), []).append(i)
    quotas = stratified_quotas({c: len(v) for c, v in sorted(by_class.items())}, n)
    chosen: list[int] = []
    for c in sorted(by_class):
        pool = by_class[c]
        pick = rng.choice(len(pool), size=quotas[c], replace=False)
        chosen.extend(pool[int(j)] for j in pick)
    return sorted(chosen)


def subsample(dataset: Sequence[ClassificationExample], n: int, seed: int,
              stratified: bool = True) -> list[ClassificationExample]:
    idx = subsample_indices([ex.label for ex in dataset], n, seed, stratified)
    return [dataset[i] for i in idx]


# ------------------------------------------------------------------ fine-tuning


def encode_examples(vocab: Vocabulary, examples: Sequence[ClassificationExample],
                    max_len: int) -> list[EncodedSequence]:
    return [encode_pair(vocab, ex.text_a, ex.text_b, max_len) for ex in examples]


def check_labels(examples: Sequence[ClassificationExample], num_classes: int) -> None:
    for i, ex in enumerate(examples):
        if not 0 <= ex.label < num_classes:
            raise DataError(f"record {i}: label {ex.label} outside [0, {num_classes})")


@dataclass
class FinetuneResult:
    model: EncoderModel
    steps: int
    losses: list[float]


def finetune(base: EncoderModel, examples: Sequence[ClassificationExample], vocab: Vocabulary,
             cfg: FinetuneConfig, num_classes: int,
             encoded: Sequence[EncodedSequence] | None = None) -> FinetuneResult:
    """Fine-tune a copy of ``base`` with a fresh classification head.

    All weights train under AdamW with a linearly decaying rate. Batch
    order, head init and dropout are fixed by ``cfg.seed``; ``base`` is not
    modified.
    """
    cfg.validate(base.config.max_positions)
    check_labels(examples, num_classes)
    if not examples:
        raise ValueError("cannot fine-tune on an empty dataset")
    model = base.copy()
    model.set_classifier(num_classes, seed=cfg.seed)
    seqs = list(encoded) if encoded is not None else encode_examples(vocab, examples, cfg.max_len)
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    n = len(examples)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    state = OptimizerState(weight_decay=cfg.weight_decay)
    params = list(model.named_parameters())
    losses: list[float] = []
    model.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3, epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = collate([seqs[i] for i in idx])
            model.zero_grad()
            hidden = model.forward(batch, rng=np.random.default_rng([cfg.seed, 4, step]))
            loss = T.cross_entropy(model.classify_logits(hidden), labels[idx])
            T.backward(loss)
            lr_t = lr_schedule(step, total, cfg.lr, cfg.warmup_fraction)
            adamw_step(params, state, lr_t)
            losses.append(float(loss.data))
            step += 1
    model.eval()
    return FinetuneResult(model, step, losses)


def predict(model: EncoderModel, seqs: Sequence[EncodedSequence], batch_size: int = 64
            ) -> np.ndarray:
    """Argmax class per sequence; ties resolve to the lowest class id."""
    was_training = model.training
    model.eval()
    out = []
    with T.no_grad():
        for lo in range(0, len(seqs), batch_size):
            batch = collate(seqs[lo:lo + batch_size])
            logits = model.classify_logits(model.forward(batch)).data
            out.append(np.argmax(logits, axis=1))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: EncoderModel, examples: Sequence[ClassificationExample], vocab: Vocabulary,
             max_len: int = 768, encoded: Sequence[EncodedSequence] | None = None) -> MetricSet:
    if model.classifier is None:
        raise RuntimeError("model has no classification head")
    seqs = encoded if encoded is not None else encode_examples(vocab, examples, max_len)
    preds = predict(model, seqs)
    k = model.config.num_classes
    return metric_set(preds.tolist(), [ex.label for ex in examples], k)


# ------------------------------------------------------------------ sweep


@dataclass
class SweepRow:
    train_size: int
    lr: float
    epochs: int
    seed: int
    split: str
    metrics: MetricSet

    def csv_fields(self) -> list[str]:
        m = self.metrics
        return [str(self.train_size), repr(self.lr), str(self.epochs), str(self.seed), self.split,
                repr(m.accuracy), repr(m.f1_macro), repr(m.f1_weighted),
                "" if m.f1_binary is None else repr(m.f1_binary)]


@dataclass
class SweepReport:
    rows: list[SweepRow]
    best: list[SweepRow]
    failures: list[tuple[tuple, str]] = field(default_factory=list)
    base_digests: list[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = out / "report.csv", out / "best.csv"
        for path, rows in zip(paths, (self.rows, self.best)):
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(REPORT_HEADER)
                for r in rows:
                    w.writerow(r.csv_fields())
        if self.failures:
            with open(out / "failures.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["train_size", "lr", "epochs", "seed", "error"])
                for coords, msg in self.failures:
                    w.writerow([*map(str, coords), msg])
        return paths


def parameter_digest(model: EncoderModel) -> str:
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def best_rows(rows: Sequence[SweepRow]) -> list[SweepRow]:
    """Per train size, the first row (in grid order) with the highest selection score."""
    best: dict[int, SweepRow] = {}
    for r in rows:
        cur = best.get(r.train_size)
        if cur is None or r.metrics.selection_score > cur.metrics.selection_score:
            best[r.train_size] = r
    return [best[s] for s in sorted(best)]


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("TESS_THREADS", "1")))
    except ValueError:
        return 1


def fewshot_sweep(base: EncoderModel, train: Sequence[ClassificationExample],
                  eval_set: Sequence[ClassificationExample], vocab: Vocabulary,
                  sweep: SweepConfig, num_classes: int | None = None,
                  workers: int | None = None, fail_cells: set | None = None) -> SweepReport:
    """Run subsample -> fine-tune -> evaluate for every (size, lr, epochs, seed) cell.

    Every cell starts from an untouched copy of ``base`` and is scored on the
    same evaluation split. A failing cell is recorded and the sweep goes on.
    ``fail_cells`` injects failures for the given coordinates (testing hook).
    """
    sweep.validate(len(train))
    k = num_classes or max(ex.label for ex in list(train) + list(eval_set)) + 1
    max_len = min(sweep.max_len, base.config.max_positions)
    train_seqs = encode_examples(vocab, train, max_len)
    eval_seqs = encode_examples(vocab, eval_set, max_len)
    labels = [ex.label for ex in train]
    cells = [(n, lr, ep, sd) for n in sweep.sizes for lr in sweep.lrs
             for ep in sweep.epochs_grid for sd in sweep.seeds]

    def run(cell):
        n, lr, ep, sd = cell
        digest = parameter_digest(base)
        if fail_cells and cell in fail_cells:
            raise RuntimeError(f"injected failure at {cell}")
        idx = subsample_indices(labels, n, sd, sweep.stratified)
        cfg = FinetuneConfig(lr=lr, epochs=ep, batch_size=sweep.batch_size, seed=sd,
                             max_len=max_len)
        res = finetune(base, [train[i] for i in idx], vocab, cfg, k,
                       encoded=[train_seqs[i] for i in idx])
        metrics = evaluate(res.model, eval_set, vocab, max_len, encoded=eval_seqs)
        return digest, SweepRow(n, lr, ep, sd, "eval", metrics)

    def guarded(cell):
        try:
            return cell, run(cell), None
        except Exception as e:  # noqa: BLE001 - reported per cell
            log.warning("sweep cell %s failed: %s", cell, e)
            return cell, None, f"{type(e).__name__}: {e}"

    workers = workers or thread_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(guarded, cells))
    else:
        results = [guarded(c) for c in cells]

    rows, failures, digests = [], [], []
    for cell, ok, err in results:
        if err is not None:
            failures.append((cell, err))
        else:
            digests.append(ok[0])
            rows.append(ok[1])
    return SweepReport(rows, best_rows(rows), failures, digests)


def sweep_config_dict(sweep: SweepConfig) -> dict:
    return asdict(sweep)
