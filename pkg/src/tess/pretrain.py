"""Masked-language-model pretraining: n-gram masking, AdamW, schedule and training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import EncoderModel, is_decayed
from .tensor import Tensor
from .tokenizer import MASK_ID, NUM_SPECIAL, PAD_ID, EncodedSequence

log = logging.getLogger(__name__)

IGNORE = -100


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, last_finite_step: int | None, loss: float):
        self.step = step
        self.last_finite_step = last_finite_step
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at step {step}; last finite step: {last_finite_step}"
        )


@dataclass
class PretrainConfig:
    mask_prob: float = 0.15
    max_ngram: int = 3
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1
    batch_size: int = 2000
    micro_batch: int | None = None
    total_steps: int = 120_000
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 10_000

    def validate(self) -> "PretrainConfig":
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must be in [0, 1], got {self.mask_prob}")
        split = self.mask_frac + self.random_frac + self.keep_frac
        if min(self.mask_frac, self.random_frac, self.keep_frac) < 0 or abs(split - 1.0) > 1e-9:
            raise ValueError(f"corruption split must be non-negative and sum to 1, got {split}")
        if self.max_ngram < 1:
            raise ValueError("max_ngram must be >= 1")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise ValueError("micro_batch must be >= 1")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must be in [0, 1]")
        if self.log_every < 1 or self.checkpoint_every < 1:
            raise ValueError("log_every and checkpoint_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


# ------------------------------------------------------------------ masking


@dataclass
class MaskedRow:
    input_ids: list[int]
    labels: list[int]
    attention_mask: list[int]
    segment_ids: list[int]
    spans: list[tuple[int, int]]  # (start, length) in sampling order


@dataclass
class MaskedBatch:
    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray
    spans: list[list[tuple[int, int]]] = field(default_factory=list)

    def __len__(self) -> int:
        return self.input_ids.shape[0]

    @property
    def num_selected(self) -> int:
        return int((self.labels != IGNORE).sum())

    def rows(self, idx) -> "MaskedBatch":
        idx = np.asarray(idx)
        return MaskedBatch(self.input_ids[idx], self.labels[idx], self.attention_mask[idx],
                           self.segment_ids[idx], [self.spans[i] for i in idx])


def ngram_mask(seq: EncodedSequence, cfg: PretrainConfig, vocab_size: int,
               rng: np.random.Generator) -> MaskedRow:
    """Select n-gram spans of eligible tokens and corrupt them 80/10/10.

    Span lengths are uniform on ``1..max_ngram``; each span starts at a
    uniformly chosen unselected eligible position and grows rightward over
    unselected eligible positions. The last span is trimmed so the selected
    count equals ``round(mask_prob * eligible)``.
    """
    ids = list(seq.token_ids)
    special = seq.special_mask or [0] * len(ids)
    eligible = np.array(
        [s == 0 and a == 1 for s, a in zip(special, seq.attention_mask)], dtype=bool
    )
    n_eligible = int(eligible.sum())
    target = int(math.floor(cfg.mask_prob * n_eligible + 0.5))
    selected = np.zeros(len(ids), dtype=bool)
    spans: list[tuple[int, int]] = []
    count = 0
    while count < target:
        free = np.flatnonzero(eligible & ~selected)
        n = int(rng.integers(1, cfg.max_ngram + 1))
        start = int(free[rng.integers(len(free))])
        length = 0
        limit = min(n, target - count)
        while (length < limit and start + length < len(ids)
               and eligible[start + length] and not selected[start + length]):
            selected[start + length] = True
            length += 1
        spans.append((start, length))
        count += length

    labels = [IGNORE] * len(ids)
    positions = np.flatnonzero(selected)
    if len(positions):
        u = rng.random(len(positions))
        randoms = rng.integers(NUM_SPECIAL, vocab_size, size=len(positions)) \
            if vocab_size > NUM_SPECIAL else np.full(len(positions), MASK_ID)
        for j, pos in enumerate(positions):
            labels[pos] = ids[pos]
            if u[j] < cfg.mask_frac:
                ids[pos] = MASK_ID
            elif u[j] < cfg.mask_frac + cfg.random_frac:
                ids[pos] = int(randoms[j])
    return MaskedRow(ids, labels, list(seq.attention_mask), list(seq.segment_ids), spans)


def mask_batch(seqs: Sequence[EncodedSequence], cfg: PretrainConfig, vocab_size: int,
               rng: np.random.Generator, trim: bool = True) -> MaskedBatch:
    """Mask every sequence and stack the rows, padding to the longest one."""
    rows = [ngram_mask(s, cfg, vocab_size, rng) for s in seqs]
    width = max((len(r.input_ids) for r in rows), default=0)
    if trim:
        width = max((sum(r.attention_mask) for r in rows), default=0)

    def stack(key, fill):
        out = np.full((len(rows), width), fill, dtype=np.int64)
        for i, r in enumerate(rows):
            vals = getattr(r, key)[:width]
            out[i, :len(vals)] = vals
        return out

    return MaskedBatch(stack("input_ids", PAD_ID), stack("labels", IGNORE),
                       stack("attention_mask", 0), stack("segment_ids", 0),
                       [r.spans for r in rows])


def mlm_loss(model: EncoderModel, batch: MaskedBatch, rng: np.random.Generator | None = None
             ) -> Tensor:
    hidden = model.forward(batch, rng=rng)
    logits = model.mlm_logits(hidden)
    B, S, V = logits.shape
    return T.cross_entropy(T.reshape(logits, (B * S, V)), batch.labels.reshape(-1), IGNORE)


# ------------------------------------------------------------------ optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def adamw_step(params: Sequence[tuple[str, Tensor]], state: OptimizerState, lr_t: float,
               grads: dict[str, np.ndarray] | None = None) -> None:
    """One AdamW update in place.

    ``theta -= lr_t * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``;
    biases and layer-norm parameters are not decayed. Gradients default to
    each parameter's ``.grad``; a missing gradient counts as zero.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and is_decayed(name):
            update = update + state.weight_decay * p.data
        p.data -= (lr_t * update).astype(p.dtype, copy=False)


def lr_schedule(step: int, total_steps: int, peak_lr: float, warmup_fraction: float) -> float:
    """Linear warmup from 0 to ``peak_lr`` then linear decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(warmup_fraction * total_steps))
    if step < warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


# ------------------------------------------------------------------ loop


@dataclass
class PretrainResult:
    loss_log: list[tuple[int, float, float]]
    checkpoints: list[Path]
    state: OptimizerState
    final_step: int


def batch_indices(step: int, batch_size: int, n: int, seed: int) -> np.ndarray:
    """Sequence indices for ``step``: a fresh seeded permutation of the data every epoch."""
    out = np.empty(batch_size, dtype=np.int64)
    start = step * batch_size
    perms: dict[int, np.ndarray] = {}
    for j in range(batch_size):
        epoch, pos = divmod(start + j, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, 0, epoch]).permutation(n)
        out[j] = perms[epoch][pos]
    return out


def write_loss_log(rows, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            w.writerow([step, repr(float(lr)), repr(float(loss))])


def pretrain_loop(
    model: EncoderModel,
    sequences: Sequence[EncodedSequence],
    cfg: PretrainConfig,
    out_dir: str | Path | None = None,
    state: OptimizerState | None = None,
    start_step: int = 0,
    on_log: Callable[[int, float, float], None] | None = None,
) -> PretrainResult:
    """Train ``model`` with the MLM objective for ``cfg.total_steps`` updates.

    Batch contents, masks and dropout depend only on ``cfg.seed`` and the
    step number, so resuming from a checkpoint written at step ``s`` (with
    its optimizer state) reproduces the uninterrupted run exactly. The loss
    is recorded after every ``log_every``-th update; checkpoints go to
    ``out_dir`` every ``checkpoint_every`` updates and at the end.
    """
    from .data_io import save_checkpoint

    cfg.validate()
    if not sequences:
        raise ValueError("pretraining corpus is empty")
    if state is None:
        state = OptimizerState(weight_decay=cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    micro = cfg.micro_batch or cfg.batch_size
    vocab_size = model.config.vocab_size
    params = list(model.named_parameters())
    loss_log: list[tuple[int, float, float]] = []
    checkpoints: list[Path] = []
    last_finite: int | None = start_step if start_step else None
    model.train()
    for step in range(start_step, cfg.total_steps):
        lr_t = lr_schedule(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_fraction)
        idx = batch_indices(step, cfg.batch_size, len(sequences), cfg.seed)
        batch = mask_batch([sequences[i] for i in idx], cfg, vocab_size,
                           np.random.default_rng([cfg.seed, 1, step]))
        drop_rng = np.random.default_rng([cfg.seed, 2, step])
        total_sel = batch.num_selected
        model.zero_grad()
        loss_value = 0.0
        for lo in range(0, cfg.batch_size, micro):
            part = batch.rows(np.arange(lo, min(lo + micro, cfg.batch_size)))
            n_sel = part.num_selected
            if n_sel == 0:
                continue
            loss = mlm_loss(model, part, rng=drop_rng)
            weight = n_sel / total_sel
            loss_value += float(loss.data) * weight
            T.backward(T.mul(loss, weight))
        if not math.isfinite(loss_value):
            raise NonFiniteLossError(step + 1, last_finite, loss_value)
        last_finite = step + 1
        adamw_step(params, state, lr_t)
        done = step + 1
        if done % cfg.log_every == 0:
            loss_log.append((done, lr_t, loss_value))
            log.info("step %d lr %.3g loss %.4f", done, lr_t, loss_value)
            if on_log is not None:
                on_log(done, lr_t, loss_value)
        if out is not None and (done % cfg.checkpoint_every == 0 or done == cfg.total_steps):
            path = out / f"step_{done:07d}.ckpt"
            save_checkpoint(model, path, state=state, extra={"step": done,
                                                             "pretrain": cfg.to_dict()})
            checkpoints.append(path)
    model.eval()
    if out is not None:
        write_loss_log(loss_log, out / "loss.csv")
    return PretrainResult(loss_log, checkpoints, state, cfg.total_steps)


def has_nsp_head(model: EncoderModel) -> bool:
    return any("nsp" in n or "pooler" in n for n, _ in model.named_parameters())
