"""Transformer encoder with factorized embeddings and cross-layer attention sharing."""
from __future__ import annotations

import copy
import enum
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

NEG_INF = -1e9


class Sharing(str, enum.Enum):
    NONE = "none"
    ATTENTION = "attention"
    ALL = "all"


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 30522
    embed_dim: int = 128
    hidden_dim: int = 768
    layers: int = 12
    heads: int = 12
    ffn_dim: int = 3072
    max_positions: int = 768
    segment_types: int = 2
    sharing: Sharing = Sharing.ATTENTION
    dropout: float = 0.1
    num_classes: int | None = None

    def __post_init__(self):
        self.sharing = Sharing(self.sharing)

    def validate(self) -> "ModelConfig":
        problems = []
        if self.vocab_size < 1:
            problems.append("vocab_size >= 1")
        if self.heads < 1 or self.hidden_dim % self.heads:
            problems.append(f"hidden_dim ({self.hidden_dim}) divisible by heads ({self.heads})")
        if not 1 <= self.embed_dim <= self.hidden_dim:
            problems.append(f"1 <= embed_dim ({self.embed_dim}) <= hidden_dim ({self.hidden_dim})")
        if self.layers < 1:
            problems.append("layers >= 1")
        if self.max_positions < 1:
            problems.append("max_positions >= 1")
        if self.ffn_dim < 1:
            problems.append("ffn_dim >= 1")
        if self.segment_types < 1:
            problems.append("segment_types >= 1")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("0 <= dropout < 1")
        if self.num_classes is not None and self.num_classes < 1:
            problems.append("num_classes >= 1")
        if problems:
            raise ConfigError("invalid model config, violated: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sharing"] = self.sharing.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def tess_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def baseline_config(**overrides) -> ModelConfig:
    """Unshared full-dimension stand-in for BERT-base."""
    base = dict(embed_dim=768, hidden_dim=768, max_positions=512, sharing=Sharing.NONE)
    base.update(overrides)
    return ModelConfig(**base)


# --------------------------------------------------------------- parameter accounting


@dataclass
class ParamReport:
    total: int
    by_block: dict[str, int]
    unique: int
    logical: int
    logical_by_block: dict[str, int] = field(default_factory=dict)


def count_parameters(config: ModelConfig) -> ParamReport:
    """Closed-form parameter counts; ``logical`` expands shared groups per layer."""
    c = config.validate()
    V, E, H, L, I, Tm = (c.vocab_size, c.embed_dim, c.hidden_dim, c.layers, c.ffn_dim,
                         c.max_positions)
    attn = 4 * (H * H + H)
    ffn = 2 * H * I + I + H
    n_attn = 1 if c.sharing in (Sharing.ATTENTION, Sharing.ALL) else L
    n_ffn = 1 if c.sharing == Sharing.ALL else L
    by_block = {
        "embeddings": V * E + Tm * E + c.segment_types * E + 2 * E + E * H + H,
        "attention": n_attn * attn,
        "ffn": n_ffn * ffn,
        "layer_norm": L * 4 * H,
        "mlm_head": H * E + E + 2 * E + V,
    }
    if c.num_classes:
        by_block["classifier"] = H * c.num_classes + c.num_classes
    logical_by_block = dict(by_block, attention=L * attn, ffn=L * ffn)
    total = sum(by_block.values())
    return ParamReport(total=total, by_block=by_block, unique=total,
                       logical=sum(logical_by_block.values()),
                       logical_by_block=logical_by_block)


# --------------------------------------------------------------- parameters


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two standard deviations."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype or T.get_default_dtype())


class _Init:
    def __init__(self, seed: int, dtype):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype

    def weight(self, *shape) -> Tensor:
        return Tensor(truncated_normal(self.rng, shape, dtype=self.dtype), requires_grad=True)

    def zeros(self, *shape) -> Tensor:
        return Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)

    def ones(self, *shape) -> Tensor:
        return Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)


class LayerNormParams:
    def __init__(self, init: _Init, dim: int):
        self.gamma = init.ones(dim)
        self.beta = init.zeros(dim)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "gamma", self.gamma
        yield "beta", self.beta


class Dense:
    def __init__(self, init: _Init, n_in: int, n_out: int):
        self.weight = init.weight(n_in, n_out)
        self.bias = init.zeros(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "weight", self.weight
        yield "bias", self.bias


class AttentionParams:
    def __init__(self, init: _Init, hidden: int):
        self.query = Dense(init, hidden, hidden)
        self.key = Dense(init, hidden, hidden)
        self.value = Dense(init, hidden, hidden)
        self.output = Dense(init, hidden, hidden)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for part in ("query", "key", "value", "output"):
            for n, p in getattr(self, part).named():
                yield f"{part}.{n}", p


class FFNParams:
    def __init__(self, init: _Init, hidden: int, inner: int):
        self.inner = Dense(init, hidden, inner)
        self.outer = Dense(init, inner, hidden)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for part in ("inner", "outer"):
            for n, p in getattr(self, part).named():
                yield f"{part}.{n}", p


class LayerNorms:
    def __init__(self, init: _Init, hidden: int):
        self.attention_norm = LayerNormParams(init, hidden)
        self.ffn_norm = LayerNormParams(init, hidden)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for part in ("attention_norm", "ffn_norm"):
            for n, p in getattr(self, part).named():
                yield f"{part}.{n}", p


@dataclass
class EncodedBatch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    segment_ids: np.ndarray

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def collate(seqs, trim: bool = True) -> EncodedBatch:
    """Stack encoded sequences, padding ragged rows.

    ``trim`` drops trailing columns that are padding in every row.
    """
    width = max((len(s.token_ids) for s in seqs), default=0)
    if trim:
        width = max((sum(s.attention_mask) for s in seqs), default=0)
    ids = np.zeros((len(seqs), width), dtype=np.int64)  # PAD_ID == 0
    att = np.zeros_like(ids)
    seg = np.zeros_like(ids)
    for i, s in enumerate(seqs):
        n = min(len(s.token_ids), width)
        ids[i, :n] = s.token_ids[:n]
        att[i, :n] = s.attention_mask[:n]
        seg[i, :n] = s.segment_ids[:n]
    return EncodedBatch(ids, att, seg)


class EncoderModel:
    """Encoder parameters plus forward passes.

    Layer ``i`` uses ``attention_groups[0]`` when attention is shared and
    ``attention_groups[i]`` otherwise; the same rule applies to
    ``ffn_groups`` under full sharing. Layer norms are always per layer.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=None):
        config.validate()
        self.config = copy.deepcopy(config)
        self.training = False
        self.dtype = np.dtype(dtype or T.get_default_dtype()).type
        c = self.config
        init = _Init(seed, self.dtype)
        self.token_embedding = init.weight(c.vocab_size, c.embed_dim)
        self.position_embedding = init.weight(c.max_positions, c.embed_dim)
        self.segment_embedding = init.weight(c.segment_types, c.embed_dim)
        self.embedding_norm = LayerNormParams(init, c.embed_dim)
        self.projection = Dense(init, c.embed_dim, c.hidden_dim)
        n_attn = 1 if c.sharing in (Sharing.ATTENTION, Sharing.ALL) else c.layers
        n_ffn = 1 if c.sharing == Sharing.ALL else c.layers
        self.attention_groups = [AttentionParams(init, c.hidden_dim) for _ in range(n_attn)]
        self.ffn_groups = [FFNParams(init, c.hidden_dim, c.ffn_dim) for _ in range(n_ffn)]
        self.layer_norms = [LayerNorms(init, c.hidden_dim) for _ in range(c.layers)]
        self.mlm_dense = Dense(init, c.hidden_dim, c.embed_dim)
        self.mlm_norm = LayerNormParams(init, c.embed_dim)
        self.mlm_bias = init.zeros(c.vocab_size)
        self.classifier: Dense | None = None
        if c.num_classes:
            self.classifier = Dense(init, c.hidden_dim, c.num_classes)

    # ---- parameter bookkeeping

    def attention_for(self, layer: int) -> AttentionParams:
        return self.attention_groups[0 if len(self.attention_groups) == 1 else layer]

    def ffn_for(self, layer: int) -> FFNParams:
        return self.ffn_groups[0 if len(self.ffn_groups) == 1 else layer]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        """Every distinct parameter exactly once, under its canonical name."""
        yield "embeddings.token", self.token_embedding
        yield "embeddings.position", self.position_embedding
        yield "embeddings.segment", self.segment_embedding
        for n, p in self.embedding_norm.named():
            yield f"embeddings.norm.{n}", p
        for n, p in self.projection.named():
            yield f"embeddings.projection.{n}", p
        for g, group in enumerate(self.attention_groups):
            for n, p in group.named():
                yield f"attention.{g}.{n}", p
        for g, group in enumerate(self.ffn_groups):
            for n, p in group.named():
                yield f"ffn.{g}.{n}", p
        for i, norms in enumerate(self.layer_norms):
            for n, p in norms.named():
                yield f"layers.{i}.{n}", p
        for n, p in self.mlm_dense.named():
            yield f"mlm.dense.{n}", p
        for n, p in self.mlm_norm.named():
            yield f"mlm.norm.{n}", p
        yield "mlm.bias", self.mlm_bias
        if self.classifier is not None:
            for n, p in self.classifier.named():
                yield f"classifier.{n}", p

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in own.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=p.dtype)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "EncoderModel":
        self.training = mode
        return self

    def eval(self) -> "EncoderModel":
        return self.train(False)

    def copy(self) -> "EncoderModel":
        return copy.deepcopy(self)

    def set_classifier(self, num_classes: int, seed: int) -> None:
        """Attach a freshly initialized classification head."""
        init = _Init(seed, self.dtype)
        self.classifier = Dense(init, self.config.hidden_dim, num_classes)
        self.config.num_classes = num_classes

    # ---- forward

    def _check_batch(self, batch) -> None:
        ids = np.asarray(batch.input_ids)
        if ids.ndim != 2:
            raise ValueError(f"input_ids must be [B, T], got shape {ids.shape}")
        if ids.shape[1] > self.config.max_positions:
            raise ValueError(
                f"sequence length {ids.shape[1]} exceeds max_positions {self.config.max_positions}"
            )
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"token id outside [0, {self.config.vocab_size})")
        seg = np.asarray(batch.segment_ids)
        if seg.size and (seg.min() < 0 or seg.max() >= self.config.segment_types):
            raise ValueError(f"segment id outside [0, {self.config.segment_types})")

    def forward(self, batch, rng: np.random.Generator | None = None,
                return_attention: bool = False):
        """Hidden states ``[B, T, H]`` (and per-layer attention maps when asked)."""
        self._check_batch(batch)
        c = self.config
        p = c.dropout
        train = self.training
        ids = np.asarray(batch.input_ids)
        B, S = ids.shape
        nh = c.heads
        hd = c.hidden_dim // nh

        x = T.embedding(self.token_embedding, ids)
        x = x + self.position_embedding[:S]
        x = x + T.embedding(self.segment_embedding, batch.segment_ids)
        x = self.embedding_norm(x)
        x = T.dropout(x, p, rng, train)
        x = self.projection(x)

        keep = np.asarray(batch.attention_mask).astype(self.dtype)
        bias = Tensor(((1.0 - keep) * NEG_INF)[:, None, None, :], dtype=self.dtype)
        scale = 1.0 / math.sqrt(hd)
        maps = []
        for i in range(c.layers):
            att = self.attention_for(i)
            norms = self.layer_norms[i]

            def heads(t: Tensor) -> Tensor:
                return T.transpose(T.reshape(t, (B, S, nh, hd)), (0, 2, 1, 3))

            # the key bias adds the same amount to every score in a row and cancels in
            # softmax, so it is kept for layout parity but never applied
            q = heads(att.query(x))
            k = heads(T.matmul(x, att.key.weight))
            v = heads(att.value(x))
            scores = T.matmul(q, T.swapaxes(k, -1, -2)) * scale + bias
            probs = T.softmax(scores, axis=-1)
            if return_attention:
                maps.append(probs.data.copy())
            probs = T.dropout(probs, p, rng, train)
            ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (B, S, c.hidden_dim))
            out = T.dropout(att.output(ctx), p, rng, train)
            x = norms.attention_norm(x + out)

            ffn = self.ffn_for(i)
            h = T.dropout(ffn.outer(T.gelu(ffn.inner(x))), p, rng, train)
            x = norms.ffn_norm(x + h)
        return (x, maps) if return_attention else x

    __call__ = forward

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        h = self.mlm_norm(T.gelu(self.mlm_dense(hidden)))
        return T.matmul(h, T.transpose(self.token_embedding)) + self.mlm_bias

    def classify_logits(self, hidden: Tensor) -> Tensor:
        if self.classifier is None:
            raise RuntimeError("model has no classification head; set num_classes first")
        return self.classifier(hidden[:, 0, :])


def build_model(config: ModelConfig, seed: int = 0, dtype=None) -> EncoderModel:
    return EncoderModel(config, seed=seed, dtype=dtype)


def mlm_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    return model.mlm_logits(hidden)


def classify_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    return model.classify_logits(hidden)


def forward(model: EncoderModel, batch, rng=None, return_attention: bool = False):
    return model.forward(batch, rng=rng, return_attention=return_attention)


def is_decayed(name: str) -> bool:
    """Weight decay applies to everything except biases and layer-norm parameters."""
    return not (name.endswith("bias") or name.endswith(".gamma") or name.endswith(".beta"))
