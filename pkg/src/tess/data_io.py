"""Corpus and dataset loading, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"TESSCKPT"
    version    uint32
    hdr_len    uint64
    header     hdr_len bytes of UTF-8 JSON
    payload    raw tensor bytes, concatenated in header order
    digest     32 bytes  SHA-256 of everything before it

The header holds ``config`` (model config), ``tensors`` (a list of
``{name, shape, dtype, offset, nbytes}`` with offsets relative to the
payload start), optional ``optimizer`` metadata and free-form ``extra``.
Optimizer moments are stored as tensors named ``optim.m.<param>`` and
``optim.v.<param>``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .model import EncoderModel, ModelConfig
from .pretrain import OptimizerState
from .tokenizer import Vocabulary, build_sequence, tokenize

MAGIC = b"TESSCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_LEN = 32
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class DataError(ValueError):
    pass


class CorpusError(DataError):
    pass


class CheckpointError(Exception):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


# ------------------------------------------------------------------ corpora


def _text_files(path: Path) -> list[Path]:
    if not path.is_dir():
        raise CorpusError(f"corpus directory not found: {path}")
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix == ".txt")


def iter_documents(path: str | Path) -> Iterator[str]:
    """Yield blank-line-delimited documents from every ``*.txt`` file in lexicographic order.

    Files are read line by line so memory is bounded by the largest document.
    """
    files = _text_files(Path(path))
    if not files:
        warnings.warn(f"no .txt files in corpus directory {path}", RuntimeWarning)
        return
    for f in files:
        try:
            fh = open(f, "rb")
        except OSError as e:
            raise CorpusError(f"cannot read {f}: {e}") from e
        with fh:
            offset = 0
            lines: list[str] = []
            for raw in fh:
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError as e:
                    raise CorpusError(
                        f"{f}: invalid UTF-8 at byte offset {offset + e.start}"
                    ) from e
                offset += len(raw)
                if line.strip():
                    lines.append(line.strip())
                elif lines:
                    yield " ".join(lines)
                    lines = []
            if lines:
                yield " ".join(lines)


def pack_document(ids: list[int], seq_len: int) -> Iterator[list[int]]:
    for lo in range(0, len(ids), seq_len):
        yield ids[lo:lo + seq_len]


def load_corpus(path: str | Path, vocab: Vocabulary, seq_len: int) -> Iterator[list[int]]:
    """Stream tokenized training chunks of at most ``seq_len`` tokens.

    Each document's sentences are concatenated and split every ``seq_len``
    tokens; chunks never span documents.
    """
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    for doc in iter_documents(path):
        ids = tokenize(vocab, doc)
        yield from pack_document(ids, seq_len)


def corpus_sequences(path: str | Path, vocab: Vocabulary, t_max: int):
    """Encoded single-segment training sequences with room for ``[CLS]``/``[SEP]``."""
    return [build_sequence(chunk, None, t_max, pad=False)
            for chunk in load_corpus(path, vocab, t_max - 2)]


# ------------------------------------------------------------------ datasets


@dataclass(frozen=True)
class ClassificationExample:
    text_a: str
    text_b: str | None
    label: int


def parse_example(obj, where: str) -> ClassificationExample:
    if not isinstance(obj, dict):
        raise DataError(f"{where}: expected a JSON object")
    for key in ("text_a", "label"):
        if key not in obj:
            raise DataError(f"{where}: missing field '{key}'")
    a, b, y = obj["text_a"], obj.get("text_b"), obj["label"]
    if not isinstance(a, str) or not a.strip():
        raise DataError(f"{where}: field 'text_a' must be a non-empty string")
    if b is not None and not isinstance(b, str):
        raise DataError(f"{where}: field 'text_b' must be a string or null")
    if isinstance(y, bool) or not isinstance(y, int) or y < 0:
        raise DataError(f"{where}: field 'label' must be a non-negative integer, got {y!r}")
    return ClassificationExample(a, b, y)


def load_classification_dataset(path: str | Path, num_classes: int | None = None
                                ) -> list[ClassificationExample]:
    """Read a JSON-lines dataset; errors carry the 1-based line number."""
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    out = []
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{where}: malformed JSON ({e.msg})") from e
            ex = parse_example(obj, where)
            if num_classes is not None and ex.label >= num_classes:
                raise DataError(f"{where}: label {ex.label} >= num_classes {num_classes}")
            out.append(ex)
    return out


def save_classification_dataset(examples, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"text_a": ex.text_a, "text_b": ex.text_b, "label": ex.label})
                     + "\n")


def label_counts(examples) -> dict[int, int]:
    counts: dict[int, int] = {}
    for ex in examples:
        counts[ex.label] = counts.get(ex.label, 0) + 1
    return dict(sorted(counts.items()))


# ------------------------------------------------------------------ checkpoints


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "<f4"
    if arr.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(model: EncoderModel, path: str | Path, state: OptimizerState | None = None,
                    extra: dict | None = None) -> None:
    """Write ``model`` (and optimizer state) atomically; shared groups are stored once."""
    tensors: list[tuple[str, np.ndarray]] = list(model.state_dict().items())
    header: dict = {"config": model.config.to_dict(), "extra": extra or {}}
    if state is not None:
        header["optimizer"] = {"step": state.step, "beta1": state.beta1, "beta2": state.beta2,
                               "eps": state.eps, "weight_decay": state.weight_decay}
        for name in state.m:
            tensors.append((f"optim.m.{name}", state.m[name]))
            tensors.append((f"optim.v.{name}", state.v[name]))
    entries = []
    offset = 0
    for name, arr in tensors:
        code = _dtype_code(arr)
        nbytes = arr.size * np.dtype(code).itemsize
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code,
                        "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header["tensors"] = entries
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    h = hashlib.sha256()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            def emit(b: bytes):
                h.update(b)
                fh.write(b)

            emit(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hdr)))
            emit(hdr)
            for (_, arr), e in zip(tensors, entries):
                emit(np.ascontiguousarray(arr, dtype=np.dtype(e["dtype"])).tobytes())
            fh.write(h.digest())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class CheckpointContents:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    optimizer: dict | None
    extra: dict


def read_checkpoint(path: str | Path) -> CheckpointContents:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if len(blob) < _PREFIX.size:
        raise TruncatedCheckpointError(f"{path}: file too short for a checkpoint header")
    magic, version, hdr_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    hdr_end = _PREFIX.size + hdr_len
    if len(blob) < hdr_end + _DIGEST_LEN:
        raise TruncatedCheckpointError(f"{path}: header extends past end of file")
    try:
        header = json.loads(blob[_PREFIX.size:hdr_end].decode("utf-8"))
        entries = header["tensors"]
        payload_len = sum(e["nbytes"] for e in entries)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        # a damaged header is most likely a flipped byte; let the digest decide
        if hashlib.sha256(blob[:-_DIGEST_LEN]).digest() != blob[-_DIGEST_LEN:]:
            raise ChecksumError(f"{path}: checksum mismatch") from e
        raise CheckpointError(f"{path}: unreadable header ({e})") from e
    expected = hdr_end + payload_len + _DIGEST_LEN
    if len(blob) < expected:
        raise TruncatedCheckpointError(
            f"{path}: truncated ({len(blob)} bytes, expected {expected})"
        )
    if len(blob) > expected:
        raise CheckpointError(f"{path}: {len(blob) - expected} trailing bytes")
    if hashlib.sha256(blob[:-_DIGEST_LEN]).digest() != blob[-_DIGEST_LEN:]:
        raise ChecksumError(f"{path}: checksum mismatch")
    tensors = {}
    for e in entries:
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported dtype {e['dtype']} for {e['name']}")
        lo = hdr_end + e["offset"]
        arr = np.frombuffer(blob[lo:lo + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(_DTYPES[e["dtype"]])
    return CheckpointContents(ModelConfig.from_dict(header["config"]), tensors,
                              header.get("optimizer"), header.get("extra", {}))


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None
                    ) -> tuple[EncoderModel, OptimizerState | None, dict]:
    """Rebuild the model (with its sharing wiring) and optimizer state from ``path``."""
    ck = read_checkpoint(path)
    if expected_config is not None and expected_config.to_dict() != ck.config.to_dict():
        diff = {k: (v, ck.config.to_dict()[k]) for k, v in expected_config.to_dict().items()
                if ck.config.to_dict()[k] != v}
        raise ConfigMismatchError(f"{path}: config differs from requested (requested, file): "
                                  f"{diff}")
    params = {n: a for n, a in ck.tensors.items() if not n.startswith("optim.")}
    dtypes = {a.dtype for a in params.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    model = EncoderModel(ck.config, seed=0, dtype=dtype)
    try:
        model.load_state_dict(params)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: {e}") from e
    state = None
    if ck.optimizer is not None:
        o = ck.optimizer
        state = OptimizerState(step=o["step"], beta1=o["beta1"], beta2=o["beta2"],
                               eps=o["eps"], weight_decay=o["weight_decay"])
        for n, a in ck.tensors.items():
            if n.startswith("optim.m."):
                state.m[n[len("optim.m."):]] = a.copy()
            elif n.startswith("optim.v."):
                state.v[n[len("optim.v."):]] = a.copy()
    return model, state, ck.extra
