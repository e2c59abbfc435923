"""WordPiece vocabulary training, greedy longest-match tokenization and pair encoding."""
from __future__ import annotations

import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
NUM_SPECIAL = len(SPECIAL_TOKENS)
MAX_CHARS_PER_WORD = 100


class VocabError(ValueError):
    pass


def _is_punct(ch: str) -> bool:
    cp = ord(ch)
    if 33 <= cp <= 47 or 58 <= cp <= 64 or 91 <= cp <= 96 or 123 <= cp <= 126:
        return True
    return unicodedata.category(ch).startswith("P")


def pre_tokenize(text: str) -> list[str]:
    """Lowercase, split on Unicode whitespace, and isolate punctuation characters."""
    words: list[str] = []
    for chunk in text.lower().split():
        cur = []
        for ch in chunk:
            if _is_punct(ch):
                if cur:
                    words.append("".join(cur))
                    cur = []
                words.append(ch)
            elif unicodedata.category(ch) not in ("Cc", "Cf"):
                cur.append(ch)
        if cur:
            words.append("".join(cur))
    return words


class Vocabulary:
    """Immutable token list; ids are line numbers of the vocabulary file."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise VocabError(f"vocabulary must start with {SPECIAL_TOKENS}")
        for i, tok in enumerate(tokens):
            if tok == "" or tok == "##" or any(c.isspace() for c in tok):
                raise VocabError(f"invalid token {tok!r} at id {i}")
        ids = {tok: i for i, tok in enumerate(tokens)}
        if len(ids) != len(tokens):
            dup = next(t for t, c in Counter(tokens).items() if c > 1)
            raise VocabError(f"duplicate token {dup!r}")
        self._tokens = tuple(tokens)
        self._ids = ids

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    @property
    def tokens(self) -> tuple[str, ...]:
        return self._tokens

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self._tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocabulary:
    """Grow a WordPiece vocabulary by repeatedly merging the most frequent adjacent pair.

    Words start as a first character plus ``##``-prefixed continuation
    characters. Each round counts adjacent symbol pairs over all words
    (weighted by word frequency), merges the most frequent one (ties broken
    by the lexicographically smallest pair) and adds the merged symbol.
    Training stops at ``target_size`` tokens or when no pair remains.
    """
    word_counts: Counter[str] = Counter()
    for doc in corpus:
        word_counts.update(w for w in pre_tokenize(doc) if len(w) <= MAX_CHARS_PER_WORD)
    if not word_counts:
        raise VocabError("cannot train a vocabulary on an empty corpus")

    alphabet: set[str] = set()
    splits: dict[str, list[str]] = {}
    for w in word_counts:
        symbols = [w[0]] + ["##" + c for c in w[1:]]
        splits[w] = symbols
        alphabet.update(symbols)
    n_chars = len({c for w in word_counts for c in w})
    if target_size < NUM_SPECIAL + n_chars:
        raise VocabError(
            f"target_size {target_size} is below {NUM_SPECIAL} specials + {n_chars} characters"
        )

    tokens = list(SPECIAL_TOKENS) + sorted(alphabet)
    known = set(tokens)
    words = sorted(word_counts)  # fixed iteration order
    while len(tokens) < target_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for w in words:
            sym = splits[w]
            c = word_counts[w]
            for a, b in zip(sym, sym[1:]):
                pairs[(a, b)] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = best[0] + best[1][2:]
        for w in words:
            sym = splits[w]
            if len(sym) < 2:
                continue
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == best[0] and sym[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            splits[w] = out
        if merged not in known:
            known.add(merged)
            tokens.append(merged)
    if len(tokens) < target_size:
        warnings.warn(
            f"corpus exhausted after {len(tokens)} tokens (target {target_size})", RuntimeWarning
        )
    return Vocabulary(tokens)


def _segment(vocab: Vocabulary, word: str) -> list[int]:
    if len(word) > MAX_CHARS_PER_WORD:
        return [UNK_ID]
    ids = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end] if start == 0 else "##" + word[start:end]
            if piece in vocab:
                found = vocab.id_of(piece)
                break
            end -= 1
        if found is None:
            return [UNK_ID]
        ids.append(found)
        start = end
    return ids


def tokenize(vocab: Vocabulary, text: str) -> list[int]:
    ids: list[int] = []
    for word in pre_tokenize(text):
        ids.extend(_segment(vocab, word))
    return ids


def decode(vocab: Vocabulary, ids: Iterable[int]) -> str:
    out: list[str] = []
    for i in ids:
        tok = vocab.token_of(i)
        if tok.startswith("##") and out:
            out[-1] += tok[2:]
        else:
            out.append(tok)
    return " ".join(out)


@dataclass
class EncodedSequence:
    token_ids: list[int]
    attention_mask: list[int]
    segment_ids: list[int]
    special_mask: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def num_real(self) -> int:
        return sum(self.attention_mask)


def build_sequence(ids_a: Sequence[int], ids_b: Sequence[int] | None, t_max: int,
                   pad: bool = True) -> EncodedSequence:
    """Lay out ``[CLS] a [SEP] (b [SEP])`` with longest-first truncation and padding."""
    if t_max < 8:
        raise ValueError(f"t_max must be at least 8, got {t_max}")
    a = list(ids_a)
    b = None if ids_b is None else list(ids_b)
    budget = t_max - (2 if b is None else 3)
    if b is None:
        del a[budget:]
    else:
        while len(a) + len(b) > budget:
            if len(a) >= len(b):
                a.pop()
            else:
                b.pop()
    token_ids = [CLS_ID] + a + [SEP_ID]
    segment_ids = [0] * len(token_ids)
    special = [1] + [0] * len(a) + [1]
    if b is not None:
        token_ids += b + [SEP_ID]
        segment_ids += [1] * (len(b) + 1)
        special += [0] * len(b) + [1]
    n = len(token_ids)
    attention = [1] * n
    if pad and n < t_max:
        extra = t_max - n
        token_ids += [PAD_ID] * extra
        attention += [0] * extra
        segment_ids += [0] * extra
        special += [1] * extra
    return EncodedSequence(token_ids, attention, segment_ids, special)


def encode_pair(vocab: Vocabulary, text_a: str, text_b: str | None = None,
                t_max: int = 768, pad: bool = True) -> EncodedSequence:
    return build_sequence(
        tokenize(vocab, text_a), None if text_b is None else tokenize(vocab, text_b), t_max, pad
    )
