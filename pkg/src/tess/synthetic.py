"""Seeded synthetic corpora and classification tasks for desk-scale experiments."""
from __future__ import annotations

import itertools
from pathlib import Path

import numpy as np

from .data_io import ClassificationExample

LETTERS = "abcdefghij"


def word_list(n_words: int, seed: int = 0) -> list[str]:
    """``n_words`` distinct lowercase 2-3 letter words over a ten-letter alphabet."""
    pool = ["".join(p) for k in (2, 3) for p in itertools.product(LETTERS, repeat=k)]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(pool), size=n_words, replace=False)
    return [pool[i] for i in sorted(pick)]


def topic_corpus(n_docs: int = 240, n_topics: int = 12, words_per_topic: int = 5,
                 doc_len: tuple[int, int] = (30, 60), seed: int = 0) -> list[str]:
    """Documents that each draw words from one topic's small word set.

    Context identifies the topic, so masked words are predictable well
    below the unigram rate; ``n_topics * words_per_topic`` distinct words.
    """
    rng = np.random.default_rng(seed)
    words = word_list(n_topics * words_per_topic, seed)
    order = rng.permutation(len(words))
    topics = [[words[i] for i in order[t::n_topics]] for t in range(n_topics)]
    docs = []
    for _ in range(n_docs):
        topic = topics[int(rng.integers(n_topics))]
        length = int(rng.integers(doc_len[0], doc_len[1] + 1))
        out = [topic[int(i)] for i in rng.integers(len(topic), size=length)]
        for i in range(11, length, 12):
            out[i] += "."
        docs.append(" ".join(out))
    return docs


def write_corpus(docs: list[str], directory: str | Path, per_file: int = 50) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(0, len(docs), per_file):
        (d / f"part_{k // per_file:04d}.txt").write_text("\n\n".join(docs[k:k + per_file]) + "\n",
                                                         encoding="utf-8")
    return d


def separable_task(n: int, seed: int = 0, n_words: int = 40, length: tuple[int, int] = (6, 12),
                   positive_rate: float = 0.4, pairs: bool = False) -> list[ClassificationExample]:
    """Binary task: positives contain one of a few cue words, negatives never do."""
    rng = np.random.default_rng(seed)
    words = word_list(n_words, seed=1234)
    cues, noise = words[:4], words[4:]
    out = []
    for _ in range(n):
        k = int(rng.integers(length[0], length[1] + 1))
        toks = [noise[int(i)] for i in rng.integers(len(noise), size=k)]
        label = int(rng.random() < positive_rate)
        if label:
            toks[int(rng.integers(k))] = cues[int(rng.integers(len(cues)))]
        text_b = None
        if pairs:
            text_b = " ".join(noise[int(i)] for i in rng.integers(len(noise), size=4))
        out.append(ClassificationExample(" ".join(toks), text_b, label))
    return out


def task_corpus(examples: list[ClassificationExample]) -> list[str]:
    return [ex.text_a if ex.text_b is None else ex.text_a + " " + ex.text_b for ex in examples]
