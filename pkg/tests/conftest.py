import numpy as np
import pytest
from hypothesis import settings

from tess import tensor as T
from tess.model import EncodedBatch, ModelConfig, build_model

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def toy_config(**kw) -> ModelConfig:
    base = dict(vocab_size=30, embed_dim=4, hidden_dim=8, layers=2, heads=2, ffn_dim=12,
                max_positions=16, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, vocab_size, batch=2, length=6, pad_tail=(0, 2)) -> EncodedBatch:
    ids = rng.integers(5, vocab_size, size=(batch, length))
    ids[:, 0] = 2
    att = np.ones_like(ids)
    for i, n in enumerate(pad_tail[:batch]):
        if n:
            att[i, -n:] = 0
            ids[i, -n:] = 0
    return EncodedBatch(ids, att, np.zeros_like(ids))


@pytest.fixture
def float64():
    with T.default_dtype(np.float64):
        yield


@pytest.fixture
def toy_model():
    return build_model(toy_config(), seed=0)
