import numpy as np
import pytest

from insnet.model import InsNet, InsNetConfig


def tiny(**kw) -> InsNetConfig:
    base = dict(vocab_size=12, d_model=16, n_layers=2, n_heads=2, d_ff=32, dropout_p=0.0, max_len=24, precision="float64")
    base.update(kw)
    return InsNetConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return InsNet(tiny(), seed=7)
