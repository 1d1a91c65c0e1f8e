import numpy as np
import pytest

from conceptsplit import tensor as T
from conceptsplit.model import DenoiserModel, ModelConfig


@pytest.fixture(autouse=True)
def _restore_mode():
    before = T.get_mode()
    yield
    T.set_mode(before)


@pytest.fixture
def verify():
    T.set_mode("verify")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw):
    base = dict(height=4, width=4, dim=16, text_dim=8, attn_dim=8, value_dim=8, heads=2,
                blocks=2, max_len=12, train_timesteps=20)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model(verify):
    return DenoiserModel(tiny_config())


@pytest.fixture
def small_model(verify):
    """2-block model at 8x8, default widths."""
    return DenoiserModel(ModelConfig(height=8, width=8, blocks=2))
