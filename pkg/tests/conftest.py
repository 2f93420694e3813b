import numpy as np
import pytest

from itt.model import ModelConfig
from itt.routing import RoutingPolicy
from itt.tensor import set_default_dtype


@pytest.fixture(autouse=True)
def _reset_dtype():
    """Each test starts and ends in the float32 default."""
    set_default_dtype("float32")
    yield
    set_default_dtype("float32")


@pytest.fixture
def f64():
    set_default_dtype("float64")
    yield
    set_default_dtype("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_layers=4, n_heads=2, mlp_hidden=24, max_seq_len=32)
    base.update(kw)
    return ModelConfig(**base)


def tiny_itt_config(steps: int = 3, **kw) -> ModelConfig:
    kw.setdefault("routing", RoutingPolicy(capacities=[0.5] * (steps - 1)))
    return tiny_config(variant="itt", thinking_steps=steps, **kw)
