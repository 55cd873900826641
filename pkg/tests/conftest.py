from pathlib import Path

import numpy as np
import pytest

from models import Activation, Layer, Mlp, PairedDataset
from services.net import forward, init_mlp


FIXTURES = Path(__file__).parent / 'fixtures'


def philox(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def random_mlp(seed: int, sizes=(2, 6, 5, 2), hidden=None) -> Mlp:
    return init_mlp(list(sizes), hidden or Activation.tanh(), seed)


def random_pair(seed: int, net: Mlp, n_source: int = 30, n_target: int = 20, shift: float = 0.1):
    """Noisy source data for `net` and a shifted, rescaled target domain."""
    rng = philox(seed)
    x = rng.uniform(-1.0, 1.0, size=(n_source, net.in_dim))
    y = forward(net, x) + 0.1 * rng.standard_normal((n_source, net.out_dim))
    xt = rng.uniform(-1.0, 1.0, size=(n_target, net.in_dim)) + shift
    yt = 1.3 * forward(net, xt) + 0.2 + 0.05 * rng.standard_normal((n_target, net.out_dim))
    return PairedDataset(x, y, 'source'), PairedDataset(xt, yt, 'target')


def linear_mlp(weight, bias=None) -> Mlp:
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.zeros(weight.shape[0]) if bias is None else bias
    return Mlp((Layer(weight, bias, Activation.identity()),))


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def rng() -> np.random.Generator:
    return philox(0)


@pytest.fixture
def tanh_net() -> Mlp:
    return random_mlp(11)


@pytest.fixture
def relu_net() -> Mlp:
    return init_mlp([2, 7, 6, 1], Activation.relu(), seed=5)


@pytest.fixture
def domain_pair(tanh_net):
    return random_pair(3, tanh_net)
