import numpy as np
import pytest

from countlab import data_digits, nn


@pytest.fixture(scope="session")
def digit_bank(tmp_path_factory):
    """Small IDX digit bank shared by data/probe tests."""
    d = tmp_path_factory.mktemp("bank")
    data_digits.make_digit_idx(d, seed=0, variants=2)
    return data_digits.load_mnist(d / "train-images-idx3-ubyte",
                                  d / "train-labels-idx1-ubyte")


def small_net(seed=0, in_c=1, side=12, classes=3, with_lrn=True, with_pool=True):
    """A conv/relu/pool/lrn/fc stack small enough for exhaustive checks."""
    rng = np.random.default_rng(seed)
    layers = [nn.Conv(rng.normal(0, 0.3, (4, in_c, 3, 3)).astype(np.float32),
                      rng.normal(0, 0.05, 4).astype(np.float32), 1),
              nn.Relu()]
    out = side - 2
    if with_pool:
        layers.append(nn.MaxPool(2, 2))
        out = (out - 2) // 2 + 1
    if with_lrn:
        layers.append(nn.Lrn(3, 1e-4, 0.75, 1.0))
    layers.append(nn.Fc(rng.normal(0, 0.3, (classes, 4 * out * out)).astype(np.float32),
                        rng.normal(0, 0.05, classes).astype(np.float32)))
    return nn.NetworkParams(layers, classes)


@pytest.fixture
def tiny_net():
    return small_net()
