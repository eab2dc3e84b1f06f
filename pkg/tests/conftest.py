import numpy as np
import pytest

from glyphforge import autodiff as ad
from glyphforge.trainer import TrainConfig, train


@pytest.fixture(autouse=True)
def _float64():
    ad.set_default_dtype("float64")
    ad.set_debug(False)
    yield
    ad.set_default_dtype("float64")
    ad.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SMALL = TrainConfig(n=4, steps=300, canvas=32, val_every=100, val_samples=256, seed=3)


@pytest.fixture(scope="session")
def small_ckpt():
    """A quickly trained N=4 model on a 32x32 canvas."""
    return train(SMALL)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import VERDICTS
    except ImportError:
        return
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[key])
