import numpy as np
import pytest

from nrnm import diffcore as dc
from nrnm.config import ModelConfig


@pytest.fixture(autouse=True)
def _float64():
    dc.set_precision(64)
    yield
    dc.set_precision(64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    """The small verification configuration used for gradient checks."""
    base = dict(num_layers=2, hidden=4, input_dim=3, memory_dim=4, k=4, stride_set=(1, 2), l=2,
                win=2, heads=2, dropout=0.0, zoneout=0.0, num_classes=3, memory_layer=1)
    base.update(kw)
    return ModelConfig(**base)


def numpy_params(ps):
    return {k: v.value.copy() for k, v in ps.items()}


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
