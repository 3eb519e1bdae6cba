import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vert.diffcore import mlp

settings.register_profile("vert", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("vert")

# criterion number -> (passed, description, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num:2d}: {desc} | {detail}")


def linear_model(weights, input_shape, bias=None):
    """Single affine layer whose logits are ``flatten(x) @ weights + bias``."""
    weights = np.asarray(weights, dtype=np.float64)
    model = mlp(input_shape, (), weights.shape[1])
    model.layers[-1].W.data = weights.copy()
    if bias is not None:
        model.layers[-1].b.data = np.asarray(bias, dtype=np.float64)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
