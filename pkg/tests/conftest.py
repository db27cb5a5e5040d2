import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled in by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "spec_example: a worked example from the module contracts")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_spd(rng, n=None, lo=1e-4, hi=3e-3):
    """Random SPD tensors in component form with eigenvalues in [lo, hi]."""
    from patchdti import tensor_core

    shape = () if n is None else (n,)
    lam = rng.uniform(lo, hi, size=shape + (3,))
    rots = np.array([random_rotation(rng) for _ in range(int(np.prod(shape)) or 1)]).reshape(shape + (3, 3))
    return tensor_core.from_matrix(rots @ (lam[..., :, None] * np.swapaxes(rots, -1, -2)))


@st.composite
def spd_tensors(draw, lo=1e-4, hi=3e-3):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_spd(np.random.default_rng(seed), lo=lo, hi=hi)


@st.composite
def unit_vectors(draw):
    v = draw(st.lists(st.floats(-1, 1), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1))
    v = np.array(v)
    return v / np.linalg.norm(v)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
