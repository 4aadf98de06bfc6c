import numpy as np
import pytest

from robust_smoothing.experiments import ct_bearings_model, random_affine_model, simulate
from robust_smoothing.iterative_smoothers import initial_estimate


def central_jacobian(fn, x, h=1e-6):
    """Column-by-column central differences for maps that do not broadcast."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * (1.0 + abs(x[j]))
        cols.append((np.asarray(fn(x + e)) - np.asarray(fn(x - e))) / (2 * e[j]))
    return np.stack(cols, axis=-1)


def rel_err(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture(scope="session")
def ct_small():
    """CT bearings model with K=10, its seed-0 data and the EKS start."""
    model = ct_bearings_model(horizon=10)
    X, y = simulate(model, 0)
    return model, X, y, initial_estimate(model, y)


@pytest.fixture(scope="session")
def linear_case():
    rng = np.random.default_rng(7)
    model = random_affine_model(rng, horizon=50, state_dim=4, meas_dim=2)
    X, y = simulate(model, 3)
    return model, X, y


_CRITERIA = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
