import numpy as np
import pytest

from oilca.numkit import tensor as T


def numeric_grad(loss_fn, param, h=1e-5):
    """Central finite differences of a scalar ``loss_fn()`` w.r.t. every entry of ``param``."""
    grad = np.zeros_like(param.value)
    base = param.value.copy()
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        param.value = plus
        f_plus = loss_fn().item()
        param.value = minus
        f_minus = loss_fn().item()
        grad[idx] = (f_plus - f_minus) / (2 * h)
    param.value = base
    return grad


def check_gradients(loss_fn, params, tol=1e-4, max_entries=None):
    """Assert autodiff matches finite differences with relative error below ``tol``."""
    for p in params.values():
        p.grad = None
    T.backward(loss_fn())
    worst = 0.0
    for name, p in params.items():
        auto = p.grad if p.grad is not None else np.zeros_like(p.value)
        num = numeric_grad(loss_fn, p)
        rel = np.abs(auto - num) / (np.abs(auto) + 1e-8)
        worst = max(worst, float(rel.max()))
        assert rel.max() < tol, f"{name}: max relative error {rel.max():.3g}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion, echoed in the terminal summary."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
