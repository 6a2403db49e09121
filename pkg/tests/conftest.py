import numpy as np
import pytest

from fusiontransnet import tensor as T


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            up = f()
            a[idx] = old - h
            down = f()
            a[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b, floor=1e-8):
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor))) if a.size else 0.0


def check_grads(build, tensors, tol=1e-4, h=1e-5, floor=1e-6):
    """Compare autodiff gradients of the scalar ``build()`` with central differences.

    Entries where both gradients are below ``floor`` in magnitude are compared
    absolutely against ``floor`` so that exact zeros do not blow up the ratio.
    """
    for t in tensors:
        t.grad = None
    T.backward(build())
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(lambda: build().item(), [t.data for t in tensors], h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, rel_error(a, n, floor))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria append (label, passed, detail) here; printed after the run
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {label}: {detail}")
