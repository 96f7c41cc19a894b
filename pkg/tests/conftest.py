import numpy as np
import pytest

from pcbdet.tensor import Tensor


def fd_grad(f, x0: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat array."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x0)
        flat[i] = orig - eps
        lo = f(x0)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def analytic_grad(op, x0: np.ndarray):
    """Gradient of sum(op(x)) via the tape."""
    t = Tensor(x0.copy(), requires_grad=True)
    out = op(t)
    out.sum().backward()
    return t.grad


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(np.abs(a) + np.abs(b), 1.0)
    return float(np.max(np.abs(a - b) / scale))


def check_grad(op, x0: np.ndarray, tol: float = 1e-5) -> float:
    got = analytic_grad(op, x0)

    def scalar(x):
        return float(op(Tensor(x)).sum().data)

    want = fd_grad(scalar, x0.copy())
    err = max_rel_err(got, want)
    assert err <= tol, f"gradient mismatch: rel err {err}"
    return err


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
