import numpy as np
import pytest

from qisa_lab.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def finite_diff(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def grad_of(build_loss, x0: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of build_loss(Tensor) plus its finite-diff estimate."""
    t = Tensor(x0.copy(), requires_grad=True)
    loss = build_loss(t)
    loss.backward()
    numeric = finite_diff(lambda arr: build_loss(Tensor(arr)).item(), x0.copy())
    return t.grad, numeric


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / denom)
