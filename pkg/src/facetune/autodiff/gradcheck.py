"""Central finite-difference gradient checks."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn, arrays, h: float = 1e-5):
    """Central differences of scalar ``fn(*arrays)`` with respect to each float64 array."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = float(fn(*arrays))
            a[i] = old - h
            fm = float(fn(*arrays))
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-8)
    return float(np.abs(a - b).max(initial=0) / scale)


def check_gradients(fn, arrays, h: float = 1e-5):
    """Compare tape gradients of ``fn`` (tensors in, scalar tensor out) to central
    differences. Returns the worst relative error over all inputs."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*tensors))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def scalar(*arrs):
        with no_grad():
            return fn(*[Tensor(a) for a in arrs]).item()

    numeric = numerical_grad(scalar, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
