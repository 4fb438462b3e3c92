"""Central finite-difference gradient checking."""

import numpy as np

from .autodiff import Tape, Tensor


def numerical_grads(fn, arrays, h=1e-5):
    """Central differences of the scalar ``fn(*tensors)`` w.r.t. each array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(fn(*[Tensor(x) for x in arrays]).data)
            flat[j] = orig - h
            fm = float(fn(*[Tensor(x) for x in arrays]).data)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def tape_grads(fn, arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*ts)
        tape.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def relative_error(a, b, floor=1e-10):
    """Norm-wise relative error, floored so all-zero gradients compare cleanly."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(fn, arrays, h=1e-5):
    """Largest relative error between tape and finite-difference gradients."""
    analytic = tape_grads(fn, arrays)
    numeric = numerical_grads(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
