"""Shared helpers: central finite-difference gradient oracle."""

import numpy as np

from seqvcr.autodiff import Tape, Tensor, backward


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def autodiff_grad(f, x: np.ndarray) -> np.ndarray:
    """Gradient of scalar-valued f built from autodiff ops."""
    t = Tensor(x, requires_grad=True)
    with Tape() as tape:
        out = f(t)
    backward(tape, out)
    return t.grad


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom
