"""Dense linear solves and finite-difference gradients."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence

import numpy as np


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def dense_solve(A, b):
    """Solve ``A x = b`` by Gaussian elimination with partial pivoting.

    Raises :class:`SingularMatrixError` when a pivot falls below
    ``1e-12 * ||A||_inf``.
    """
    A = np.array(A, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    n = A.shape[0]
    if b.shape[0] != n:
        raise ValueError(f"b has length {b.shape[0]}, expected {n}")
    scale = np.abs(A).sum(axis=1).max() if n else 0.0
    thresh = 1e-12 * scale
    M = np.concatenate([A, b.reshape(n, -1)], axis=1)
    for k in range(n):
        p = k + int(np.argmax(np.abs(M[k:, k])))
        if abs(M[p, k]) <= thresh or scale == 0.0:
            raise SingularMatrixError(f"pivot {M[p, k]:.3e} at column {k} below {thresh:.3e}")
        if p != k:
            M[[k, p]] = M[[p, k]]
        M[k + 1 :] -= np.outer(M[k + 1 :, k] / M[k, k], M[k])
    x = np.empty((n, M.shape[1] - n))
    for k in range(n - 1, -1, -1):
        x[k] = (M[k, n:] - M[k, k + 1 : n] @ x[k + 1 :]) / M[k, k]
    return x.reshape(b.shape)


def finite_diff_gradient(func: Callable, inputs: Sequence | Mapping, wrt=0, step=1e-5):
    """Central-difference gradient of a scalar ``func`` in one input slot."""
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(inputs, Mapping):
        args = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
        if wrt not in args:
            raise KeyError(f"unknown slot {wrt!r}")
        call = lambda: func(**args)  # noqa: E731
    else:
        args = [np.array(v, dtype=np.float64) for v in inputs]
        if isinstance(wrt, str) or not (-len(args) <= wrt < len(args)):
            raise KeyError(f"unknown slot {wrt!r}")
        call = lambda: func(*args)  # noqa: E731
    x = args[wrt]
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(np.asarray(call()))
        flat[i] = orig - step
        fm = float(np.asarray(call()))
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)
