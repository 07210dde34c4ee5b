"""Matrix-free Krylov solvers: CG for PSD operators and CG on the normal equations.

Operators act on arrays of any shape.  When ``batched=True`` the leading
axis indexes independent systems (a block-diagonal operator); step sizes
and convergence are then tracked per row, which is equivalent to running
one CG per block while sharing operator applications.
"""

from __future__ import annotations

import warnings
from collections.abc import Callable
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class KrylovDivergence(ArithmeticError):
    pass


class KrylovWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class LinearOperator:
    dim: int
    apply: Callable
    apply_transpose: Callable | None = None

    @classmethod
    def from_matrix(cls, A):
        A = np.asarray(A, dtype=np.float64)
        return cls(A.shape[0], lambda v: A @ v, lambda v: A.T @ v)


@dataclass(frozen=True)
class KrylovConfig:
    tol: float = 1e-10
    max_iter: int | None = None
    eps: float = 0.0
    # keep residuals mutually orthogonal so termination within dim steps survives rounding
    reorthogonalize: bool = True

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")


class KrylovResult(NamedTuple):
    x: np.ndarray
    iters: int
    residual: float
    converged: bool
    indefinite: bool = False


def _dots(a, b, batched):
    if batched:
        return np.sum((a * b).reshape(a.shape[0], -1), axis=1)
    return np.array(np.vdot(a, b))


def _bcast(s, like, batched):
    return s.reshape((-1,) + (1,) * (like.ndim - 1)) if batched else s


def _check_finite(*arrs):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise KrylovDivergence("non-finite value in Krylov iteration")


def cg_solve(op: LinearOperator, b, cfg: KrylovConfig = KrylovConfig(), batched=False, callback=None, warn=True):
    """Solve ``(op + eps I) x = b`` for symmetric PSD ``op``, starting at ``x = 0``.

    One ``op.apply`` per iteration.  Stops once ``||r|| <= tol ||b||`` (per row
    when batched).  If the budget runs out, or a search direction with
    non-positive curvature shows up (``indefinite=True``), the best iterate
    seen is returned with ``converged=False`` and a :class:`KrylovWarning`.
    """
    b = np.asarray(b, dtype=np.float64)
    _check_finite(b)
    max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * max(op.dim, 1)
    x = np.zeros_like(b)
    bnorm = np.sqrt(_dots(b, b, batched))
    if np.all(bnorm == 0):
        return KrylovResult(x, 0, 0.0, True)
    thresh = cfg.tol * bnorm
    r = b.copy()
    p = r.copy()
    rr = _dots(r, r, batched)
    active = np.sqrt(rr) > thresh
    best_x, best_res = x.copy(), float(np.max(np.sqrt(rr) / np.where(bnorm > 0, bnorm, 1.0)))
    indefinite = False
    basis = []
    basis_cap = r[0].size if batched else r.size
    if cfg.reorthogonalize:
        basis.append(r / _bcast(np.where(rr > 0, np.sqrt(rr), 1.0), r, batched))
    k = 0
    while np.any(active) and k < max_iter:
        Ap = op.apply(p)
        if cfg.eps:
            Ap = Ap + cfg.eps * p
        _check_finite(Ap)
        pAp = _dots(p, Ap, batched)
        # rows with exhausted or negative curvature stop moving
        ok = active & (pAp > 0)
        indefinite = indefinite or bool(np.any(active & ~ok))
        alpha = np.where(ok, rr / np.where(ok, pAp, 1.0), 0.0)
        x = x + _bcast(alpha, x, batched) * p
        r = r - _bcast(alpha, r, batched) * Ap
        if basis:
            for q in basis:
                r = r - _bcast(_dots(q, r, batched), r, batched) * q
        rr_new = _dots(r, r, batched)
        if basis and len(basis) < basis_cap:
            basis.append(r / _bcast(np.where(rr_new > 0, np.sqrt(rr_new), 1.0), r, batched))
        beta = np.where(ok, rr_new / np.where(rr > 0, rr, 1.0), 0.0)
        p = r + _bcast(beta, p, batched) * p
        rr = np.where(ok, rr_new, rr)
        active = ok & (np.sqrt(rr) > thresh)
        k += 1
        rel = float(np.max(np.sqrt(rr) / np.where(bnorm > 0, bnorm, 1.0)))
        _check_finite(x)
        if rel <= best_res:
            best_x, best_res = x, rel
        if callback is not None:
            callback(k, x)
        if not np.any(ok):
            break
    converged = not np.any(np.sqrt(rr) > thresh)
    if not converged:
        if warn:
            why = " (non-positive curvature)" if indefinite else ""
            warnings.warn(
                f"CG stopped after {k} iterations at relative residual {best_res:.2e}{why}",
                KrylovWarning,
                stacklevel=2,
            )
        return KrylovResult(best_x, k, best_res, False, indefinite)
    return KrylovResult(x, k, float(np.max(np.sqrt(rr) / np.where(bnorm > 0, bnorm, 1.0))), True)


def cgnr_solve(op: LinearOperator, b, cfg: KrylovConfig = KrylovConfig(), batched=False):
    """Least-squares solve of ``op x = b`` via CG on ``(op^T op + eps I) x = op^T b``.

    Two operator applications per iteration.  ``op.apply`` is used for the
    transpose when ``apply_transpose`` is absent (self-adjoint operators,
    such as the Hessian of a scalar).
    """
    At = op.apply_transpose or op.apply
    b = np.asarray(b, dtype=np.float64)
    _check_finite(b)
    max_iter = cfg.max_iter if cfg.max_iter is not None else 10 * max(op.dim, 1)
    x = np.zeros_like(b)
    bnorm = np.sqrt(_dots(b, b, batched))
    if np.all(bnorm == 0):
        return KrylovResult(x, 0, 0.0, True)
    r = b.copy()
    s = At(r)
    snorm0 = np.sqrt(_dots(s, s, batched))
    safe_b = np.where(bnorm > 0, bnorm, 1.0)
    safe_s = np.where(snorm0 > 0, snorm0, 1.0)
    p = s.copy()
    gamma = _dots(s, s, batched)

    def done(r, gamma):
        # consistent systems: small residual; inconsistent: small normal residual
        return (np.sqrt(_dots(r, r, batched)) <= cfg.tol * bnorm) | (
            np.sqrt(gamma) <= cfg.tol * snorm0
        )

    active = ~done(r, gamma)
    k = 0
    while np.any(active) and k < max_iter:
        q = op.apply(p)
        _check_finite(q)
        delta = _dots(q, q, batched) + cfg.eps * _dots(p, p, batched)
        ok = active & (delta > 0)
        alpha = np.where(ok, gamma / np.where(ok, delta, 1.0), 0.0)
        x = x + _bcast(alpha, x, batched) * p
        r = r - _bcast(alpha, r, batched) * q
        s = At(r) - cfg.eps * x
        _check_finite(x, s)
        gamma_new = _dots(s, s, batched)
        beta = np.where(ok, gamma_new / np.where(gamma > 0, gamma, 1.0), 0.0)
        p = s + _bcast(beta, p, batched) * p
        gamma = np.where(ok, gamma_new, gamma)
        active = ok & ~done(r, gamma)
        k += 1
        if not np.any(ok):
            break
    res = float(np.max(np.minimum(np.sqrt(_dots(r, r, batched)) / safe_b, np.sqrt(gamma) / safe_s)))
    converged = bool(np.all(done(r, gamma)))
    if not converged:
        warnings.warn(f"CGNR stopped after {k} iterations (residual {res:.2e})", KrylovWarning, stacklevel=2)
    return KrylovResult(x, k, res, converged)
