"""Differentiable implicit layers.

A layer's output is ``y = argmin_u f(u; x, theta)``.  The forward pass
runs any solver.  The backward pass only needs second-order products of
``f`` at ``y``:

    dL/dx = -g^T d2f/dx du + dL/dx|partial,   with (H + eps I) g = dL/dy

where ``H`` is the Hessian of ``f`` in ``u``.  ``g`` comes from conjugate
gradients driven by Hessian-vector products (``backward_mode="cg"``) or
from an explicitly assembled, densely solved Hessian (``"naive"``).
"""

from __future__ import annotations

import warnings
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from .core import ad
from .core.autodiff import Var, gradients
from .core.linalg import dense_solve
from .krylov import KrylovConfig, KrylovWarning, LinearOperator, cg_solve, cgnr_solve


class StationarityError(RuntimeError):
    """The forward solution is too far from stationary for the IFT to apply."""


class SolverDivergence(RuntimeError):
    pass


ScoreFunction = Callable  # f(u, x, theta) -> scalar, built from ``ad`` ops
ArgminSolver = Callable  # solver(score, x, theta, u_init) -> u


@dataclass(frozen=True)
class DilLayer:
    """Score function + blackbox solver + backward configuration.

    ``batched=True`` declares that ``u`` has shape ``(B, d)`` and the rows
    are independent problems whose scores are summed, so the Hessian is
    block diagonal.  CG then runs per block and the naive mode assembles
    the ``d x d`` blocks with ``d`` probes instead of ``B * d``.
    """

    score: ScoreFunction
    solver: ArgminSolver | None = None
    backward_mode: str = "cg"
    krylov: KrylovConfig = field(default_factory=lambda: KrylovConfig(eps=1e-6))
    stationarity_tol: float = 1e-7
    gate_factor: float = 1e3
    batched: bool = False

    def __post_init__(self):
        if self.backward_mode not in ("cg", "naive"):
            raise ValueError(f"unknown backward mode {self.backward_mode!r}")


def _leaf(v):
    return None if v is None else Var(np.array(v, dtype=np.float64))


def stationarity(layer: DilLayer, y, x, theta):
    u = Var(np.array(y, dtype=np.float64))
    f = layer.score(u, x, theta)
    g = gradients(f, u)
    return float(np.max(np.abs(g))) if g.size else 0.0


def dil_forward(layer: DilLayer, x, theta, u_init):
    """Solve the argmin with the layer's solver; report ``||df/du(y)||_inf``."""
    if layer.solver is None:
        raise ValueError("layer has no solver")
    y = np.asarray(layer.solver(layer.score, x, theta, np.array(u_init, dtype=np.float64)))
    return y, stationarity(layer, y, x, theta)


class _Linearization:
    """Second-order information of ``f`` at a fixed ``(y, x, theta)``."""

    def __init__(self, layer, y, x, theta):
        self.layer = layer
        self.u = Var(np.array(y, dtype=np.float64))
        self.x = _leaf(x)
        self.theta = _leaf(theta)
        f = layer.score(self.u, self.x, self.theta)
        self.g1 = gradients(f, self.u, create_graph=True)
        g1v = ad.value_of(self.g1)
        self.stationarity = float(np.max(np.abs(g1v))) if np.size(g1v) else 0.0

    def check_gate(self, where=""):
        limit = self.layer.gate_factor * self.layer.stationarity_tol
        if not self.stationarity <= limit:
            raise StationarityError(
                f"{where}stationarity {self.stationarity:.3e} exceeds {limit:.3e}; "
                "the forward solution is not an accepted argmin"
            )

    def hvp(self, p):
        return gradients(self.g1, self.u, cotangent=p)

    def cross(self, g):
        """``(g^T d2f/dx du, g^T d2f/dtheta du)``."""
        targets = [t for t in (self.x, self.theta) if t is not None]
        res = gradients(self.g1, targets, cotangent=g) if targets else []
        out = []
        for t in (self.x, self.theta):
            out.append(res.pop(0) if t is not None else None)
        return tuple(out)

    def hessian(self):
        """Dense Hessian, or the stack of ``d x d`` blocks when batched."""
        shape = self.u.shape
        if self.layer.batched:
            B, d = shape
            blocks = np.empty((B, d, d))
            for j in range(d):
                e = np.zeros(shape)
                e[:, j] = 1.0
                blocks[:, :, j] = self.hvp(e)
            return blocks
        n = int(np.prod(shape))
        H = np.empty((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            H[:, j] = self.hvp(e.reshape(shape)).reshape(-1)
        return H


def _finish(lin, g, dLdx_partial, dLdtheta_partial):
    cx, ct = lin.cross(g)
    dLdx = None if cx is None else -cx + (0.0 if dLdx_partial is None else dLdx_partial)
    dLdt = None if ct is None else -ct + (0.0 if dLdtheta_partial is None else dLdtheta_partial)
    return dLdx, dLdt


def _solve_cg(lin, dLdy):
    layer = lin.layer
    op = LinearOperator(int(np.size(dLdy)), lin.hvp)
    res = cg_solve(op, dLdy, layer.krylov, batched=layer.batched, warn=False)
    if res.indefinite:
        # off the argmin the Hessian may be indefinite; CG on H^2 still applies
        res = cgnr_solve(op, dLdy, layer.krylov, batched=layer.batched)
    elif not res.converged:
        warnings.warn(f"CG stopped after {res.iters} iterations at relative residual {res.residual:.2e}", KrylovWarning, stacklevel=3)
    return res.x


def _solve_naive(lin, dLdy):
    layer = lin.layer
    eps = layer.krylov.eps
    H = lin.hessian()
    if layer.batched:
        d = H.shape[-1]
        g = np.empty_like(dLdy)
        for b in range(H.shape[0]):
            g[b] = dense_solve(H[b] + eps * np.eye(d), dLdy[b])
        return g
    n = H.shape[0]
    return dense_solve(H + eps * np.eye(n), dLdy.reshape(-1)).reshape(dLdy.shape)


def dil_backward(layer: DilLayer, y, x, theta, dLdy, dLdx_partial=None, dLdtheta_partial=None, mode=None):
    """Gradients ``(dL/dx, dL/dtheta)`` of a downstream loss through the argmin.

    ``x`` or ``theta`` may be ``None``, in which case the corresponding
    gradient is ``None``.  ``mode`` overrides ``layer.backward_mode``.
    """
    dLdy = np.asarray(dLdy, dtype=np.float64)
    if dLdy.shape != np.shape(y):
        raise ValueError(f"dLdy shape {dLdy.shape} != y shape {np.shape(y)}")
    lin = _Linearization(layer, y, x, theta)
    lin.check_gate()
    mode = mode or layer.backward_mode
    if mode == "cg":
        g = _solve_cg(lin, dLdy)
    elif mode == "naive":
        g = _solve_naive(lin, dLdy)
    else:
        raise ValueError(f"unknown backward mode {mode!r}")
    return _finish(lin, g, dLdx_partial, dLdtheta_partial)


def dil_backward_naive(layer: DilLayer, y, x, theta, dLdy, dLdx_partial=None, dLdtheta_partial=None):
    """Backward pass through an explicitly built and densely solved Hessian."""
    return dil_backward(layer, y, x, theta, dLdy, dLdx_partial, dLdtheta_partial, mode="naive")


def ift_jacobian(layer: DilLayer, y, x, theta, wrt="x"):
    """Full ``dy/dx`` (or ``dy/dtheta``) assembled from naive backward passes."""
    y = np.asarray(y, dtype=np.float64)
    rows = []
    for i in range(y.size):
        e = np.zeros(y.size)
        e[i] = 1.0
        dx, dt = dil_backward_naive(layer, y, x, theta, e.reshape(y.shape))
        rows.append((dx if wrt == "x" else dt).reshape(-1))
    return np.array(rows)


def gradient_descent_solver(score, x, theta, u_init, lr=0.1, steps=10_000, stationarity_tol=1e-10):
    """Plain gradient descent on ``score`` in ``u``; usable as an argmin solver
    via ``functools.partial``.

    Stops when ``||df/du||_inf <= stationarity_tol`` or after ``steps``.
    Raises :class:`SolverDivergence` once the score rises more than
    ``10 * max(|f0|, 1)`` above its initial value ``f0``.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    u = np.array(u_init, dtype=np.float64)
    f0 = None
    for _ in range(steps):
        uv = Var(u)
        f = score(uv, x, theta)
        fval = float(ad.value_of(f))
        if f0 is None:
            f0 = fval
        if not np.isfinite(fval) or fval > f0 + 10.0 * max(abs(f0), 1.0):
            raise SolverDivergence(f"score grew from {f0:.3e} to {fval:.3e}")
        g = gradients(f, uv)
        if np.max(np.abs(g), initial=0.0) <= stationarity_tol:
            break
        u = u - lr * g
    return u
