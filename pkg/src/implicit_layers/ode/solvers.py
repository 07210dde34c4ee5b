"""Explicit, implicit and adaptive integrators for ``dx/dt = h(x; theta)``.

Dynamics ``h(x, theta)`` are written with :mod:`implicit_layers.core.ad`
operations so the same function serves plain evaluation and automatic
differentiation.  ``x`` is either a single state ``(D,)`` or a batch
``(B, D)`` of independent states.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..core import ad
from ..core.autodiff import Var, gradients, value_of
from ..krylov import KrylovConfig, LinearOperator, cgnr_solve


class NonConvergenceError(RuntimeError):
    pass


class StiffnessError(RuntimeError):
    pass


class NonFiniteStateError(ArithmeticError):
    pass


@dataclass(frozen=True)
class StepConfig:
    dt: float
    inner: str = "newton"
    inner_tol: float = 1e-9
    inner_max_iter: int = 100
    krylov: KrylovConfig = field(default_factory=lambda: KrylovConfig(eps=1e-8))

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.inner not in ("fixed_point", "newton"):
            raise ValueError(f"unknown inner solver {self.inner!r}")


@dataclass(frozen=True)
class Dopri5Config:
    rtol: float = 1e-6
    atol: float = 1e-6
    initial_dt: float | None = None
    max_dt: float = np.inf
    safety: float = 0.9
    min_dt: float = 1e-12
    max_steps: int = 100_000

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError("rtol and atol must be positive")


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if len(self.times) != len(self.states):
            raise ValueError("times and states differ in length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def __len__(self):
        return len(self.times)


def _eval(h, x, theta):
    return value_of(h(x, theta))


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteStateError(f"non-finite state in {what}")
    return x


def forward_euler_step(h, theta, x_t, dt):
    x_t = np.asarray(x_t, dtype=np.float64)
    return _finite(x_t + _eval(h, x_t, theta) * dt, "forward Euler step")


def be_residual(x_next, x_t, h, theta, dt):
    """``||x_next - x_t - h(x_next) dt||^2`` summed over all rows."""
    return ad.sqnorm(x_next - x_t - h(x_next, theta) * dt)


def _row_norms(v):
    v = np.asarray(v)
    return np.sqrt(np.sum(v * v, axis=-1)) if v.ndim > 1 else np.array([np.linalg.norm(v)])


def step_residuals(h, theta, x_t, x_next, dt):
    """Per-row residual norms ``||x_next - x_t - h(x_next) dt||``."""
    return _row_norms(x_next - x_t - _eval(h, x_next, theta) * dt)


def fixed_point_solve(h, theta, x_t, cfg: StepConfig):
    """Iterate ``x <- x_t + h(x) dt`` from ``x_t``; returns ``(x, iters)``.

    The gap ``x_t + h(x) dt - x`` is exactly the step residual of ``x``, so
    the returned iterate is the first whose residual norm (per row) is
    within ``inner_tol``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    x = x_t
    gap0 = None
    for it in range(1, cfg.inner_max_iter + 1):
        x_new = _finite(x_t + _eval(h, x, theta) * cfg.dt, "fixed-point iteration")
        gap = float(np.max(_row_norms(x_new - x)))
        if gap <= cfg.inner_tol:
            return x, it
        if gap0 is None:
            gap0 = gap
        elif gap > 2.0 * gap0:
            raise NonConvergenceError(f"fixed-point iteration diverging (gap {gap:.3e} at iteration {it})")
        x = x_new
    raise NonConvergenceError(f"fixed-point iteration did not converge in {cfg.inner_max_iter} iterations")


def newton_solve(h, theta, x_t, cfg: StepConfig):
    """Newton iteration on the squared step residual; returns ``(x, iters)``.

    Each update solves ``H_r g = dr/dx`` with CG on the normal equations,
    using Hessian-vector products of the residual (two per CG iteration).
    Starts from the forward-Euler predictor and always takes at least one
    update: below ``inner_tol`` the predictor would otherwise be accepted as
    is, and it is the explicit step, unstable on stiff problems.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    batched = x_t.ndim == 2
    x = x_t + _eval(h, x_t, theta) * cfg.dt
    for it in range(cfg.inner_max_iter + 1):
        _finite(x, "Newton iteration")
        u = Var(x)
        R = u - x_t - h(u, theta) * cfg.dt
        g1 = gradients(ad.sqnorm(R), u, create_graph=True)
        grad = value_of(g1)
        if it and np.max(np.abs(grad), initial=0.0) <= cfg.inner_tol and np.max(_row_norms(R.value)) <= cfg.inner_tol:
            return x, it
        if it == cfg.inner_max_iter:
            break
        op = LinearOperator(x.size, lambda p: gradients(g1, u, cotangent=p))
        step = cgnr_solve(op, grad, cfg.krylov, batched=batched).x
        x = x - step
    raise NonConvergenceError(f"Newton iteration did not converge in {cfg.inner_max_iter} iterations")


def backward_euler_step(h, theta, x_t, cfg: StepConfig):
    """One implicit Euler step ``x' = x_t + h(x') dt``."""
    solve = fixed_point_solve if cfg.inner == "fixed_point" else newton_solve
    x, _ = solve(h, theta, x_t, cfg)
    return x


# ---------------------------------------------------------------- DOPRI5

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# continuous extension: y(t0 + s h) = y0 + h * sum_j K_j * (P[j] @ [s, s^2, s^3, s^4])
_P = np.array(
    [
        [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0, 0, 0, 0],
        [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)


def _rms(v):
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def _initial_step(f, t0, x0, f0, cfg, span):
    scale = cfg.atol + cfg.rtol * np.abs(x0)
    d0, d1 = _rms(x0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = f(x0 + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span, cfg.max_dt)


def dopri5_integrate(h, theta, x0, t0, t1, cfg: Dopri5Config = Dopri5Config(), t_eval=None):
    """Dormand-Prince 5(4) with per-step accept/reject and 4th-order dense output.

    Returns the solution at ``t_eval`` (default: the accepted step times).
    ``info`` holds ``nfev``, ``n_accepted`` and ``n_rejected``.
    """
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    x = np.array(x0, dtype=np.float64)
    nfev = [0]

    def f(y):
        nfev[0] += 1
        return _eval(h, y, theta)

    t = float(t0)
    k0 = f(x)
    dt = cfg.initial_dt if cfg.initial_dt is not None else _initial_step(f, t, x, k0, cfg, t1 - t0)
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=np.float64)
        out_t, out_x = list(t_eval), [None] * len(t_eval)
        nxt = 0
        while nxt < len(t_eval) and t_eval[nxt] <= t:
            out_x[nxt] = x.copy()
            nxt += 1
    else:
        out_t, out_x = [t], [x.copy()]
    n_acc = n_rej = 0
    K = np.empty((7,) + x.shape)
    while t < t1:
        if n_acc + n_rej >= cfg.max_steps:
            raise StiffnessError(f"DOPRI5 exceeded {cfg.max_steps} steps at t={t:.6g}")
        dt = min(dt, cfg.max_dt, t1 - t)
        K[0] = k0
        for i in range(1, 7):
            K[i] = f(x + dt * np.tensordot(_A[i], K[:i], axes=1))
        x_new = x + dt * np.tensordot(_B5, K, axes=1)
        err_vec = dt * np.tensordot(_E, K, axes=1)
        scale = cfg.atol + cfg.rtol * np.maximum(np.abs(x), np.abs(x_new))
        err = _rms(err_vec / scale)
        if not np.isfinite(err):
            err = np.inf
        if err <= 1.0:
            t_new = t + dt
            if t_eval is not None:
                while nxt < len(t_eval) and t_eval[nxt] <= t_new + 1e-12 * max(1.0, abs(t_new)):
                    s = (t_eval[nxt] - t) / dt
                    powers = np.array([s, s * s, s**3, s**4])
                    out_x[nxt] = x + dt * np.tensordot(_P @ powers, K, axes=1)
                    nxt += 1
            else:
                out_t.append(t_new)
                out_x.append(x_new.copy())
            _finite(x_new, "DOPRI5")
            t, x, k0 = t_new, x_new, K[6].copy()
            n_acc += 1
            factor = 10.0 if err == 0 else min(10.0, max(0.2, cfg.safety * err ** (-0.2)))
        else:
            n_rej += 1
            factor = max(0.2, cfg.safety * err ** (-0.2)) if np.isfinite(err) else 0.2
        dt = dt * factor
        if dt < cfg.min_dt:
            raise StiffnessError(f"DOPRI5 step size {dt:.3e} underflow at t={t:.6g}; problem is stiff")
    if t_eval is not None:
        for i in range(len(out_x)):
            if out_x[i] is None:
                out_x[i] = x.copy()
    return Trajectory(out_t, np.array(out_x), info={"nfev": nfev[0], "n_accepted": n_acc, "n_rejected": n_rej})


# ---------------------------------------------------------------- driver

KINDS = ("euler", "backward_euler", "dopri5")


def integrate(kind, h, theta, x0, times, step_cfg: StepConfig | None = None, dopri_cfg: Dopri5Config | None = None):
    """Integrate over a time grid, reporting the state at every grid point.

    ``euler`` and ``backward_euler`` take one step per grid interval;
    ``dopri5`` adapts internally and interpolates onto the grid.
    """
    times = np.asarray(times, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    if kind == "dopri5":
        return dopri5_integrate(h, theta, x, times[0], times[-1], dopri_cfg or Dopri5Config(), t_eval=times) if len(times) > 1 else Trajectory(times, x[None])
    if kind not in KINDS:
        raise ValueError(f"unknown solver kind {kind!r}")
    states = [x]
    iters = []
    for k in range(len(times) - 1):
        dt = times[k + 1] - times[k]
        if kind == "euler":
            x = forward_euler_step(h, theta, x, dt)
        else:
            cfg = dataclasses.replace(step_cfg or StepConfig(dt=dt), dt=dt)
            solve = fixed_point_solve if cfg.inner == "fixed_point" else newton_solve
            x, n = solve(h, theta, x, cfg)
            iters.append(n)
        states.append(x)
    info = {"inner_iters": iters} if iters else {}
    return Trajectory(times, np.array(states), info=info)
