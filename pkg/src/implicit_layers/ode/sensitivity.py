"""Backward passes through an integrated trajectory.

``adjoint_backward`` solves the continuous adjoint system backwards in
time.  ``ift_backward_rollout`` instead treats each backward-Euler step
as an implicit layer and chains the exact step derivatives.
"""

from __future__ import annotations

import dataclasses
from functools import partial

import numpy as np

from ..core import ad
from ..core.autodiff import Var, gradients, value_of
from ..implicit import DilLayer, StationarityError, dil_backward
from .solvers import Dopri5Config, StepConfig, Trajectory, be_residual, dopri5_integrate, fixed_point_solve, newton_solve


def _param_vjp(h, x, theta, a):
    """``(a^T dh/dx, a^T dh/dtheta)`` at plain arrays."""
    xv, tv = Var(np.asarray(x, dtype=np.float64)), Var(np.asarray(theta, dtype=np.float64))
    return gradients(h(xv, tv), [xv, tv], cotangent=a)


def _augmented_xa(h, theta, D):
    """Reversed-time dynamics of ``z = [x, a]``: ``(-h(x), a^T dh/dx)``.

    Differentiable in ``z`` (needed by the Newton inner solve).
    """

    def F(z, _unused):
        diff = isinstance(z, Var)
        x = z[..., :D]
        a = z[..., D:]
        xl = x if diff else Var(np.asarray(x))
        hx = h(xl, theta)
        ax = gradients(hx, xl, cotangent=a, create_graph=diff)
        out = ad.concatenate([-hx, ax], axis=-1)
        return out if diff else value_of(out)

    return F


def _augmented_full(h, theta, shape, n_theta):
    """Reversed-time dynamics of the flat ``[x, a, g]`` for explicit solvers."""
    n = int(np.prod(shape))

    def F(z, _unused):
        x = z[:n].reshape(shape)
        a = z[n : 2 * n].reshape(shape)
        ax, at = _param_vjp(h, x, theta, a)
        hx = value_of(h(x, theta))
        return np.concatenate([-hx.reshape(-1), ax.reshape(-1), at.reshape(-1)])

    return F


def adjoint_backward(
    h,
    theta,
    traj: Trajectory,
    dLdx,
    kind="dopri5",
    step_cfg: StepConfig | None = None,
    dopri_cfg: Dopri5Config | None = None,
):
    """``dL/dtheta`` from the continuous adjoint, integrated back over ``traj``.

    ``dLdx[k]`` is the loss cotangent on ``traj.states[k]``.  Between
    observations the augmented state ``(x, a, g)`` runs in reversed time
    with the solver ``kind``; at each observation the state is reset to its
    stored forward value and the cotangent is added to ``a``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    dLdx = np.asarray(dLdx, dtype=np.float64)
    states, times = traj.states, traj.times
    if dLdx.shape != states.shape:
        raise ValueError(f"cotangent shape {dLdx.shape} != states shape {states.shape}")
    shape = states.shape[1:]
    n = int(np.prod(shape))
    a = dLdx[-1].copy()
    g = np.zeros_like(theta)
    if not np.any(dLdx):
        return g
    for k in range(len(times) - 1, 0, -1):
        ds = times[k] - times[k - 1]
        x = states[k]
        if kind == "dopri5":
            F = _augmented_full(h, theta, shape, theta.size)
            z0 = np.concatenate([x.reshape(-1), a.reshape(-1), np.zeros(theta.size)])
            tr = dopri5_integrate(F, None, z0, 0.0, ds, dopri_cfg or Dopri5Config(), t_eval=[0.0, ds])
            z = tr.states[-1]
            a = z[n : 2 * n].reshape(shape)
            g = g + z[2 * n :].reshape(theta.shape)
        elif kind == "euler":
            ax, at = _param_vjp(h, x, theta, a)
            a = a + ds * ax
            g = g + ds * at
        elif kind == "backward_euler":
            D = shape[-1]
            F = _augmented_xa(h, theta, D)
            cfg = dataclasses.replace(step_cfg or StepConfig(dt=ds), dt=ds)
            solve = fixed_point_solve if cfg.inner == "fixed_point" else newton_solve
            z, _ = solve(F, None, np.concatenate([x, a], axis=-1), cfg)
            x_new, a = z[..., :D], z[..., D:]
            _, at = _param_vjp(h, x_new, theta, a)
            g = g + ds * at
        else:
            raise ValueError(f"unknown solver kind {kind!r}")
        a = a + dLdx[k - 1]
    return g


def _step_score(h, dt, u, x, theta):
    return be_residual(u, x, h, theta, dt)


def ift_backward_rollout(h, theta, traj: Trajectory, dLdx, backward_mode="cg", stationarity_tol=1e-7, krylov=None):
    """Reverse sweep of per-step implicit-layer backward passes.

    Each backward-Euler step ``x_{k} -> x_{k+1}`` is a layer with score
    ``||u - x_k - h(u) dt||^2``.  Returns ``dL/dtheta``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    dLdx = np.asarray(dLdx, dtype=np.float64)
    states, times = traj.states, traj.times
    if dLdx.shape != states.shape:
        raise ValueError(f"cotangent shape {dLdx.shape} != states shape {states.shape}")
    batched = states.ndim == 3
    a = dLdx[-1].copy()
    g = np.zeros_like(theta)
    if not np.any(dLdx):
        return g
    extra = {} if krylov is None else {"krylov": krylov}
    for k in range(len(times) - 1, 0, -1):
        layer = DilLayer(
            score=partial(_step_score, h, times[k] - times[k - 1]),
            backward_mode=backward_mode,
            stationarity_tol=stationarity_tol,
            batched=batched,
            **extra,
        )
        try:
            dx, dt = dil_backward(layer, states[k], states[k - 1], theta, a)
        except StationarityError as exc:
            raise StationarityError(f"step {k - 1}->{k}: {exc}") from exc
        g = g + dt
        a = dx + dLdx[k - 1]
    return g
