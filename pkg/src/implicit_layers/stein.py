"""Kernelized Stein discrepancy, SVGD, and equilibrium neural SDE training.

The KSD between a density with score ``s = grad log p`` and particles
``x_1..x_P`` is the V-statistic

    (1/P^2) sum_ij  s_i^T k_ij s_j + s_i^T grad_{x_j} k_ij
                    + grad_{x_i} k_ij^T s_j + tr(d2 k_ij / dx_i dx_j)

with the RBF kernel ``k(x, x') = exp(-||x - x'||^2 / (2 l^2))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .core import ad
from .core.autodiff import Var, gradients, value_of
from .core.mlp import MlpSpec, mlp_apply, mlp_init
from .implicit import DilLayer, dil_backward
from .krylov import KrylovConfig
from .ode.solvers import NonFiniteStateError, Trajectory
from .optim import Adam


@dataclass(frozen=True)
class RbfKernel:
    bandwidth: float = 1.0

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def rbf_eval(k: RbfKernel, x, xp):
    """``(k, grad_x k, grad_x' k, tr d2k/dx dx')`` at a single pair."""
    x, xp = np.asarray(x, dtype=np.float64), np.asarray(xp, dtype=np.float64)
    if x.shape != xp.shape:
        raise ValueError("kernel arguments differ in shape")
    l2 = k.bandwidth**2
    d = x - xp
    sq = float(d @ d)
    kv = math.exp(-sq / (2 * l2))
    return kv, -d / l2 * kv, d / l2 * kv, kv * (x.size / l2 - sq / l2**2)


def median_bandwidth(q):
    """``median pairwise distance / sqrt(2 log P)``; 1 when degenerate."""
    q = np.asarray(q, dtype=np.float64).reshape(len(q), -1)
    P = len(q)
    if P < 2:
        return 1.0
    d = np.sqrt(np.sum((q[:, None] - q[None]) ** 2, axis=-1))
    med = float(np.median(d[np.triu_indices(P, 1)]))
    if med <= 0:
        return 1.0
    return med / math.sqrt(2 * math.log(P))


def ksd(score, q, k: RbfKernel):
    """V-statistic KSD of particles ``q`` (shape ``(P, D)``) against ``score``.

    ``score`` maps ``(P, D) -> (P, D)``; both may be ``ad`` graphs.
    """
    P, D = value_of(q).shape
    l2 = k.bandwidth**2
    s = score(q)
    diff = ad.reshape(q, (P, 1, D)) - ad.reshape(q, (1, P, D))
    sq = ad.sum(diff * diff, axis=2)
    K = ad.exp(sq * (-0.5 / l2))
    t1 = ad.sum(K * (s @ s.T if isinstance(s, Var) else s @ np.transpose(s)))
    s_i = ad.reshape(s, (P, 1, D))
    s_j = ad.reshape(s, (1, P, D))
    t23 = ad.sum(K * ad.sum((s_i - s_j) * diff, axis=2)) * (1.0 / l2)
    t4 = ad.sum(K * (sq * (-1.0 / l2**2) + D / l2))
    return (t1 + t23 + t4) * (1.0 / P**2)


def svgd_direction(score, q, k: RbfKernel):
    q = np.asarray(q, dtype=np.float64)
    l2 = k.bandwidth**2
    s = np.asarray(value_of(score(q)))
    d = q[:, None, :] - q[None, :, :]  # x_i - x_j
    K = np.exp(-np.sum(d * d, axis=-1) / (2 * l2))
    return (K @ s + np.sum(K[..., None] * d, axis=1) / l2) / len(q)


def svgd_solve(score, q_init, k: RbfKernel | None = None, steps=100, stepsize=1e-2):
    """Stein variational gradient descent; ``k=None`` re-picks the median bandwidth each step."""
    if not stepsize > 0:
        raise ValueError("stepsize must be positive")
    q = np.array(q_init, dtype=np.float64)
    for _ in range(steps):
        kern = k if k is not None else RbfKernel(median_bandwidth(q))
        q = q + stepsize * svgd_direction(score, q, kern)
        if not np.all(np.isfinite(q)):
            raise NonFiniteStateError("SVGD produced non-finite particles")
    return q


# ---------------------------------------------------------------- equilibrium NSDE


def ou_score(mu=2.0, eps=0.05):
    def s(x):
        return (mu - x) * (1.0 / eps)

    return s


@dataclass(frozen=True)
class EnsdeModel:
    spec: MlpSpec = MlpSpec(1, 1, (32,))
    eps: float = 0.05

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")

    def drift(self, theta, x):
        return mlp_apply(self.spec, theta, x)

    def score(self, theta):
        return lambda x: self.drift(theta, x) * (1.0 / self.eps)


@dataclass(frozen=True)
class EnsdeConfig:
    outer_iters: int = 200
    inner_steps: int = 16
    particles: int = 32
    svgd_stepsize: float = 5e-3
    lr: float = 3e-2
    seed: int = 0
    stationarity_tol: float = 0.1
    init_std: float = 1.0


@dataclass
class EnsdeResult:
    theta: np.ndarray
    particles: np.ndarray
    outer_loss: list = field(default_factory=list)


def _inner_score(model, bandwidth, u, _x, theta):
    return ksd(lambda y: model.drift(theta, y) * (1.0 / model.eps), u, RbfKernel(bandwidth))


def ensde_train(model: EnsdeModel, ref_score, cfg: EnsdeConfig = EnsdeConfig(), theta0=None):
    """Outer descent on ``KSD(ref, q*(theta))`` where ``q*`` is the SVGD
    solution of the model's own stationary density; particles warm-start
    from the previous outer step."""
    rng = np.random.default_rng(cfg.seed)
    theta = mlp_init(model.spec, cfg.seed).flatten() if theta0 is None else np.array(theta0, dtype=np.float64)
    q = rng.normal(0.0, cfg.init_std, size=(cfg.particles, model.spec.input_dim))
    opt = Adam(cfg.lr)
    res = EnsdeResult(theta, q)
    for _ in range(cfg.outer_iters):
        q = svgd_solve(model.score(theta), q, None, cfg.inner_steps, cfg.svgd_stepsize)
        ell = median_bandwidth(q)
        qv = Var(q)
        outer = ksd(ref_score, qv, RbfKernel(ell))
        res.outer_loss.append(float(value_of(outer)))
        dLdq = gradients(outer, qv)
        layer = DilLayer(
            score=partial(_inner_score, model, ell),
            krylov=KrylovConfig(tol=1e-8, eps=1e-6, max_iter=200),
            stationarity_tol=cfg.stationarity_tol,
        )
        _, g = dil_backward(layer, q, None, theta, dLdq)
        theta = opt.step(theta, g)
    res.theta, res.particles = theta, q
    return res


def euler_maruyama_simulate(drift, x0, T, dt, eps, seed=0):
    """``x <- x + drift(x) dt + sqrt(2 eps dt) N(0, 1)`` on a uniform grid."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(T / dt))
    x = np.array(x0, dtype=np.float64)
    out = [x]
    scale = math.sqrt(2 * eps * dt)
    for _ in range(n):
        x = x + np.asarray(value_of(drift(x))) * dt + scale * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise NonFiniteStateError("Euler-Maruyama produced a non-finite state")
        out.append(x)
    return Trajectory(np.arange(n + 1) * dt, np.array(out))
