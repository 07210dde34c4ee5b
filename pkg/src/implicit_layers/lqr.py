"""Infinite-horizon discrete LQR with a differentiable Riccati solution.

The DARE ``S = A^T S A - A^T S B (R + B^T S B)^{-1} B^T S A + Q`` is solved
by value iteration.  Gradients of ``S`` with respect to ``(A, B, Q, R)``
treat the squared Frobenius norm of the DARE residual as the score of an
implicit layer over the upper triangle of ``S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import ad
from .core.autodiff import Var, gradients
from .implicit import DilLayer, dil_backward
from .krylov import KrylovConfig
from .optim import Adam


class DareNonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class LqrSystem:
    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        for name in "ABQR":
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=np.float64)))
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.Q.shape != (n, n) or self.R.shape != (m, m):
            raise ValueError("inconsistent LQR dimensions")
        if not (np.allclose(self.Q, self.Q.T) and np.allclose(self.R, self.R.T)):
            raise ValueError("Q and R must be symmetric")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]


class DareSolution(NamedTuple):
    S: np.ndarray
    residual: float
    iters: int


def _riccati_map(A, B, Q, R, S):
    """One value-iteration sweep (works on arrays or ``Var``)."""
    SA = S @ A
    SB = S @ B
    G = ad.inv(R + B.T @ SB)
    return A.T @ SA - (A.T @ SB) @ G @ (B.T @ SA) + Q


def dare_residual(sys: LqrSystem, S):
    return _riccati_map(sys.A, sys.B, sys.Q, sys.R, np.asarray(S)) - S


def solve_dare(sys: LqrSystem, tol=1e-10, max_iter=100_000, S0=None):
    """Value iteration from ``S0`` (default ``Q``) until ``||residual||_F <= tol``."""
    S = sys.Q.copy() if S0 is None else np.array(S0, dtype=np.float64)
    for it in range(max_iter + 1):
        nxt = _riccati_map(sys.A, sys.B, sys.Q, sys.R, S)
        nxt = 0.5 * (nxt + nxt.T)
        res = float(np.linalg.norm(nxt - S))
        if not np.isfinite(res):
            raise DareNonConvergence(f"DARE iteration blew up at sweep {it}")
        if res <= tol:
            # report the residual of the returned matrix
            return DareSolution(S, res, it)
        S = nxt
    raise DareNonConvergence(f"DARE residual {res:.3e} after {max_iter} sweeps (A={sys.A.tolist()})")


def lqr_gain(sys: LqrSystem, S):
    S = np.asarray(S, dtype=np.float64)
    M = sys.R + sys.B.T @ S @ sys.B
    return np.linalg.solve(M, sys.B.T @ S @ sys.A)


# ---------------------------------------------------------------- IFT


def _triu_index(n):
    """``idx[i, j]`` = position of ``S[min(i,j), max(i,j)]`` in the packed upper triangle."""
    iu = np.triu_indices(n)
    pos = np.empty((n, n), dtype=np.int64)
    pos[iu] = np.arange(len(iu[0]))
    pos[(iu[1], iu[0])] = np.arange(len(iu[0]))
    return pos


def pack_sym(S):
    return np.asarray(S)[np.triu_indices(len(S))]


def unpack_sym(u, n):
    return ad.reshape(ad.getitem(u, _triu_index(n).reshape(-1)), (n, n))


def _unpack_params(p, n, m):
    sizes = [(n, n), (n, m), (n, n), (m, m)]
    out, off = [], 0
    for s in sizes:
        k = s[0] * s[1]
        out.append(ad.reshape(p[off : off + k], s))
        off += k
    return out


def _dare_score(n, m, u, p, _theta):
    S = unpack_sym(u, n)
    A, B, Q, R = _unpack_params(p, n, m)
    return ad.sqnorm(_riccati_map(A, B, Q, R, S) - S)


def dare_layer(sys: LqrSystem, backward_mode="cg"):
    from functools import partial

    return DilLayer(
        score=partial(_dare_score, sys.n, sys.m),
        backward_mode=backward_mode,
        krylov=KrylovConfig(tol=1e-13, eps=1e-12),
        stationarity_tol=1e-8,
    )


def dare_ift_backward(sys: LqrSystem, S, dLdS, backward_mode="cg"):
    """``(dL/dA, dL/dB, dL/dQ, dL/dR)`` for a loss on the DARE solution ``S``.

    ``dLdS`` is the cotangent of the full matrix; both triangles count.
    """
    n, m = sys.n, sys.m
    dLdS = np.asarray(dLdS, dtype=np.float64)
    pos = _triu_index(n)
    dLdu = np.zeros(n * (n + 1) // 2)
    np.add.at(dLdu, pos.reshape(-1), dLdS.reshape(-1))
    p = np.concatenate([sys.A.ravel(), sys.B.ravel(), sys.Q.ravel(), sys.R.ravel()])
    dp, _ = dil_backward(dare_layer(sys, backward_mode), pack_sym(S), p, None, dLdu)
    sizes = [(n, n), (n, m), (n, n), (m, m)]
    out, off = [], 0
    for s in sizes:
        k = s[0] * s[1]
        out.append(dp[off : off + k].reshape(s))
        off += k
    return tuple(out)


# ---------------------------------------------------------------- mass-spring-damper


def msd_continuous(c=1.0, m=1.0, k=1.0):
    A = np.array([[0.0, 1.0], [-k / m, -c / m]])
    B = np.array([[0.0], [-1.0 / m]])
    return A, B


def discretize(A, B, dt=0.1):
    return np.eye(len(A)) + A * dt, B * dt


MSD_Q = np.eye(2)
MSD_R = np.array([[2.0]])
MSD_X0 = np.array([0.0, 3.0])


@dataclass(frozen=True)
class MsdConfig:
    c: float = 1.0
    dt: float = 0.1
    iters: int = 3000
    lr: float = 1e-2
    n_data: int = 50
    lookahead: int = 6
    perturbation: float = 0.5
    backward_mode: str = "cg"


@dataclass
class MsdTrainResult:
    A_hat: list = field(default_factory=list)
    imitation_loss: list = field(default_factory=list)
    model_loss: list = field(default_factory=list)
    full_loss_init: float = float("nan")
    full_loss_final: float = float("nan")


def msd_expert_data(A_c, B_c, cfg: MsdConfig):
    """States and expert controls ``u = -K x`` along the closed-loop run from ``x0``."""
    A, B = discretize(A_c, B_c, cfg.dt)
    sys = LqrSystem(A, B, MSD_Q, MSD_R)
    K = lqr_gain(sys, solve_dare(sys).S)
    xs, us = [MSD_X0.copy()], []
    for _ in range(cfg.n_data + cfg.lookahead):
        us.append(-K @ xs[-1])
        xs.append(A @ xs[-1] + B @ us[-1])
    return np.array(xs[:-1]), np.array(us)


def imitation_loss_and_grad(A_c_hat, B_c, x0, u_target, cfg: MsdConfig, S_warm=None):
    """Loss of a ``lookahead``-step learner rollout and its gradient in ``A_c_hat``."""
    A_d, B_d = discretize(A_c_hat, B_c, cfg.dt)
    sys = LqrSystem(A_d, B_d, MSD_Q, MSD_R)
    sol = solve_dare(sys, S0=S_warm)
    Av, Sv = Var(A_d), Var(sol.S)
    G = ad.inv(sys.R + B_d.T @ Sv @ B_d)
    K = G @ (B_d.T @ Sv @ Av)
    x = x0
    loss = 0.0
    for t in range(len(u_target)):
        u = -(K @ x)
        loss = loss + ad.sqnorm(u - u_target[t])
        x = Av @ x + B_d @ u
    gA, gS = gradients(loss, [Av, Sv])
    dA, _, _, _ = dare_ift_backward(sys, sol.S, gS, cfg.backward_mode)
    return float(ad.value_of(loss)), (gA + dA) * cfg.dt, sol.S


def msd_imitation_train(seed, cfg: MsdConfig = MsdConfig(), A_init=None):
    """Learn the continuous transition matrix from expert controls alone."""
    rng = np.random.default_rng(seed)
    A_true, B_c = msd_continuous(cfg.c)
    xs, us = msd_expert_data(A_true, B_c, cfg)
    if A_init is None:
        A_hat = A_true + rng.uniform(-cfg.perturbation, cfg.perturbation, size=A_true.shape)
    else:
        A_hat = np.array(A_init, dtype=np.float64)
    opt = Adam(cfg.lr)
    res = MsdTrainResult()
    S_warm = None
    res.full_loss_init = full_imitation_loss(A_hat, B_c, xs, us, cfg)

    def record(loss):
        res.A_hat.append(A_hat.copy())
        res.imitation_loss.append(loss)
        res.model_loss.append(float(np.linalg.norm(A_true - A_hat, 2)))

    for it in range(cfg.iters):
        start = int(rng.integers(0, cfg.n_data))
        try:
            loss, g, S_warm = imitation_loss_and_grad(A_hat, B_c, xs[start], us[start : start + cfg.lookahead], cfg, S_warm)
        except DareNonConvergence as exc:
            raise DareNonConvergence(f"iteration {it}, A_hat={A_hat.tolist()}: {exc}") from exc
        record(loss)
        A_hat = opt.step(A_hat.ravel(), g.ravel()).reshape(A_hat.shape)
    res.full_loss_final = full_imitation_loss(A_hat, B_c, xs, us, cfg)
    record(res.full_loss_final)
    return res


def full_imitation_loss(A_c_hat, B_c, xs, us, cfg: MsdConfig):
    """Mean lookahead loss over every start point of the training data."""
    A_d, B_d = discretize(A_c_hat, B_c, cfg.dt)
    sys = LqrSystem(A_d, B_d, MSD_Q, MSD_R)
    K = lqr_gain(sys, solve_dare(sys).S)
    total = 0.0
    for s in range(cfg.n_data):
        x = xs[s]
        for t in range(cfg.lookahead):
            u = -K @ x
            total += float(np.sum((u - us[s + t]) ** 2))
            x = A_d @ x + B_d @ u
    return total / cfg.n_data
