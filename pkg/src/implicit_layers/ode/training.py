"""Neural ODE training on windowed trajectory data."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from ..core.mlp import MlpSpec, mlp_apply, mlp_init
from ..krylov import KrylovDivergence
from ..optim import Adam
from .sensitivity import adjoint_backward, ift_backward_rollout
from .solvers import (
    Dopri5Config,
    NonConvergenceError,
    NonFiniteStateError,
    StepConfig,
    StiffnessError,
    Trajectory,
    integrate,
)

BACKWARD_KINDS = ("adjoint", "ift_cg", "ift_naive")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class NodeTrainConfig:
    epochs: int = 30
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    window: int = 20
    solver: str = "backward_euler"
    backward: str = "ift_cg"
    inner: str = "newton"
    inner_tol: float = 1e-9
    batch_size: int = 16
    eval_every: int = 1
    rtol: float = 1e-6
    atol: float = 1e-6

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be at least 2")
        if self.backward not in BACKWARD_KINDS:
            raise ValueError(f"unknown backward kind {self.backward!r}")
        if self.backward.startswith("ift") and self.solver != "backward_euler":
            raise ValueError("IFT backward passes need the backward_euler solver")


@dataclass
class NodeSplits:
    """Train/val/test segments.  Val and test carry the conditioning state
    (the observation right before the segment) as their first row."""

    train: Trajectory
    val: Trajectory
    test: Trajectory


@dataclass
class NodeTrainResult:
    theta: np.ndarray
    history: list = field(default_factory=list)  # (epoch, train_mse, val_mse)
    test_mse: float = math.nan
    best_epoch: int = -1
    seconds: float = 0.0


def split_dataset(traj: Trajectory, n_train, n_val, n_test):
    """First ``n_train`` points train, last ``n_test`` test, ``n_val`` in between."""
    N = len(traj)
    if n_train + n_val + n_test > N:
        raise ValueError("split sizes exceed the trajectory length")
    t, s = traj.times, traj.states
    val_lo, test_lo = n_train, N - n_test
    return NodeSplits(
        Trajectory(t[:n_train], s[:n_train]),
        Trajectory(t[val_lo - 1 : val_lo + n_val], s[val_lo - 1 : val_lo + n_val]),
        Trajectory(t[test_lo - 1 :], s[test_lo - 1 :]),
    )


def make_dynamics(spec: MlpSpec):
    def h(x, theta):
        return mlp_apply(spec, theta, x)

    return h


def _configs(cfg: NodeTrainConfig, dt):
    step = StepConfig(dt=dt, inner=cfg.inner, inner_tol=cfg.inner_tol)
    return step, Dopri5Config(rtol=cfg.rtol, atol=cfg.atol)


def rollout(h, theta, x0, times, cfg: NodeTrainConfig):
    step, dop = _configs(cfg, times[1] - times[0] if len(times) > 1 else 1.0)
    return integrate(cfg.solver, h, theta, x0, times, step_cfg=step, dopri_cfg=dop)


def segment_mse(h, theta, seg: Trajectory, cfg: NodeTrainConfig):
    """Rollout from the first row across the segment; MSE on the remaining rows.

    A rollout the solver cannot complete scores ``inf``.
    """
    try:
        pred = rollout(h, theta, seg.states[0], seg.times, cfg).states
    except (NonConvergenceError, NonFiniteStateError, StiffnessError, KrylovDivergence, FloatingPointError):
        return math.inf
    err = float(np.mean((pred[1:] - seg.states[1:]) ** 2))
    return err if np.isfinite(err) else math.inf


def window_loss_and_grad(h, theta, windows, times, cfg: NodeTrainConfig):
    """MSE over a batch of windows ``(B, W, D)`` and its parameter gradient."""
    x0 = windows[:, 0]
    traj = rollout(h, theta, x0, times, cfg)
    target = np.swapaxes(windows, 0, 1)  # (W, B, D)
    diff = traj.states - target
    n = diff[1:].size
    loss = float(np.sum(diff[1:] ** 2) / n)
    dLdx = 2.0 * diff / n
    dLdx[0] = 0.0
    if cfg.backward == "adjoint":
        step, dop = _configs(cfg, times[1] - times[0])
        g = adjoint_backward(h, theta, traj, dLdx, kind=cfg.solver, step_cfg=step, dopri_cfg=dop)
    else:
        g = ift_backward_rollout(h, theta, traj, dLdx, backward_mode=cfg.backward[4:])
    return loss, g


def train_node(spec: MlpSpec, splits: NodeSplits, cfg: NodeTrainConfig, theta0=None, log=None):
    """Adam on windowed rollout MSE; keeps the parameters of the best validation epoch."""
    t_start = time.perf_counter()
    train = splits.train
    if len(train) < cfg.window:
        raise ValueError(f"training segment ({len(train)}) shorter than window ({cfg.window})")
    rng = np.random.default_rng(cfg.seed)
    theta = mlp_init(spec, cfg.seed).flatten() if theta0 is None else np.array(theta0, dtype=np.float64)
    h = make_dynamics(spec)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2)
    starts = np.arange(len(train) - cfg.window + 1)
    times = train.times[: cfg.window] - train.times[0]
    result = NodeTrainResult(theta.copy())
    best_val = math.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(starts)
        losses = []
        for b in range(0, len(order), cfg.batch_size):
            idx = order[b : b + cfg.batch_size]
            windows = np.stack([train.states[i : i + cfg.window] for i in idx])
            try:
                loss, g = window_loss_and_grad(h, theta, windows, times, cfg)
            except (NonConvergenceError, NonFiniteStateError, StiffnessError, KrylovDivergence) as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch {b // cfg.batch_size}: {exc}") from exc
            if not (np.isfinite(loss) and np.all(np.isfinite(g))):
                raise TrainingDiverged(f"epoch {epoch}: non-finite loss {loss} or gradient (|theta|max={np.max(np.abs(theta)):.3e})")
            losses.append(loss * len(idx))
            theta = opt.step(theta, g)
        train_mse = float(np.sum(losses) / len(order))
        val_mse = math.nan
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            val_mse = segment_mse(h, theta, splits.val, cfg)
            if val_mse < best_val:
                best_val, result.theta, result.best_epoch = val_mse, theta.copy(), epoch
        result.history.append((epoch, train_mse, val_mse))
        if log is not None:
            log(epoch, train_mse, val_mse)
    if result.best_epoch < 0:
        result.theta = theta.copy()
        result.best_epoch = cfg.epochs
    result.test_mse = segment_mse(h, result.theta, splits.test, cfg)
    result.seconds = time.perf_counter() - t_start
    return result
