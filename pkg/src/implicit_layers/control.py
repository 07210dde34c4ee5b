"""Cartpole world, random-shooting MPC as an implicit layer, and imitation
learning from state-only demonstrations.

Angles are measured from upright (``theta = 0`` is the balanced pole); a
state is ``(x, x_dot, theta_dot, sin theta, cos theta)``.  A plan over
horizon ``H`` has ``H + 1`` control slots ``u_0..u_H`` and costs
``sum_{t=0}^{H} c(x_t, u_t)`` with ``x_{t+1} = f(x_t, u_t)``.
"""

from __future__ import annotations

import math
from collections.abc import Callable
from dataclasses import dataclass, field
from functools import partial

import numpy as np
from scipy.optimize import minimize

from .core import ad
from .core.autodiff import Var, gradients, value_of
from .core.mlp import MlpSpec, mlp_apply, mlp_init
from .implicit import DilLayer, StationarityError, dil_backward
from .krylov import KrylovConfig
from .optim import Adam

# ---------------------------------------------------------------- cartpole


@dataclass(frozen=True)
class CartpoleParams:
    pole_length: float = 0.6
    cart_mass: float = 0.5
    pole_mass: float = 0.5
    dt: float = 0.1
    gravity: float = 9.81
    force_gain: float = 10.0
    substeps: int = 10

    def __post_init__(self):
        for name in ("pole_length", "cart_mass", "pole_mass", "dt", "gravity", "force_gain"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


def cart_state(x, x_dot, theta, theta_dot):
    x, x_dot, theta, theta_dot = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (x, x_dot, theta, theta_dot)))
    return np.stack([x, x_dot, theta_dot, np.sin(theta), np.cos(theta)], axis=-1)


def state_angle(s):
    s = np.asarray(s)
    return np.arctan2(s[..., 3], s[..., 4])


def _accel(p: CartpoleParams, theta, x_dot, theta_dot, force):
    l = 0.5 * p.pole_length
    M = p.cart_mass + p.pole_mass
    s, c = np.sin(theta), np.cos(theta)
    temp = (force + p.pole_mass * l * theta_dot**2 * s) / M
    th_acc = (p.gravity * s - c * temp) / (l * (4.0 / 3.0 - p.pole_mass * c * c / M))
    x_acc = temp - p.pole_mass * l * th_acc * c / M
    return x_acc, th_acc


def cartpole_step(p: CartpoleParams, state, u):
    """One ``dt`` of the frictionless cartpole under force ``force_gain * u`` (RK4 substeps)."""
    state = np.asarray(state, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == state.ndim:
        u = u[..., 0]
    force = p.force_gain * u
    y = np.stack([state[..., 0], state_angle(state), state[..., 1], state[..., 2]], axis=-1)

    def f(y):
        xa, ta = _accel(p, y[..., 1], y[..., 2], y[..., 3], force)
        return np.stack([y[..., 2], y[..., 3], xa, ta], axis=-1)

    h = p.dt / p.substeps
    for _ in range(p.substeps):
        k1 = f(y)
        k2 = f(y + 0.5 * h * k1)
        k3 = f(y + 0.5 * h * k2)
        k4 = f(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out = cart_state(y[..., 0], y[..., 2], y[..., 1], y[..., 3])
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite cartpole state")
    return out


def cartpole_energy(p: CartpoleParams, state):
    state = np.asarray(state, dtype=np.float64)
    l = 0.5 * p.pole_length
    xd, td, s, c = state[..., 1], state[..., 2], state[..., 3], state[..., 4]
    kin = 0.5 * p.cart_mass * xd**2
    kin = kin + 0.5 * p.pole_mass * ((xd + l * td * c) ** 2 + (l * td * s) ** 2)
    kin = kin + 0.5 * (p.pole_mass * l * l / 3.0) * td**2
    return kin + p.pole_mass * p.gravity * l * c


# ---------------------------------------------------------------- MPC

UPRIGHT_TARGET = np.array([0.0, 0.0, 1.0])


def mse_cost(x, u, target):
    """Mean squared error of ``(x, sin theta, cos theta)`` against ``target``."""
    feats = ad.getitem(x, (Ellipsis, [0, 3, 4])) if isinstance(x, Var) else np.asarray(x)[..., [0, 3, 4]]
    d = feats - target
    return ad.sum(d * d, axis=-1) * (1.0 / 3.0)


@dataclass(frozen=True)
class MpcSpec:
    dynamics: Callable  # (x, u, theta_h) -> x'
    cost: Callable  # (x, u, theta_c) -> per-row cost
    horizon: int
    theta_h: np.ndarray | None = None
    theta_c: np.ndarray | None = None
    u_dim: int = 1
    bounds: tuple = (-1.0, 1.0)

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")

    @property
    def slots(self):
        return self.horizon + 1


@dataclass(frozen=True)
class RsConfig:
    particles: int = 1000
    horizon: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.particles < 1:
            raise ValueError("particles must be at least 1")


def trajectory_cost(spec: MpcSpec, x0, u_seq, theta_h=None, theta_c=None):
    """``sum_{t=0}^{H} c(x_t, u_t)``.  ``u_seq`` is ``(H+1, m)`` or batched ``(P, H+1, m)``.

    ``theta_h``/``theta_c`` default to ``spec.theta_h``/``spec.theta_c`` and may be Vars.
    """
    th = spec.theta_h if theta_h is None else theta_h
    tc = spec.theta_c if theta_c is None else theta_c
    shape = np.shape(value_of(u_seq))
    batched = len(shape) == 3
    if shape[-2] != spec.slots:
        raise ValueError(f"plan has {shape[-2]} slots, horizon {spec.horizon} needs {spec.slots}")
    x = x0
    if batched and np.ndim(value_of(x0)) == 1:
        x = np.broadcast_to(np.asarray(x0, dtype=np.float64), (shape[0], len(x0)))
    total = 0.0
    for t in range(spec.slots):
        u_t = u_seq[:, t] if batched else u_seq[t]
        total = total + spec.cost(x, u_t, tc)
        if t < spec.horizon:
            x = spec.dynamics(x, u_t, th)
    return total


def random_shooting(spec: MpcSpec, x0, cfg: RsConfig, rng=None):
    """Cheapest of ``cfg.particles`` uniform plans plus the all-zero plan."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    lo, hi = spec.bounds
    cand = rng.uniform(lo, hi, size=(cfg.particles, spec.slots, spec.u_dim))
    cand = np.concatenate([np.zeros((1, spec.slots, spec.u_dim)), cand])
    costs = np.asarray(value_of(trajectory_cost(spec, x0, cand)))
    return cand[int(np.argmin(costs))].copy()


def plan_gradient(spec: MpcSpec, x0, u_seq):
    u = Var(np.asarray(u_seq, dtype=np.float64))
    f = trajectory_cost(spec, x0, u)
    return float(value_of(f)), gradients(f, u)


def refine_plan(spec: MpcSpec, x0, u_seq, steps=50, tol=1e-8):
    """Polish a plan with bounded L-BFGS; returns the input if no better point is found."""
    u0 = np.asarray(u_seq, dtype=np.float64)

    def fun(v):
        f, g = plan_gradient(spec, x0, v.reshape(u0.shape))
        return f, g.ravel()

    res = minimize(fun, u0.ravel(), jac=True, method="L-BFGS-B", bounds=[spec.bounds] * u0.size, options={"maxiter": steps, "gtol": tol, "ftol": 0.0})
    u = np.clip(res.x.reshape(u0.shape), *spec.bounds)
    return u if res.fun <= fun(u0.ravel())[0] else u0


def _free_mask(u, bounds, margin=1e-6):
    lo, hi = bounds
    return (u > lo + margin) & (u < hi - margin)


def _plan_score(spec, free, u_fixed, n_c, u_free, x0, theta):
    u = ad.scatter(u_free, free, u_fixed.shape) + u_fixed * (~free)
    return trajectory_cost(spec, x0, u, theta_h=theta[n_c:], theta_c=theta[:n_c])


def mpc_plan_backward(spec: MpcSpec, x0, u_seq, dLdu, stationarity_tol=1e-5, mode="cg"):
    """``(dL/dtheta_c, dL/dtheta_h, dL/dx0)`` through the plan as an argmin.

    Coordinates within ``1e-6`` of a bound are held fixed.  The gate
    accepts plans with ``||grad||_inf <= 1e3 * stationarity_tol``.
    """
    u_seq = np.asarray(u_seq, dtype=np.float64)
    dLdu = np.asarray(dLdu, dtype=np.float64)
    tc = np.atleast_1d(np.asarray(spec.theta_c, dtype=np.float64))
    th = np.atleast_1d(np.asarray(spec.theta_h if spec.theta_h is not None else np.zeros(0), dtype=np.float64))
    free = _free_mask(u_seq, spec.bounds)
    if not np.any(dLdu[free]) or not np.any(free):
        return np.zeros_like(tc), np.zeros_like(th), np.zeros_like(np.asarray(x0, dtype=np.float64))
    spec_h = spec if spec.theta_h is not None else _with_theta_h(spec)
    layer = DilLayer(
        score=partial(_plan_score, spec_h, free, u_seq, tc.size),
        backward_mode=mode,
        krylov=KrylovConfig(eps=1e-6),
        stationarity_tol=stationarity_tol,
    )
    dx0, dtheta = dil_backward(layer, u_seq[free], x0, np.concatenate([tc, th]), dLdu[free])
    return dtheta[: tc.size], dtheta[tc.size :], dx0


def _with_theta_h(spec):
    dyn = spec.dynamics
    return MpcSpec(lambda x, u, _th: dyn(x, u, None), spec.cost, spec.horizon, np.zeros(0), spec.theta_c, spec.u_dim, spec.bounds)


# ---------------------------------------------------------------- learned models

DYN_SPEC = MlpSpec(6, 5, (64, 64))
POLICY_SPEC = MlpSpec(5, 1, (64, 64), output_activation="tanh")


def learned_dynamics(x, u, theta_h, spec=DYN_SPEC):
    """Residual network ``x + net([x, u])``."""
    xu = ad.concatenate([x, u], axis=-1)
    return x + mlp_apply(spec, theta_h, xu)


def learned_cost(x, u, theta_c):
    return mse_cost(x, u, theta_c)


def env_transition(p: CartpoleParams):
    return lambda x, u, _th=None: cartpole_step(p, x, u)


def expert_spec(p: CartpoleParams, horizon=10):
    return MpcSpec(env_transition(p), lambda x, u, tc: mse_cost(x, u, UPRIGHT_TARGET), horizon, theta_c=np.zeros(0))


def student_spec(theta_h, theta_c, horizon):
    return MpcSpec(learned_dynamics, learned_cost, horizon, theta_h=theta_h, theta_c=theta_c)


# ---------------------------------------------------------------- data


@dataclass
class ExpertDataset:
    states: np.ndarray  # (N, T+1, 5)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 3:
            raise ValueError("expected (trajectories, steps, state) array")

    def pairs(self):
        s = self.states
        return s[:, :-1].reshape(-1, s.shape[-1]), s[:, 1:].reshape(-1, s.shape[-1])

    def all_states(self):
        return self.states.reshape(-1, self.states.shape[-1])


def sample_initial_states(n, variance, rng):
    """``(x, x_dot, theta - pi, theta_dot) ~ N(0, variance I)`` around the hanging rest."""
    z = rng.normal(0.0, math.sqrt(variance), size=(n, 4))
    return cart_state(z[:, 0], z[:, 1], math.pi + z[:, 2], z[:, 3])


def mpc_controller(spec: MpcSpec, cfg: RsConfig):
    def act(state, rng):
        return random_shooting(spec, state, cfg, rng)[0]

    return act


def rollout_env(p: CartpoleParams, controller, x0, steps, rng):
    xs = [np.asarray(x0, dtype=np.float64)]
    for _ in range(steps):
        u = np.clip(np.atleast_1d(controller(xs[-1], rng)), -1.0, 1.0)
        xs.append(cartpole_step(p, xs[-1], u))
    return np.array(xs)


def generate_expert_data(p: CartpoleParams, n_traj, length, rs: RsConfig, variance=0.04, seed=0):
    """Expert = RS planner on the true dynamics with the upright cost; controls discarded."""
    rng = np.random.default_rng(seed)
    spec = expert_spec(p, rs.horizon)
    x0s = sample_initial_states(n_traj, variance, rng)
    ctrl = mpc_controller(spec, rs)
    return ExpertDataset(np.array([rollout_env(p, ctrl, x0, length, rng) for x0 in x0s]))


# ---------------------------------------------------------------- training


def _dyn_loss(theta_h, x, u, x_next):
    pred = learned_dynamics(x, u, theta_h)
    d = pred - x_next
    return ad.sum(d * d) * (1.0 / d.size)


def train_dynamics_step(theta_h, p: CartpoleParams, states, opt: Adam, rng, batch=64):
    """Query the true system at dataset states under random controls; one Adam step."""
    states = np.asarray(states)
    if len(states) == 0:
        raise ValueError("empty dataset")
    x = states[rng.integers(0, len(states), size=batch)]
    u = rng.uniform(-1.0, 1.0, size=(batch, 1))
    x_next = cartpole_step(p, x, u)
    tv = Var(theta_h)
    loss = _dyn_loss(tv, x, u, x_next)
    g = gradients(loss, tv)
    return opt.step(theta_h, g), float(value_of(loss))


@dataclass(frozen=True)
class MpcTrainConfig:
    particles: int = 300
    horizon: int = 10
    cost_steps: int = 200
    cost_batch: int = 4
    cost_lr: float = 5e-2
    dyn_steps: int = 4000
    dyn_batch: int = 64
    dyn_lr: float = 3e-3
    refine_steps: int = 30
    bc_steps: int = 1500
    bc_lr: float = 3e-3
    bc_batch: int = 64
    seed: int = 0


def curriculum_horizon(step, total, final=10):
    """1 -> 4 -> 7 -> 10 over the four quarters of training (scaled to ``final``)."""
    stages = [1, 4, 7, 10]
    h = stages[min(3, 4 * step // max(total, 1))]
    return max(1, round(h * final / 10))


def train_cost_step(theta_c, theta_h, x, x_next, horizon, cfg: MpcTrainConfig, opt: Adam, rng):
    """Plan from each ``x`` with the student model, imagine the first step,
    and descend ``MSE(x', h(x, u_0))`` through the plan.  Returns
    ``(theta_c, loss, skipped)``; plans failing the stationarity gate are skipped."""
    spec = student_spec(theta_h, theta_c, horizon)
    rs = RsConfig(cfg.particles, horizon)
    grad = np.zeros_like(theta_c)
    losses, used, skipped = [], 0, 0
    for xi, xn in zip(np.atleast_2d(x), np.atleast_2d(x_next)):
        u = random_shooting(spec, xi, rs, rng)
        u = refine_plan(spec, xi, u, steps=cfg.refine_steps)
        u0 = Var(u[0])
        pred = learned_dynamics(xi, u0, theta_h)
        d = pred - xn
        loss = ad.sum(d * d) * (1.0 / d.size)
        losses.append(float(value_of(loss)))
        dLdu = np.zeros_like(u)
        dLdu[0] = gradients(loss, u0)
        try:
            gc, _, _ = mpc_plan_backward(spec, xi, u, dLdu)
        except StationarityError:
            skipped += 1
            continue
        grad += gc
        used += 1
    if used:
        theta_c = opt.step(theta_c, grad / used)
    return theta_c, float(np.mean(losses)), skipped


def _bc_loss(theta_pi, theta_h, x, x_next):
    u = mlp_apply(POLICY_SPEC, theta_pi, x)
    d = learned_dynamics(x, u, theta_h) - x_next
    return ad.sum(d * d) * (1.0 / d.size)


def behavioral_cloning_train(theta_h, dataset: ExpertDataset, cfg: MpcTrainConfig, seed=0, theta0=None):
    """Policy ``pi(x)`` trained so that ``h(x, pi(x))`` reproduces the next state."""
    rng = np.random.default_rng(seed)
    theta = mlp_init(POLICY_SPEC, seed).flatten() if theta0 is None else np.array(theta0, dtype=np.float64)
    X, Xn = dataset.pairs()
    opt = Adam(cfg.bc_lr)
    losses = []
    for _ in range(cfg.bc_steps):
        idx = rng.integers(0, len(X), size=cfg.bc_batch)
        tv = Var(theta)
        loss = _bc_loss(tv, theta_h, X[idx], Xn[idx])
        theta = opt.step(theta, gradients(loss, tv))
        losses.append(float(value_of(loss)))
    return theta, losses


def policy_controller(theta_pi):
    return lambda state, rng: np.asarray(mlp_apply(POLICY_SPEC, theta_pi, np.asarray(state)))


def zero_controller(state, rng):
    return np.zeros(1)


def episode_cost(states):
    return float(np.sum(mse_cost(states, None, UPRIGHT_TARGET)))


def evaluate_policy(p: CartpoleParams, controller, n_initials=50, variance=0.08, episode_len=40, seed=0):
    """Mean and standard error of the summed upright cost over episodes."""
    rng = np.random.default_rng(seed)
    x0s = sample_initial_states(n_initials, variance, rng)
    costs = np.array([episode_cost(rollout_env(p, controller, x0, episode_len, rng)) for x0 in x0s])
    se = float(costs.std(ddof=1) / math.sqrt(len(costs))) if len(costs) > 1 else 0.0
    return float(costs.mean()), se, costs


@dataclass
class MpcExperimentResult:
    expert: tuple
    mpc_ift: tuple
    bc: tuple
    theta_c: np.ndarray
    cost_losses: list = field(default_factory=list)
    dyn_losses: list = field(default_factory=list)
    skipped: int = 0


def run_mpc_experiment(
    p: CartpoleParams = CartpoleParams(),
    cfg: MpcTrainConfig = MpcTrainConfig(),
    n_traj=20,
    length=40,
    n_eval=50,
    eval_variance=0.08,
    log=None,
):
    """Expert data, alternating dynamics/cost training, BC baseline, evaluation."""
    rng = np.random.default_rng(cfg.seed)
    rs = RsConfig(cfg.particles, cfg.horizon)
    data = generate_expert_data(p, n_traj, length, rs, seed=cfg.seed)
    states = data.all_states()
    X, Xn = data.pairs()
    theta_h = mlp_init(DYN_SPEC, cfg.seed).flatten() * 0.1
    theta_c = np.zeros(3)
    dopt, copt = Adam(cfg.dyn_lr), Adam(cfg.cost_lr)
    res = MpcExperimentResult(None, None, None, theta_c)
    dyn_per_cost = max(1, cfg.dyn_steps // max(cfg.cost_steps, 1))
    # warm up the world model before planning with it
    for _ in range(cfg.dyn_steps // 2):
        theta_h, l = train_dynamics_step(theta_h, p, states, dopt, rng, cfg.dyn_batch)
        res.dyn_losses.append(l)
    for step in range(cfg.cost_steps):
        for _ in range(max(1, dyn_per_cost // 2)):
            theta_h, l = train_dynamics_step(theta_h, p, states, dopt, rng, cfg.dyn_batch)
            res.dyn_losses.append(l)
        H = curriculum_horizon(step, cfg.cost_steps, cfg.horizon)
        idx = rng.integers(0, len(X), size=cfg.cost_batch)
        theta_c, loss, sk = train_cost_step(theta_c, theta_h, X[idx], Xn[idx], H, cfg, copt, rng)
        res.cost_losses.append(loss)
        res.skipped += sk
        if log is not None:
            log(step, H, loss, theta_c)
    res.theta_c = theta_c
    theta_pi, _ = behavioral_cloning_train(theta_h, data, cfg, seed=cfg.seed)
    eval_seed = cfg.seed + 10_000
    res.expert = evaluate_policy(p, mpc_controller(expert_spec(p, cfg.horizon), rs), n_eval, eval_variance, length, eval_seed)[:2]
    student = student_spec(theta_h, theta_c, cfg.horizon)
    res.mpc_ift = evaluate_policy(p, mpc_controller(student, rs), n_eval, eval_variance, length, eval_seed)[:2]
    res.bc = evaluate_policy(p, policy_controller(theta_pi), n_eval, eval_variance, length, eval_seed)[:2]
    return res
