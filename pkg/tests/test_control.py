import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_layers.control import (
    DYN_SPEC,
    POLICY_SPEC,
    UPRIGHT_TARGET,
    CartpoleParams,
    ExpertDataset,
    MpcSpec,
    MpcTrainConfig,
    RsConfig,
    behavioral_cloning_train,
    cart_state,
    cartpole_energy,
    cartpole_step,
    curriculum_horizon,
    episode_cost,
    evaluate_policy,
    mpc_plan_backward,
    mse_cost,
    policy_controller,
    random_shooting,
    refine_plan,
    state_angle,
    student_spec,
    train_cost_step,
    train_dynamics_step,
    trajectory_cost,
    zero_controller,
)
from implicit_layers.core import ad, mlp_apply, mlp_init
from implicit_layers.optim import Adam

P = CartpoleParams()


def linear_spec(horizon, a=0.9, b=0.5, target=0.0):
    dyn = lambda x, u, th: x * a + u * b  # noqa: E731
    cost = lambda x, u, tc: ad.sum((x - tc) * (x - tc), axis=-1) + ad.sum(u * u, axis=-1)  # noqa: E731
    return MpcSpec(dyn, cost, horizon, theta_c=np.array([target]))


def quiet(fn, *a, **k):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*a, **k)


# ---------------------------------------------------------------- cartpole


def test_hanging_rest_is_equilibrium():
    s = cart_state(0.0, 0.0, math.pi, 0.0)
    assert np.max(np.abs(cartpole_step(P, s, np.zeros(1)) - s)) <= 1e-12


def test_upright_is_unstable():
    s = cart_state(0.0, 0.0, 1e-3, 0.0)
    nxt = cartpole_step(P, s, np.zeros(1))
    assert abs(state_angle(nxt)) > 1e-3


def test_energy_conserved_without_force():
    s = cart_state(0.2, 0.5, 2.0, -1.0)
    e0 = cartpole_energy(P, s)
    for _ in range(100):
        s = cartpole_step(P, s, np.zeros(1))
    assert abs(cartpole_energy(P, s) - e0) <= 1e-4 * abs(e0)


def test_trig_pair_normalized():
    s = cart_state(0.0, 1.0, 1.0, 3.0)
    for _ in range(20):
        s = cartpole_step(P, s, np.ones(1))
    assert s[3] ** 2 + s[4] ** 2 == pytest.approx(1.0, abs=1e-14)


def test_batched_step_matches_rows():
    S = cart_state([0.0, 0.1], [0.0, -0.2], [3.0, 0.5], [0.1, 0.0])
    U = np.array([[0.3], [-0.7]])
    out = cartpole_step(P, S, U)
    for s, u, o in zip(S, U, out):
        assert np.allclose(cartpole_step(P, s, u), o, atol=1e-14)


def test_params_validation():
    with pytest.raises(ValueError):
        CartpoleParams(dt=0.0)


# ---------------------------------------------------------------- costs / planning


def test_pure_control_cost_zero():
    spec = MpcSpec(lambda x, u, th: x + 1.0, lambda x, u, tc: ad.sum(u * u, axis=-1), 3)
    assert float(trajectory_cost(spec, np.array([5.0]), np.zeros((4, 1)))) == 0.0


def test_zero_horizon_single_term():
    spec = linear_spec(0, target=1.0)
    assert float(trajectory_cost(spec, np.array([3.0]), np.array([[0.5]]))) == pytest.approx(4.0 + 0.25)


def test_two_step_hand_unroll():
    spec = linear_spec(2, a=0.9, b=0.5, target=0.2)
    x0, u = 1.0, np.array([[0.3], [-0.4], [0.1]])
    x1 = 0.9 * x0 + 0.5 * 0.3
    x2 = 0.9 * x1 + 0.5 * -0.4
    want = (x0 - 0.2) ** 2 + (x1 - 0.2) ** 2 + (x2 - 0.2) ** 2 + 0.09 + 0.16 + 0.01
    assert abs(float(trajectory_cost(spec, np.array([x0]), u)) - want) <= 1e-12


def test_horizon_mismatch():
    with pytest.raises(ValueError):
        trajectory_cost(linear_spec(2), np.zeros(1), np.zeros((2, 1)))


def test_mse_cost_upright():
    s = cart_state(0.0, 3.0, 0.0, -2.0)
    assert float(mse_cost(s, None, UPRIGHT_TARGET)) == 0.0


def test_rs_zero_candidate():
    spec = MpcSpec(lambda x, u, th: x, lambda x, u, tc: ad.sum(u * u, axis=-1), 0)
    assert np.array_equal(random_shooting(spec, np.zeros(1), RsConfig(50, 0)), np.zeros((1, 1)))


def test_rs_vs_grid_search():
    spec = MpcSpec(lambda x, u, th: x, lambda x, u, tc: ad.sum((u - 0.37) ** 2 * 3.0 + ad.sin(u * 5.0), axis=-1), 0)
    u = random_shooting(spec, np.zeros(1), RsConfig(100_000, 0))
    grid = np.linspace(-1, 1, 10_000)
    best = np.min((grid - 0.37) ** 2 * 3.0 + np.sin(grid * 5.0))
    assert float(trajectory_cost(spec, np.zeros(1), u)) - best <= 1e-3


def test_refine_improves_or_keeps():
    spec = linear_spec(3, target=0.5)
    u0 = random_shooting(spec, np.array([2.0]), RsConfig(20, 3))
    u1 = refine_plan(spec, np.array([2.0]), u0)
    assert float(trajectory_cost(spec, np.array([2.0]), u1)) <= float(trajectory_cost(spec, np.array([2.0]), u0))
    assert np.all(np.abs(u1) <= 1.0)


# ---------------------------------------------------------------- plan backward


def test_one_step_quadratic_plan_derivative():
    # H = 1: cost (x0 - c)^2 + u0^2 + (a x0 + b u0 - c)^2 + u1^2 is minimised at
    # u0 = b (c - a x0) / (1 + b^2), u1 = 0, so du0/dc = b / (1 + b^2)
    a, b = 0.9, 0.5
    spec = linear_spec(1, a, b, target=0.4)
    x0 = np.array([0.2])
    u = np.array([[b * (0.4 - a * 0.2) / (1 + b * b)], [0.0]])
    gc, _, dx0 = mpc_plan_backward(spec, x0, u, np.array([[1.0], [0.0]]), stationarity_tol=1e-10)
    # slot u1 sits at 0, inside the bounds, so it stays in the IFT variable set
    assert gc[0] == pytest.approx(b / (1 + b * b), rel=1e-5)
    assert dx0[0] == pytest.approx(-a * b / (1 + b * b), rel=1e-5)


def test_zero_cotangent_plan_backward():
    spec = linear_spec(2)
    gc, gh, dx = mpc_plan_backward(spec, np.array([1.0]), np.zeros((3, 1)), np.zeros((3, 1)))
    assert not np.any(gc) and not np.any(gh) and not np.any(dx)


def test_bound_pinned_slots_excluded():
    # pulled far from zero, the first control saturates and carries no gradient
    spec = linear_spec(1, target=50.0)
    u = refine_plan(spec, np.array([0.0]), np.zeros((2, 1)), steps=200)
    assert u[0, 0] == pytest.approx(1.0)
    gc, _, _ = mpc_plan_backward(spec, np.array([0.0]), u, np.array([[1.0], [0.0]]))
    assert gc[0] == 0.0


def test_cartpole_plan_gradient_vs_fd():
    rng = np.random.default_rng(0)
    theta_h = mlp_init(DYN_SPEC, 0).flatten() * 0.1
    tc = np.array([0.1, 0.3, 0.5])
    x0 = cart_state(0.0, 0.0, 2.5, 0.0)
    H = 2

    def plan(theta_c):
        spec = student_spec(theta_h, theta_c, H)
        u = np.zeros((H + 1, 1))
        return refine_plan(spec, x0, u, steps=300, tol=1e-12)

    u = plan(tc)
    w = rng.standard_normal(u.shape)
    gc, _, _ = mpc_plan_backward(student_spec(theta_h, tc, H), x0, u, w, stationarity_tol=1e-8)
    h = 1e-4
    fd = np.array([(np.sum(w * plan(tc + h * e)) - np.sum(w * plan(tc - h * e))) / (2 * h) for e in np.eye(3)])
    assert np.linalg.norm(gc - fd) <= 5e-2 * max(np.linalg.norm(fd), 1e-12)


# ---------------------------------------------------------------- training pieces


def linear_env_theta():
    # residual net x + W2 tanh(W1 [x, u]) with zero weights: identity dynamics
    return np.zeros(DYN_SPEC.total_dim)


def test_dynamics_perfect_model_fixed_point():
    # identity world: true step of a rest state under zero force stays put
    states = np.tile(cart_state(0.0, 0.0, math.pi, 0.0), (10, 1))
    theta = linear_env_theta()
    x = states
    pred = x + np.asarray(mlp_apply(DYN_SPEC, theta, np.concatenate([x, np.zeros((10, 1))], axis=1)))
    assert np.max(np.abs(pred - cartpole_step(P, x, np.zeros((10, 1))))) <= 1e-12


def test_dynamics_training_reduces_loss():
    rng = np.random.default_rng(0)
    states = cart_state(rng.normal(size=40) * 0.2, rng.normal(size=40) * 0.2, math.pi + rng.normal(size=40) * 0.3, rng.normal(size=40) * 0.2)
    theta = mlp_init(DYN_SPEC, 0).flatten() * 0.1
    opt = Adam(3e-3)
    losses = []
    for _ in range(500):
        theta, l = train_dynamics_step(theta, P, states, opt, rng)
        losses.append(l)
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:50])


def test_dynamics_empty_dataset():
    with pytest.raises(ValueError):
        train_dynamics_step(np.zeros(DYN_SPEC.total_dim), P, np.zeros((0, 5)), Adam(1e-3), np.random.default_rng(0))


def test_curriculum():
    hs = [curriculum_horizon(s, 100) for s in range(100)]
    assert hs[0] == 1 and hs[-1] == 10
    assert sorted(set(hs)) == [1, 4, 7, 10]
    assert all(b >= a for a, b in zip(hs, hs[1:]))


def test_cost_step_self_consistent():
    # student world = identity, target = current state: zero control is optimal and predicts x itself
    theta_h = linear_env_theta()
    x = cart_state(0.5, 0.0, 0.7, 0.0)
    tc = x[[0, 3, 4]].copy()
    _, loss, _ = quiet(train_cost_step, tc, theta_h, x[None], x[None], 1, MpcTrainConfig(particles=50), Adam(1e-2), np.random.default_rng(0))
    assert loss <= 1e-10


def test_bc_deterministic_and_bounded():
    rng = np.random.default_rng(0)
    states = np.stack([cart_state(rng.normal(size=6) * 0.1, 0, math.pi, 0) for _ in range(3)])
    data = ExpertDataset(states)
    cfg = MpcTrainConfig(bc_steps=20)
    theta_h = mlp_init(DYN_SPEC, 1).flatten() * 0.1
    a, la = behavioral_cloning_train(theta_h, data, cfg, seed=2)
    b, lb = behavioral_cloning_train(theta_h, data, cfg, seed=2)
    assert np.array_equal(a, b) and la == lb
    out = np.asarray(mlp_apply(POLICY_SPEC, a * 100, rng.normal(size=(50, 5)) * 10))
    assert np.all(np.abs(out) <= 1.0)


def test_expert_dataset_validation():
    with pytest.raises(ValueError):
        ExpertDataset(np.zeros((3, 5)))


def test_do_nothing_on_hanging_start():
    # hanging rest: features (0, 0, -1) vs upright (0, 0, 1) cost 4/3 per state, 41 states
    mean, se, costs = evaluate_policy(P, zero_controller, n_initials=3, variance=0.0, episode_len=40)
    assert mean == pytest.approx(41 * 4 / 3, rel=1e-12) and se == 0.0


def test_evaluate_deterministic():
    theta = mlp_init(POLICY_SPEC, 0).flatten()
    a = evaluate_policy(P, policy_controller(theta), 4, 0.08, 10, seed=3)
    b = evaluate_policy(P, policy_controller(theta), 4, 0.08, 10, seed=3)
    assert a[0] == b[0] and np.array_equal(a[2], b[2])


def test_episode_cost_sum():
    s = np.stack([cart_state(0.0, 0.0, 0.0, 0.0), cart_state(1.0, 0.0, 0.0, 0.0)])
    assert episode_cost(s) == pytest.approx(1 / 3)


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 4), st.integers(1, 64))
def test_planner_feasible_and_certified(seed, H, particles):
    spec = linear_spec(H, target=0.3)
    x0 = np.array([np.random.default_rng(seed).normal()])
    cfg = RsConfig(particles, H, seed)
    u = random_shooting(spec, x0, cfg)
    assert u.shape == (H + 1, 1) and np.all(np.abs(u) <= 1.0)
    best = float(trajectory_cost(spec, x0, u))
    assert best <= float(trajectory_cost(spec, x0, np.zeros_like(u)))
    # replay the sampled candidates
    cand = np.random.default_rng(seed).uniform(-1, 1, size=(particles, H + 1, 1))
    assert best <= np.min(np.asarray(trajectory_cost(spec, x0, cand))) + 1e-15
    assert np.array_equal(u, random_shooting(spec, x0, cfg))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_refined_plans_feasible(seed):
    rng = np.random.default_rng(seed)
    spec = linear_spec(3, a=rng.uniform(-1.5, 1.5), b=rng.uniform(0.1, 2.0), target=rng.uniform(-5, 5))
    u = refine_plan(spec, rng.normal(size=1), rng.uniform(-1, 1, size=(4, 1)))
    assert np.all(np.abs(u) <= 1.0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1, 1))
def test_cartpole_step_deterministic_and_finite(seed, u):
    rng = np.random.default_rng(seed)
    s = cart_state(*rng.normal(size=4))
    a, b = cartpole_step(P, s, np.array([u])), cartpole_step(P, s, np.array([u]))
    assert np.array_equal(a, b) and np.all(np.isfinite(a))
