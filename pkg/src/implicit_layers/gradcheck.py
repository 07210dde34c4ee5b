"""Cross-checks of the gradient paths on random instances.

Targets:

``dil``
    random MLP-perturbed quadratic scores, ``D_y`` in 2..8; CG-IFT, naive
    IFT and central differences through a tightly solved forward pass.
``node``
    small neural ODE over five backward-Euler steps; IFT (both modes) vs
    differences through the discrete solver, and the DOPRI5 adjoint vs
    differences through DOPRI5.
``lqr``
    DARE on random controllable systems; IFT (both modes) vs differences
    through value iteration.

Every target also runs a zero-cotangent instance, which must return
exact zeros from each method.
"""

from __future__ import annotations

from functools import partial

import numpy as np

from .core import ad
from .core.linalg import finite_diff_gradient
from .core.mlp import MlpSpec, mlp_apply, mlp_init
from .implicit import DilLayer, StationarityError, dil_backward, gradient_descent_solver
from .krylov import KrylovConfig
from .lqr import LqrSystem, dare_ift_backward, solve_dare
from .ode.sensitivity import adjoint_backward, ift_backward_rollout
from .ode.solvers import Dopri5Config, StepConfig, dopri5_integrate, integrate
from .ode.training import make_dynamics

TOLERANCES = {"cg_vs_naive": 1e-6, "cg_vs_fd": 1e-4, "naive_vs_fd": 1e-4, "adjoint_vs_fd": 1e-4}
TARGETS = ("dil", "node", "lqr")


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------- random DIL


def random_dil(seed, inner_tol=1e-12):
    """``(layer, x, theta, c)``: ``f(u) = |u|^2/2 - u.x + 0.2 sum mlp([u, x])``."""
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 9))
    spec = MlpSpec(2 * d, 1, (16,))
    theta = mlp_init(spec, seed).flatten()
    x = rng.standard_normal(d)

    def score(u, x, theta):
        return ad.sqnorm(u) * 0.5 - ad.dot(u, x) + ad.sum(mlp_apply(spec, theta, ad.concatenate([u, x]))) * 0.2

    solver = partial(gradient_descent_solver, lr=0.5, steps=20_000, stationarity_tol=inner_tol)
    layer = DilLayer(score=score, solver=solver, krylov=KrylovConfig(tol=1e-13, eps=0.0), stationarity_tol=max(1e-7, 10 * inner_tol))
    return layer, x, theta, rng.standard_normal(d)


def _dil_row(seed, inner_tol, zero=False):
    layer, x, theta, c = random_dil(seed, inner_tol)
    if zero:
        c = np.zeros_like(c)
    y = layer.solver(layer.score, x, theta, np.zeros_like(x))
    cg = dil_backward(layer, y, x, theta, c, mode="cg")
    nv = dil_backward(layer, y, x, theta, c, mode="naive")
    if zero:
        return {"zero": all(not np.any(g) for g in (*cg, *nv))}

    def loss(x, theta):
        return float(c @ layer.solver(layer.score, x, theta, y))

    fd = (finite_diff_gradient(loss, [x, theta], 0), finite_diff_gradient(loss, [x, theta], 1))
    flat = lambda p: np.concatenate([np.ravel(v) for v in p])  # noqa: E731
    return {
        "cg_vs_naive": rel_err(flat(cg), flat(nv)),
        "cg_vs_fd": rel_err(flat(cg), flat(fd)),
        "naive_vs_fd": rel_err(flat(nv), flat(fd)),
    }


# ---------------------------------------------------------------- NODE

NODE_SPEC = MlpSpec(2, 2, (8,))
NODE_TIMES = np.arange(6) * 0.1


def _node_row(seed, inner_tol, zero=False):
    rng = np.random.default_rng(seed)
    h = make_dynamics(NODE_SPEC)
    theta = mlp_init(NODE_SPEC, seed).flatten()
    x0 = rng.standard_normal(2)
    W = np.zeros((len(NODE_TIMES), 2)) if zero else rng.standard_normal((len(NODE_TIMES), 2))
    W[0] = 0.0
    step = StepConfig(0.1, inner="newton", inner_tol=inner_tol)
    dop = Dopri5Config(rtol=1e-11, atol=1e-11)
    traj = integrate("backward_euler", h, theta, x0, NODE_TIMES, step_cfg=step)
    cg = ift_backward_rollout(h, theta, traj, W, "cg")
    nv = ift_backward_rollout(h, theta, traj, W, "naive")
    dtraj = dopri5_integrate(h, theta, x0, 0.0, NODE_TIMES[-1], dop, t_eval=NODE_TIMES)
    adj = adjoint_backward(h, theta, dtraj, W, "dopri5", dopri_cfg=dop)
    if zero:
        return {"zero": all(not np.any(g) for g in (cg, nv, adj))}
    be_loss = lambda th: float(np.sum(W * integrate("backward_euler", h, th, x0, NODE_TIMES, step_cfg=step).states))  # noqa: E731
    dp_loss = lambda th: float(np.sum(W * dopri5_integrate(h, th, x0, 0.0, NODE_TIMES[-1], dop, t_eval=NODE_TIMES).states))  # noqa: E731
    fd_be = finite_diff_gradient(be_loss, [theta], 0)
    fd_dp = finite_diff_gradient(dp_loss, [theta], 0)
    return {
        "cg_vs_naive": rel_err(cg, nv),
        "cg_vs_fd": rel_err(cg, fd_be),
        "naive_vs_fd": rel_err(nv, fd_be),
        "adjoint_vs_fd": rel_err(adj, fd_dp),
    }


# ---------------------------------------------------------------- LQR


def random_lqr(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    A = rng.standard_normal((n, n)) * 0.6
    B = rng.standard_normal((n, m))
    L = rng.standard_normal((n, n)) * 0.3
    return LqrSystem(A, B, np.eye(n) + L @ L.T, np.eye(m))


def _lqr_row(seed, inner_tol, zero=False):
    sys = random_lqr(seed)
    rng = np.random.default_rng(seed + 7919)
    W = rng.standard_normal((sys.n, sys.n))
    W = np.zeros_like(W) if zero else W + W.T
    S = solve_dare(sys, tol=inner_tol).S
    cg = dare_ift_backward(sys, S, W, "cg")
    nv = dare_ift_backward(sys, S, W, "naive")
    if zero:
        return {"zero": all(not np.any(g) for g in (*cg, *nv))}
    fd = []
    for name in "ABQR":
        def loss(M, name=name):
            kw = {k: getattr(sys, k) for k in "ABQR"}
            kw[name] = 0.5 * (M + M.T) if name in "QR" else M
            return float(np.sum(W * solve_dare(LqrSystem(**kw), tol=inner_tol, S0=S).S))

        fd.append(finite_diff_gradient(loss, [getattr(sys, name)], 0, step=1e-6))
    flat = lambda p: np.concatenate([np.ravel(v) for v in p])  # noqa: E731
    return {
        "cg_vs_naive": rel_err(flat(cg), flat(nv)),
        "cg_vs_fd": rel_err(flat(cg), flat(fd)),
        "naive_vs_fd": rel_err(flat(nv), flat(fd)),
    }


ROWS = {"dil": _dil_row, "node": _node_row, "lqr": _lqr_row}


def gradcheck_report(targets=TARGETS, seeds=20, inner_tol=1e-12, base_seed=0):
    """Max relative error per method pair and target, plus a pass flag.

    Tolerances apply regardless of ``inner_tol``, so a loosened inner
    solve shows up as failed finite-difference columns.
    """
    unknown = [t for t in targets if t not in ROWS]
    if unknown:
        raise ValueError(f"unknown gradcheck targets {unknown}")
    if seeds < 1:
        raise ValueError("need at least one seed")
    report = {"inner_tol": inner_tol, "seeds": seeds, "tolerances": TOLERANCES, "targets": {}}
    for t in targets:
        rows, rejected = [], 0
        for s in range(seeds):
            try:
                rows.append(ROWS[t](base_seed + s, inner_tol))
            except StationarityError:
                # the gate refuses to differentiate an unconverged forward solve
                rejected += 1
        worst = {k: max(r[k] for r in rows) for k in rows[0]} if rows else {}
        try:
            zero_ok = ROWS[t](base_seed, inner_tol, zero=True)["zero"]
        except StationarityError:
            zero_ok = False
        passed = zero_ok and not rejected and all(v <= TOLERANCES[k] for k, v in worst.items())
        report["targets"][t] = {"max_rel_err": worst, "zero_cotangent_exact": zero_ok, "gate_rejections": rejected, "passed": passed}
    report["passed"] = all(r["passed"] for r in report["targets"].values())
    return report
