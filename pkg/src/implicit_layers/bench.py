"""Wall-clock comparison of NODE forward solvers and backward passes.

Forward phases time one observation interval ``x_k -> x_{k+1}`` (dt 0.1)
from the Van der Pol initial state. Backward phases time the gradient of
a squared-error loss over a 20-step backward-Euler trajectory. Each
initialization gets one untimed warm-up call, then ``reps`` timed calls.
"""

from __future__ import annotations

import time

import numpy as np

from .core.mlp import MlpSpec, mlp_init
from .ode.sensitivity import adjoint_backward, ift_backward_rollout
from .ode.solvers import Dopri5Config, StepConfig, dopri5_integrate, fixed_point_solve, integrate, newton_solve
from .ode.training import make_dynamics

X0 = np.array([1.5, 0.0])
DT = 0.1
N_STEPS = 20


def _time(fn, reps):
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps


def bench_node_times(hidden=30, layers=2, inits=100, reps=20, backward_reps=3, seed=0, rtol=1e-6, atol=1e-6):
    """Rows ``(phase, method, mean_ms, sd_ms)``; statistics are across initializations."""
    if inits < 2 or reps < 1:
        raise ValueError("need at least 2 initializations and 1 repetition")
    spec = MlpSpec(2, 2, (hidden,) * layers)
    h = make_dynamics(spec)
    dop = Dopri5Config(rtol=rtol, atol=atol)
    fp_cfg = StepConfig(DT, inner="fixed_point")
    nt_cfg = StepConfig(DT, inner="newton")
    times = np.arange(N_STEPS + 1) * DT
    rng = np.random.default_rng(seed)
    cot = rng.standard_normal((N_STEPS + 1, 2))
    cot[0] = 0.0
    samples = {}

    def add(phase, method, sec):
        samples.setdefault((phase, method), []).append(sec * 1e3)

    for i in range(inits):
        th = mlp_init(spec, seed + i).flatten()
        add("forward", "dopri5", _time(lambda: dopri5_integrate(h, th, X0, 0.0, DT, dop), reps))
        add("forward", "bwd_euler_fixed_point", _time(lambda: fixed_point_solve(h, th, X0, fp_cfg), reps))
        add("forward", "bwd_euler_newton", _time(lambda: newton_solve(h, th, X0, nt_cfg), reps))
        traj = integrate("backward_euler", h, th, X0, times, step_cfg=nt_cfg)
        add("backward", "ift_cg", _time(lambda: ift_backward_rollout(h, th, traj, cot, "cg"), backward_reps))
        add("backward", "ift_naive", _time(lambda: ift_backward_rollout(h, th, traj, cot, "naive"), backward_reps))
        add("backward", "adjoint_dopri5", _time(lambda: adjoint_backward(h, th, traj, cot, "dopri5", dopri_cfg=dop), backward_reps))
        add("backward", "adjoint_bwd_euler", _time(lambda: adjoint_backward(h, th, traj, cot, "backward_euler", step_cfg=nt_cfg), backward_reps))
    return [(p, m, float(np.mean(v)), float(np.std(v, ddof=1))) for (p, m), v in samples.items()]
