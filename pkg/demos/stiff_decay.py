"""Explicit vs implicit Euler on x' = -1000 x with dt = 0.1.

Forward Euler multiplies by -99 each step. Backward Euler damps by 1/101
whatever the step size, and its gradient with respect to the rate comes
from the IFT reverse sweep without unrolling Newton.
"""

import numpy as np

from implicit_layers.ode import StepConfig, Trajectory, ift_backward_rollout, integrate

times = np.arange(6) * 0.1
rate = lambda x, th: x * th  # noqa: E731
theta = np.array([-1000.0])

fe = integrate("euler", rate, theta, np.array([1.0]), times).states[:, 0]
be = integrate("backward_euler", rate, theta, np.array([1.0]), times, step_cfg=StepConfig(0.1)).states[:, 0]
for t, a, b in zip(times, fe, be):
    print(f"t={t:.1f}  forward {a:+.4e}  backward {b:+.4e}")

# d x_5 / d theta; closed form 5 dt / (1 - theta dt)^6
W = np.zeros((6, 1))
W[-1] = 1.0
g = ift_backward_rollout(rate, theta, Trajectory(times, be[:, None]), W, "naive")
print(f"dx5/dtheta: IFT {g[0]:.6e}, closed form {5 * 0.1 / (1 + 100.0) ** 6:.6e}")
