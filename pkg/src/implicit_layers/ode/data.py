"""Synthetic trajectories for the Van der Pol and spiral benchmarks."""

from __future__ import annotations

import numpy as np

from .solvers import Trajectory

VDP_MU = 3.0
VDP_X0 = (1.5, 0.0)
SPIRAL_A = np.array([[-1.0, 2.0], [-2.0, -0.1]])
SPIRAL_X0 = (2.0, 0.0)


def vdp_rhs(x, mu=VDP_MU):
    return np.array([x[1], mu * (1.0 - x[0] ** 2) * x[1] - x[0]])


def spiral_rhs(x, A=SPIRAL_A):
    return A @ (x**3)


def rk4(f, x0, dt, n_steps):
    x = np.array(x0, dtype=np.float64)
    for _ in range(n_steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def gen_synthetic(kind, n, dt=0.1, seed=0, noise=0.0, substeps=100):
    """``n`` observations spaced ``dt`` apart, integrated by RK4 at ``dt/substeps``.

    ``noise`` adds seeded Gaussian observation noise (default none, which
    makes ``seed`` irrelevant).
    """
    if n <= 0:
        raise ValueError("n must be positive")
    if kind == "vdp":
        f, x0 = vdp_rhs, VDP_X0
    elif kind == "spiral":
        f, x0 = spiral_rhs, SPIRAL_X0
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    states = [np.array(x0, dtype=np.float64)]
    for _ in range(n - 1):
        states.append(rk4(f, states[-1], dt / substeps, substeps))
    states = np.array(states)
    if noise:
        states = states + np.random.default_rng(seed).normal(0.0, noise, size=states.shape)
    return Trajectory(np.arange(n) * dt, states)
