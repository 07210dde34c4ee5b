"""SVGD particles for an Ornstein-Uhlenbeck stationary density, then an
equilibrium neural SDE fit whose particles should settle around mu = 2."""

import warnings

import numpy as np

from implicit_layers.stein import EnsdeConfig, EnsdeModel, RbfKernel, ensde_train, ksd, median_bandwidth, ou_score, svgd_solve

score = ou_score(2.0, 0.05)
q0 = np.random.default_rng(0).standard_normal((32, 1))
q = svgd_solve(score, q0, steps=500, stepsize=5e-3)
k0 = ksd(score, q0, RbfKernel(median_bandwidth(q0)))
k1 = ksd(score, q, RbfKernel(median_bandwidth(q)))
print(f"SVGD: mean {q.mean():.4f}, std {q.std():.4f} (stationary {np.sqrt(0.05):.4f}), KSD {float(k0):.1f} -> {float(k1):.3f}")

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    res = ensde_train(EnsdeModel(), score, EnsdeConfig())
print(f"ENSDE after 200 outer steps: particle mean {res.particles.mean():.4f}, outer KSD {res.outer_loss[0]:.1f} -> {res.outer_loss[-1]:.3f}")
