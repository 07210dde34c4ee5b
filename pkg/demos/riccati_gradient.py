"""Gradient of the infinite-horizon LQR cost-to-go matrix through the DARE.

The scalar system A = B = Q = R = 1 has S = golden ratio and
dS/dQ = (1 + S) / (2 S - 1). The mass-spring-damper imitation run then
learns the transition matrix from expert controls only.
"""

import math

import numpy as np

from implicit_layers.lqr import LqrSystem, MsdConfig, dare_ift_backward, msd_imitation_train, solve_dare

sys_ = LqrSystem([[1.0]], [[1.0]], [[1.0]], [[1.0]])
S = solve_dare(sys_, tol=1e-13).S
_, _, dQ, _ = dare_ift_backward(sys_, S, np.ones((1, 1)))
phi = (1 + math.sqrt(5)) / 2
print(f"S = {S[0, 0]:.12f} (phi {phi:.12f}), dS/dQ = {dQ[0, 0]:.8f} (closed form {(1 + phi) / (2 * phi - 1):.8f})")

res = msd_imitation_train(0, MsdConfig(iters=1000))
print(f"model loss |A - A_hat|_2: {res.model_loss[0]:.4f} -> {res.model_loss[-1]:.4f}")
print(f"imitation loss: {res.full_loss_init:.3e} -> {res.full_loss_final:.3e}")
