"""Recover an orbit's eccentricity from the eccentric anomaly alone.

E(e) solves Kepler's equation E - e sin E = M. It is computed by gradient
descent and differentiated through the implicit function theorem, so the
loop never unrolls the inner solver.
"""

from implicit_layers.kepler import bisect_kepler, fit_eccentricity

M, e_true = 1.0, 0.5
target = bisect_kepler(e_true, M)
fit = fit_eccentricity(e_init=0.1, e_true=e_true, M=M, steps=500)

for i in range(0, len(fit.e), max(1, len(fit.e) // 8)):
    print(f"step {i:4d}  e={fit.e[i]:.6f}  E={fit.E[i]:.8f}  loss={fit.loss[i]:.3e}")
print(f"final e={fit.e[-1]:.8f} (true {e_true}), |E - E*| = {abs(fit.E[-1] - target):.2e}")
