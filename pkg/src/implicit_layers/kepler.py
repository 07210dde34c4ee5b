"""Kepler's equation ``E - e sin E = M`` as an argmin layer.

The eccentric anomaly is ``E = argmin_u (u - e sin u - M)^2``; the
eccentricity ``e`` is the layer parameter and ``M`` its input.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial

import numpy as np

from .core import ad
from .implicit import DilLayer, dil_backward, dil_forward, gradient_descent_solver


def kepler_score(u, M, e):
    r = u - ad.sin(u) * e - M
    return ad.sqnorm(r)


def kepler_layer(lr=0.4, steps=10_000, tol=1e-12):
    return DilLayer(
        score=kepler_score,
        solver=partial(gradient_descent_solver, lr=lr, steps=steps, stationarity_tol=tol),
        stationarity_tol=1e-9,
    )


def bisect_kepler(e, M, lo=0.0, hi=2 * np.pi, tol=1e-14):
    f = lambda E: E - e * np.sin(E) - M
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(lo) * f(mid) <= 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


@dataclass
class KeplerFit:
    e: list = field(default_factory=list)
    E: list = field(default_factory=list)
    loss: list = field(default_factory=list)


def fit_eccentricity(e_init=0.1, e_true=0.5, M=1.0, steps=500, lr=0.3, tol=1e-7):
    """Descend ``(E(e) - E_target)^2`` in ``e``; stops early once ``|E - E_target| <= tol``."""
    layer = kepler_layer()
    M_arr = np.array([M])
    E_target = bisect_kepler(e_true, M)
    e = np.array([e_init])
    E = M_arr.copy()
    out = KeplerFit()
    for _ in range(steps):
        E, _ = dil_forward(layer, M_arr, e, E)
        err = float(E[0] - E_target)
        out.e.append(float(e[0]))
        out.E.append(float(E[0]))
        out.loss.append(err * err)
        if abs(err) <= tol:
            break
        _, de = dil_backward(layer, E, M_arr, e, np.array([2 * err]))
        e = e - lr * de
    return out
