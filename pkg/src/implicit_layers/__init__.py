"""Differentiable implicit layers: argmin forward solves with a
matrix-free implicit-function backward pass, plus neural ODE, MPC, LQR
and Stein applications built on them."""

from .core import Var, gradients, mlp_apply, mlp_init, MlpSpec
from .implicit import (
    DilLayer,
    SolverDivergence,
    StationarityError,
    dil_backward,
    dil_backward_naive,
    dil_forward,
    gradient_descent_solver,
    ift_jacobian,
)
from .krylov import KrylovConfig, KrylovDivergence, LinearOperator, cg_solve, cgnr_solve

__version__ = "0.1.0"

__all__ = [
    "Var",
    "gradients",
    "MlpSpec",
    "mlp_apply",
    "mlp_init",
    "DilLayer",
    "SolverDivergence",
    "StationarityError",
    "dil_backward",
    "dil_backward_naive",
    "dil_forward",
    "gradient_descent_solver",
    "ift_jacobian",
    "KrylovConfig",
    "KrylovDivergence",
    "LinearOperator",
    "cg_solve",
    "cgnr_solve",
]
