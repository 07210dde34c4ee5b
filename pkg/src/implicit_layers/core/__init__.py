from . import autodiff as ad
from .autodiff import Var, gradients, grad, grad_vjp, vjp
from .linalg import SingularMatrixError, dense_solve, finite_diff_gradient
from .mlp import InvalidSpecError, MlpSpec, ParamBundle, mlp_apply, mlp_init

__all__ = [
    "ad",
    "Var",
    "gradients",
    "grad",
    "grad_vjp",
    "vjp",
    "SingularMatrixError",
    "dense_solve",
    "finite_diff_gradient",
    "InvalidSpecError",
    "MlpSpec",
    "ParamBundle",
    "mlp_apply",
    "mlp_init",
]
