from .data import gen_synthetic, rk4, spiral_rhs, vdp_rhs
from .sensitivity import adjoint_backward, ift_backward_rollout
from .solvers import (
    Dopri5Config,
    NonConvergenceError,
    NonFiniteStateError,
    StepConfig,
    StiffnessError,
    Trajectory,
    backward_euler_step,
    be_residual,
    dopri5_integrate,
    fixed_point_solve,
    forward_euler_step,
    integrate,
    newton_solve,
    step_residuals,
)
from .training import (
    NodeSplits,
    NodeTrainConfig,
    NodeTrainResult,
    TrainingDiverged,
    make_dynamics,
    segment_mse,
    split_dataset,
    train_node,
)
