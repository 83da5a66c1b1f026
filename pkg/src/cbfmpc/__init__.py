"""Discrete-time CBF/CLF nonlinear MPC toolkit.

Provides six receding-horizon safety formulations built on discrete-time
control barrier and Lyapunov functions, a self-contained dense SQP solver
with first-class infeasibility certificates, a closed-loop simulator, and a
feasibility-region grid sampler with an independent brute-force oracle.
"""

from .model import (
    InputVec,
    ScalarFieldSpec,
    StateVec,
    SystemModel,
    barrier_halfspace,
    barrier_sphere,
    finite_difference_gradient,
    lqr_cost_to_go,
    lyapunov_quadratic,
    scalar_field_from_value,
    triple_integrator,
)
from .nlp import (
    NlpProblem,
    ScalarConstraint,
    SolveResult,
    SolveStatus,
    SolverSettings,
    check_derivatives,
    feasibility_phase,
    solve,
    total_violation,
)

__version__ = "0.1.0"

from .controllers import (  # noqa: E402
    ControlDecision,
    ControllerConfig,
    Formulation,
    InvalidConfigurationError,
    Transcription,
    control_step,
    penalty_phi,
    penalty_psi,
    transcribe,
)
from .feasibility import (  # noqa: E402
    FeasibilityGrid,
    GridComparison,
    PointStatus,
    SizeLimitError,
    brute_force_feasible,
    compare,
    sample_grid,
)
from .simulator import TrajectoryLog, compare_gamma_sweep, rollout  # noqa: E402

__all__ = [
    "ControlDecision",
    "ControllerConfig",
    "FeasibilityGrid",
    "Formulation",
    "GridComparison",
    "InputVec",
    "InvalidConfigurationError",
    "NlpProblem",
    "PointStatus",
    "ScalarConstraint",
    "ScalarFieldSpec",
    "SizeLimitError",
    "SolveResult",
    "SolveStatus",
    "SolverSettings",
    "StateVec",
    "SystemModel",
    "TrajectoryLog",
    "Transcription",
    "barrier_halfspace",
    "barrier_sphere",
    "brute_force_feasible",
    "check_derivatives",
    "compare",
    "compare_gamma_sweep",
    "control_step",
    "feasibility_phase",
    "finite_difference_gradient",
    "lqr_cost_to_go",
    "lyapunov_quadratic",
    "penalty_phi",
    "penalty_psi",
    "rollout",
    "sample_grid",
    "scalar_field_from_value",
    "solve",
    "total_violation",
    "transcribe",
    "triple_integrator",
    "__version__",
]
