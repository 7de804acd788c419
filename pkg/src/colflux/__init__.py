"""Closed-loop training of measurement-selecting neural controllers for a
binary distillation column, with a differentiable RK4 simulator and an
optimal-control benchmark."""

__version__ = "0.1.0"

from .column import (
    ColumnParams,
    ColumnState,
    Controls,
    ConvergenceError,
    FeedConditions,
    NoiseSpec,
    SingularHoldupError,
    apply_noise,
    derivatives,
    internal_flows,
    measure,
    stage_temperature,
    steady_state,
    vle,
)
from .diffsim import (
    CostSample,
    SimConfig,
    Trajectory,
    batch_cost_gradient,
    cost_gradient,
    simulate_policy,
)
from .mpc import ControlSequence, MpcController, OcpConfig, solve_ocp
from .policy import (
    PolicyParams,
    PolicySpec,
    forward,
    freeze_gate,
    normalize_inputs,
    prune_selection,
)
from .sampling import (
    InitialConditionPool,
    NoisePool,
    PoolBuildError,
    RegionData,
    TruncatedMvn,
    build_initial_pool,
    build_noise_pool,
    fit_truncated_mvn,
    iman_conover,
    sobol_points,
)
from .scenarios import (
    DisturbanceSequence,
    EnvelopeData,
    EvalReport,
    control_noise_envelope,
    cumulative_objective,
    estimate_operating_region,
    generate_disturbance_sequence,
    run_table4,
    simulate_closed_loop,
)
from .training import (
    Phase,
    TrainConfig,
    TrainRecord,
    regularized_workflow,
    train,
)

__all__ = [
    "ColumnParams",
    "ColumnState",
    "ControlSequence",
    "Controls",
    "ConvergenceError",
    "CostSample",
    "DisturbanceSequence",
    "EnvelopeData",
    "EvalReport",
    "FeedConditions",
    "InitialConditionPool",
    "MpcController",
    "NoisePool",
    "NoiseSpec",
    "OcpConfig",
    "Phase",
    "PolicyParams",
    "PolicySpec",
    "PoolBuildError",
    "RegionData",
    "SimConfig",
    "SingularHoldupError",
    "TrainConfig",
    "TrainRecord",
    "Trajectory",
    "TruncatedMvn",
    "apply_noise",
    "batch_cost_gradient",
    "build_initial_pool",
    "build_noise_pool",
    "control_noise_envelope",
    "cost_gradient",
    "cumulative_objective",
    "derivatives",
    "estimate_operating_region",
    "fit_truncated_mvn",
    "forward",
    "freeze_gate",
    "generate_disturbance_sequence",
    "iman_conover",
    "internal_flows",
    "measure",
    "normalize_inputs",
    "prune_selection",
    "regularized_workflow",
    "run_table4",
    "simulate_closed_loop",
    "simulate_policy",
    "sobol_points",
    "stage_temperature",
    "steady_state",
    "train",
    "vle",
    "__version__",
]
