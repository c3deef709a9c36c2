"""Confidence-aware forward reachable tubes for human-driven vehicles.

The package chains four stages into an online safety monitor:

1. `confidence` maintains a Bayesian belief over how well a Gaussian
   control predictor explains the observed human, collapsing it to an
   effective model-trust scalar beta,
2. `prediction` widens predicted control distributions by 1/beta and trims
   them to bounded control sets,
3. `reachability` solves forward reachable tubes of the extended unicycle
   under those bounds with a level-set solver, with a precomputed family
   and a quantized cache for online use, and
4. `safety` turns tubes into world-frame collision sets that a braking
   planner checks the ego vehicle's lane against.

`sim` closes the loop over scripted scenarios and `cli` exposes it all on
the command line.
"""

from .confidence import (
    ConfidenceBelief,
    bayes_update,
    effective_beta,
    epsilon_static,
    likelihood,
    log_likelihood,
)
from .dynamics import (
    AgentState,
    ControlInput,
    Trajectory,
    flow,
    rollout,
    rollout_batch,
    step,
    wrap_angle,
)
from .errors import (
    CFLViolationError,
    ConfigurationError,
    DomainTooSmallError,
    InvalidStateError,
    NumericalFailureError,
    OutOfRangeError,
    ReachguardError,
    ScenarioFormatError,
)
from .prediction import (
    ControlBounds,
    ControlBoundsEndpoints,
    GaussianControlPrediction,
    apply_hard_caps,
    bounds_from_gamma,
    endpoints,
    gamma_half_width,
    interp_bounds,
    scale_covariance,
)
from .reachability import (
    DEFAULT_EPS,
    DEFAULT_GRID,
    DEFAULT_HORIZON,
    FRTFamily,
    GridSpec,
    SolveCache,
    ValueFunction,
    frt_set,
    initial_value,
    load_value_function,
    project_positions,
    save_value_function,
    solve_frt,
)
from .safety import (
    EGO_A_MAX,
    R_COL,
    OccupancyGrid2D,
    collision_check,
    ego_advance,
    minkowski_dilate,
    plan_brake,
    world_occupancy,
)
from .sim import Scenario, SimLog, load_scenario, run, run_pair, scenario_path

__version__ = "0.1.0"

__all__ = [
    "AgentState",
    "CFLViolationError",
    "ConfidenceBelief",
    "ConfigurationError",
    "ControlBounds",
    "ControlBoundsEndpoints",
    "ControlInput",
    "DEFAULT_EPS",
    "DEFAULT_GRID",
    "DEFAULT_HORIZON",
    "DomainTooSmallError",
    "EGO_A_MAX",
    "FRTFamily",
    "GaussianControlPrediction",
    "GridSpec",
    "InvalidStateError",
    "NumericalFailureError",
    "OccupancyGrid2D",
    "OutOfRangeError",
    "R_COL",
    "ReachguardError",
    "Scenario",
    "ScenarioFormatError",
    "SimLog",
    "SolveCache",
    "Trajectory",
    "ValueFunction",
    "apply_hard_caps",
    "bayes_update",
    "bounds_from_gamma",
    "collision_check",
    "effective_beta",
    "ego_advance",
    "endpoints",
    "epsilon_static",
    "flow",
    "frt_set",
    "gamma_half_width",
    "initial_value",
    "interp_bounds",
    "likelihood",
    "load_scenario",
    "scenario_path",
    "load_value_function",
    "log_likelihood",
    "minkowski_dilate",
    "plan_brake",
    "project_positions",
    "rollout",
    "rollout_batch",
    "run",
    "run_pair",
    "save_value_function",
    "scale_covariance",
    "solve_frt",
    "step",
    "world_occupancy",
    "wrap_angle",
]
