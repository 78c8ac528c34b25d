"""Density-dependent age-structured population dynamics.

Model rules, a characteristic-line solver, reproduction numbers and
equilibria, linear stability, a priori bounds and a scenario harness.
"""

from .analysis import (
    EquilibriumPoint,
    equilibrium_profile,
    find_equilibria,
    net_reproduction_rate,
    solve_malthusian,
    upper_reproduction_rate,
    weighted_reproduction_rate,
)
from .bounds import (
    AlleeThreshold,
    BoundCertificate,
    allee_threshold,
    check_extinction_trigger,
    compute_bound,
    psi_inverse,
)
from .exceptions import (
    AgestructError,
    BracketError,
    ConvergenceError,
    EnvelopeError,
    EvaluationError,
    InconclusiveError,
    ModelLoadError,
    NegativeValueError,
    NumericalError,
    ValidationFailed,
)
from .experiments import OutcomeRecord, Scenario, load_scenario, run_scenario, sweep
from .functions import AgeFunction, BaselineHazard, SeparableRate, XFunction
from .model import ModelSpec, ProbeGrid, load_model, model_from_dict, validate
from .solver import GridSpec, SolverState, Trajectory, renewal_rho, simulate, step_residual
from .stability import (
    CharacteristicSystem,
    Rect,
    StabilityReport,
    build_characteristic,
    char_det,
    locate_roots,
    trivial_dominant_root,
)

__version__ = "0.1.0"
