"""Dynamic backstepping workbench for pure-feedback cascade systems.

Controller synthesis with stativized (virtual) controls, closed-loop
simulation with Lyapunov descent monitoring, and a set of worked
scenarios runnable from the command line (``dynastep run``, ``plot``,
``verify``).
"""

from .controller import (
    AugmentedState, ControllerSpec, GainConditionReport, NonFiniteError,
    RefSample, ReferenceSignal, ResidualScaling, SecondOrderReference,
    SingularJacobianError, SingularMatrixError, StateRates,
    check_gain_conditions, closed_loop_rhs, estimate_lipschitz, eval_h1,
    eval_h2, h2_partials, kappa2, scaled_residual, strict_level_control,
    u_dot, x2d_dot,
)
from .closedloop import build_closed_loop
from .lyapunov import (
    DecreaseReport, LyapunovSample, TrajectoryTooShortError, eval_V,
    monitor_decrease,
)
from .model import (
    CascadeModel, DomainBox, LevelDynamics, LevelKind, fd_jacobian,
    pure_level, strict_level,
)
from .scenarios import (
    SCENARIOS, Scenario, ScenarioConfigError, build_scenario,
    example1_stabilization, example2_jet_engine, example3_tracking,
    singular_scalar_example, strict_baseline_example,
)
from .sim import (
    SimConfig, StepUnderflowError, Termination, Trajectory, rk4_step,
    rk45_step, simulate,
)

__version__ = "0.1.0"
