"""Adaptive robust MPC with online uncertainty cancellation.

Estimate an unknown feature-linear dynamics term online, cancel its
matched component through the input, and run tube MPC with affine
disturbance feedback over the shrinking residual uncertainty.
"""

from . import (
    controller,
    estimation,
    geometry,
    invariant,
    optimization,
    robust_mpc,
    simulation,
    uncertainty_sets,
)
from .controller import ControllerConfig, ce_policy, make_controller
from .estimation import (
    AnalyticFeatureMap,
    BLRState,
    EmptyFeasibleSetError,
    LinearParamModel,
    LoadedNetworkFeatureMap,
    SetMembershipState,
)
from .geometry import Box, EmptySetError, Polytope
from .robust_mpc import CompiledMPC, MPCSolution, PrestabilizedTube, RobustMPCProblem
from .simulation import (
    Plant,
    RunLog,
    feasible_envelope,
    make_cruise,
    make_double_integrator,
    make_quadrotor,
    run_episode,
)
from .uncertainty_sets import BudgetTracker, UncertaintyBudget

__version__ = "0.1.0"
