"""Covariance dynamics of networked agents tracking a drifting state.

Three behaviours are modelled: fixed linear response, myopic best response
and penultimate prediction. The submodules hold the model types, the MVULE
estimator, the round maps, steady-state analysis, Monte Carlo validation and
a command-line experiment runner.
"""

from .errors import (
    CapacityError,
    DegenerateInputError,
    ParameterError,
    ScenarioError,
    SocialLearningError,
    StructuralError,
)
from .estimation import MvuleResult, fuse_two_independent, mvule_weights, woodbury_inverse
from .model import (
    CovarianceState,
    LinearRule,
    ModelParams,
    SocialGraph,
    initial_state,
    neighbor_uniform_rule,
    uniform_clique_rule,
    validate_rule,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "CovarianceState",
    "DegenerateInputError",
    "LinearRule",
    "ModelParams",
    "MvuleResult",
    "ParameterError",
    "ScenarioError",
    "SocialGraph",
    "SocialLearningError",
    "StructuralError",
    "fuse_two_independent",
    "initial_state",
    "mvule_weights",
    "neighbor_uniform_rule",
    "uniform_clique_rule",
    "validate_rule",
    "woodbury_inverse",
    "__version__",
]
