"""Importance sampling and multilevel estimators for occupation-time tail probabilities."""

from .errors import (BadFit, ConfigError, DegenerateFit, HypothesisViolation, InvalidParams,
                     InvalidRates, NonFiniteState, OccupationError, QuadratureFailure,
                     ScheduleExhausted, SingularTridiagonal, UnstableSolve)
from .paths import (DiscretizationLevel, OccupationProblem, RandomStream, SdeModel,
                    simulate_pairs_cl, simulate_pairs_sll, simulate_paths)
from .rice import RiceParams, project, rice_model
from .smoothing import SmoothingParams, f_smooth, g_smooth

__version__ = "0.1.0"
