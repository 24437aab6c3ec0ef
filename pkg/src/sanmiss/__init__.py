"""Sequentially additive nonignorable missing-data models for categorical data.

Probability tables and f-divergence projections, identification of the
full-data law from observed data plus auxiliary margins, simulation, and
Bayesian inference by Gibbs sampling.
"""

from ._version import __version__
from .data import MISSING, Dataset
from .errors import (ConfigError, ConvergenceError, DominanceError, IdentificationError,
                     InfeasibleConstraintError, SanmissError, ValidationError)
from .inference import (AuxInfo, Chain, FitResult, GibbsConfig, InferenceModelSpec, Params,
                        gibbs_fit, implied_full_table, logistic_conditional_update,
                        observed_loglik)
from .links import FGenerator, Link, f_lambda, get_link
from .oracles import kl_iterative_scaling, project_oracle
from .projection import (ConstraintSet, ProjectionOptions, ProjectionResult,
                         additive_decomposition_residual, dual_problem, f_divergence, project)
from .san import (SUBMODELS, FullDataModel, FullDataReconstruction, SanSpec,
                  assemble_full_data, joint_indicator_moments, make_rng,
                  observational_equivalence, random_joint, random_san_spec,
                  reconstruct_algorithm1, resolve_ordering, simulate)
from .summary import ess, histogram, summarize_posterior
from .tables import (MomentConstraint, ObservedTable, ProbTable, Variable, VariableSpace,
                     build_space, condition, indicator_constraint, make_table, marginalize,
                     materialize, moment)

__all__ = [
    "__version__", "MISSING", "Dataset", "ConfigError", "ConvergenceError", "DominanceError",
    "IdentificationError", "InfeasibleConstraintError", "SanmissError", "ValidationError",
    "AuxInfo", "Chain", "FitResult", "GibbsConfig", "InferenceModelSpec", "Params",
    "gibbs_fit", "implied_full_table", "logistic_conditional_update", "observed_loglik",
    "FGenerator", "Link", "f_lambda", "get_link", "kl_iterative_scaling", "project_oracle",
    "ConstraintSet", "ProjectionOptions", "ProjectionResult",
    "additive_decomposition_residual", "dual_problem", "f_divergence", "project",
    "SUBMODELS", "FullDataModel", "FullDataReconstruction", "SanSpec", "assemble_full_data",
    "joint_indicator_moments", "make_rng", "observational_equivalence", "random_joint",
    "random_san_spec", "reconstruct_algorithm1", "resolve_ordering", "simulate", "ess",
    "histogram",
    "summarize_posterior", "MomentConstraint", "ObservedTable", "ProbTable", "Variable",
    "VariableSpace", "build_space", "condition", "indicator_constraint", "make_table",
    "marginalize", "materialize", "moment",
]
