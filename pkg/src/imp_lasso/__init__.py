"""Invariant prediction under response interventions via a partially penalized Lasso."""

from .features import ModuleDesign, ModuleId, build_test_design, build_train_design, enumerate_modules
from .scm import DataBundle, EnvParams, ScmModel, derive_rng, perturb_environments, random_model, sample_environment
from .solver import GimpModel, PartialLassoProblem, cross_validate, lambda_path, solve_partial_lasso

__version__ = "0.1.0"
