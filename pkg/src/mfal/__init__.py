"""Multifidelity active-learning subset simulation for rare-event failure probabilities."""

from .active_learning import LearningEvaluator, ULearningConfig, evaluate_with_learning, u_multifidelity, u_single_fidelity
from .benchmarks import BenchmarkProblem, builtin_problems, get_problem, mc_oracle
from .config import ConfigError, Method, RunConfig, load_config, parse_config
from .distributions import InputSpace, LogNormal, MarginalDistribution, Normal, Uniform
from .gp import GpSurrogate, KernelParams, fit, optimize_hyperparameters, predict
from .multifidelity import CostFunction, ModelEnsemble, select_and_correct, selection_weights
from .runner import execute, replicate, run
from .subset import RunResult, SubsetConfig, subset_simulation

__all__ = [
    "BenchmarkProblem",
    "ConfigError",
    "CostFunction",
    "GpSurrogate",
    "InputSpace",
    "KernelParams",
    "LearningEvaluator",
    "LogNormal",
    "MarginalDistribution",
    "Method",
    "ModelEnsemble",
    "Normal",
    "RunConfig",
    "RunResult",
    "SubsetConfig",
    "ULearningConfig",
    "Uniform",
    "builtin_problems",
    "evaluate_with_learning",
    "execute",
    "fit",
    "get_problem",
    "load_config",
    "mc_oracle",
    "optimize_hyperparameters",
    "parse_config",
    "predict",
    "replicate",
    "run",
    "select_and_correct",
    "selection_weights",
    "subset_simulation",
    "u_multifidelity",
    "u_single_fidelity",
]
