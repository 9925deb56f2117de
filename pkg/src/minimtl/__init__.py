"""Desk-scale multi-task learning: weighting strategies, sharing architectures, a unified trainer."""

from .architecture import ARCHITECTURES, ArchSpec, build, count_parameters, shared_representation
from .data import gen_multi_input, gen_single_input
from .tensor import Tensor, backward, finite_diff_check
from .trainer import RunReport, TrainConfig, run_experiment
from .weighting import STRATEGIES, AggregationResult, GradientBundle, WeightingState, aggregate

__all__ = [
    "ARCHITECTURES", "STRATEGIES", "ArchSpec", "AggregationResult", "GradientBundle", "RunReport",
    "Tensor", "TrainConfig", "WeightingState", "aggregate", "backward", "build", "count_parameters",
    "finite_diff_check", "gen_multi_input", "gen_single_input", "run_experiment", "shared_representation",
]
