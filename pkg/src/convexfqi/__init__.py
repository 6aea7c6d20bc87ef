"""Fitted Q-iteration with two-layer ReLU Q-functions trained by convex programs."""
from .fqi import FittedQIteration, FqiSchedule, fqi_run, theorem_schedule
from .mdp import TabularMDP, benchmark_mdp, make_feature_map, performance_gap, value_iteration_qstar
from .relu_convex import ConvexReluRegressor, GateSet, ReluNetwork
from .sweep import sample_complexity_sweep

__all__ = [
    "ConvexReluRegressor",
    "FittedQIteration",
    "FqiSchedule",
    "GateSet",
    "ReluNetwork",
    "TabularMDP",
    "benchmark_mdp",
    "fqi_run",
    "make_feature_map",
    "performance_gap",
    "sample_complexity_sweep",
    "theorem_schedule",
    "value_iteration_qstar",
]
__version__ = "0.1.0"
