"""Analog circuit sizing: a Bayesian-optimization start point followed by
PPO with a graph-attention policy, on behavioral op-amp models."""

from .circuits import BENCHMARKS, build_benchmark
from .errors import (CheckpointError, ConfigError, EvaluationError, FitError, InvariantError, SizingError,
                     UpdateError, VanguardError)

__version__ = "0.1.0"

__all__ = ["BENCHMARKS", "build_benchmark", "SizingError", "ConfigError", "InvariantError", "EvaluationError",
           "FitError", "VanguardError", "CheckpointError", "UpdateError"]
