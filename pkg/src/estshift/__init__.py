"""Batch normalization estimation shift: a numpy micro-framework and experiment harness."""

from .errors import (ConfigError, DataError, DivergenceError, EstShiftError, ShapeError)
from .tensor import RngState, moments
from .normalization import BatchNormState, NormSpec, PartitionScheme
from .networks import Network, NetworkSpec, build
from .analysis import EsmRecord, PopulationStats, esm, esm_records, expected_population_stats
from .data import Dataset, load_mnist, load_mnist_idx, subsample
from .io import emit_csv, load_checkpoint, save_checkpoint
from .experiments import ExperimentConfig, config_for, run_experiment, train

__all__ = [
    "ConfigError", "DataError", "DivergenceError", "EstShiftError", "ShapeError",
    "RngState", "moments", "BatchNormState", "NormSpec", "PartitionScheme",
    "Network", "NetworkSpec", "build", "EsmRecord", "PopulationStats", "esm",
    "esm_records", "expected_population_stats", "Dataset", "load_mnist", "load_mnist_idx",
    "subsample", "emit_csv", "load_checkpoint", "save_checkpoint", "ExperimentConfig",
    "config_for", "run_experiment", "train",
]
