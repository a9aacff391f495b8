"""Fair personalized federated learning simulator with a discrete theory oracle."""

from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .data import ClientDataset, DataError, PartitionSpec, Sample, SynthSpec
from .fairness import FairnessPenaltyConfig
from .fedengine import ALGORITHMS, DivergenceError, FairFLConfig, evaluate, train
from .metrics import MetricsRecord, SummaryRow, summarize
from .model import ModelParams

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "ClientDataset",
    "ConfigError",
    "DataError",
    "DivergenceError",
    "ExperimentConfig",
    "FairFLConfig",
    "FairnessPenaltyConfig",
    "MetricsRecord",
    "ModelParams",
    "PartitionSpec",
    "Sample",
    "SummaryRow",
    "SynthSpec",
    "evaluate",
    "load_config",
    "parse_config",
    "summarize",
    "train",
]
