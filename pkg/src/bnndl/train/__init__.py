"""Optimizers, data ingestion, configuration, checkpoints and the training loop."""

from .config import RunConfig, dump_config, load_config, parse_config
from .data import Dataset, Normalizer, ingest_cifar10, ingest_mnist, ingest_svhn_mat_converted
from .optim import Optimizer, OptimizerConfig
from .runner import RunRecord, evaluate, run, sweep, train

__all__ = [
    "Dataset", "Normalizer", "Optimizer", "OptimizerConfig", "RunConfig", "RunRecord",
    "dump_config", "evaluate", "ingest_cifar10", "ingest_mnist", "ingest_svhn_mat_converted",
    "load_config", "parse_config", "run", "sweep", "train",
]
