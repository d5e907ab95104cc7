"""Distributionally robust neural posterior estimation."""

from . import diagnostics, diffcore, flows, objectives, selection, simulators
from .errors import DimError, DomainError, DronpeError, InvalidActNorm, NonFiniteEvaluation, SimWarning
from .flows import FlowModel, load_checkpoint, make_flow, save_checkpoint
from .objectives import EarlyStop, TrainConfig, train
from .selection import EpsSearchConfig, select_epsilon
from .simulators import PairDataset, generate_dataset, load_dataset, save_dataset

__version__ = "0.1.0"

__all__ = [
    "diagnostics",
    "diffcore",
    "flows",
    "objectives",
    "selection",
    "simulators",
    "DimError",
    "DomainError",
    "DronpeError",
    "InvalidActNorm",
    "NonFiniteEvaluation",
    "SimWarning",
    "FlowModel",
    "load_checkpoint",
    "make_flow",
    "save_checkpoint",
    "EarlyStop",
    "TrainConfig",
    "train",
    "EpsSearchConfig",
    "select_epsilon",
    "PairDataset",
    "generate_dataset",
    "load_dataset",
    "save_dataset",
    "__version__",
]
