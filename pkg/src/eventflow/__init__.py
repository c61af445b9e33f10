"""Non-autoregressive flow-matching generative models for temporal point processes."""

__version__ = "0.1.0"

from .flow import CountDistribution, CouplingDraw, FlowState
from .metrics import mare, mmd, sequence_distance, single_step_mse
from .sequences import DatasetSplits, EventSequence, Normalizer, TPPDataset
from .synthetic import SimulatorSpec, simulate
from .training import TrainConfig, train

__all__ = [
    "CountDistribution",
    "CouplingDraw",
    "DatasetSplits",
    "EventSequence",
    "FlowState",
    "Normalizer",
    "SimulatorSpec",
    "TPPDataset",
    "TrainConfig",
    "mare",
    "mmd",
    "sequence_distance",
    "simulate",
    "single_step_mse",
    "train",
]
