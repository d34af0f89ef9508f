"""Koopman operator learning by alternating gradient descent.

Centralized training (:mod:`altkoop.trainer`), block-partitioned training
over simulated nodes (:mod:`altkoop.distributed`), ground-truth systems
(:mod:`altkoop.dynamics`) and multi-step prediction (:mod:`altkoop.rollout`).
"""

from .activations import ActivationKind, bounds
from .dictionary import BlockDictionary, DictionaryParams, init_params
from .errors import (DivergenceError, DomainError, IntegrationError, KoopmanError, ProtocolError,
                     ShapeError, UsageError)
from .objective import BoundConfig, LiftCache, Normalization, TrajectoryDataset
from .trainer import Schedule, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ActivationKind", "bounds", "BlockDictionary", "DictionaryParams", "init_params",
    "DivergenceError", "DomainError", "IntegrationError", "KoopmanError", "ProtocolError",
    "ShapeError", "UsageError", "BoundConfig", "LiftCache", "Normalization", "TrajectoryDataset",
    "Schedule", "TrainConfig", "train",
]
