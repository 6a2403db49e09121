"""Multimodal origin-destination flow forecasting with intra-modal graph
encoders, cross-modal fusion and a numpy reverse-mode autodiff engine."""

from .config import ModelConfig
from .data import MultiModalDataset, SyntheticConfig, generate_synthetic, load_dataset, save_dataset
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FTNError,
    IngestionError,
    NumericError,
    TrainingError,
)
from .model import FusionTransNet
from .train import evaluate, ha_baseline, report_on_split, run_ablation, train

__all__ = [
    "ConfigError", "ContractError", "DataError", "DimensionError", "FTNError", "FusionTransNet",
    "IngestionError", "ModelConfig", "MultiModalDataset", "NumericError", "SyntheticConfig",
    "TrainingError", "evaluate", "generate_synthetic", "ha_baseline", "load_dataset",
    "report_on_split", "run_ablation", "save_dataset", "train",
]
__version__ = "0.1.0"
