"""Hyperbolic hierarchical alignment of histology images and spatial transcriptomics."""

from .data import Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .errors import ContractViolation, FormatError, UndefinedApertureError
from .evalx import MetricsReport, evaluate
from .experiments import ARMS, AblationReport, run_ablation
from .train import TrainConfig, evaluate_split, grad_check, prepare, train

__version__ = "0.1.0"

__all__ = [
    "ARMS", "AblationReport", "ContractViolation", "Dataset", "FormatError", "MetricsReport",
    "SynthConfig", "TrainConfig", "UndefinedApertureError", "evaluate", "evaluate_split",
    "generate_synthetic", "grad_check", "load_dataset", "prepare", "run_ablation", "save_dataset",
    "train",
]
