"""Bi-temporal change detection with a frequency-aware adapter and flow-warped fusion, on numpy."""
from .checkpoint import checkpoint_load, checkpoint_save
from .dafa import DafaAdapter, DafaConfig
from .data import AugmentFlags, ChangeSample, GenSpec, benchmark, generate, read_dataset, write_dataset
from .encoder import EncoderConfig, SiameseEncoder
from .errors import (ConfigError, DataError, DatasetError, DimensionError, FormatError, GenerationError,
                     TrainingDiverged, UsageError)
from .gradcheck import grad_check
from .head import ChangeDetector, ChangeMap, ModelConfig, PyramidDecoder, loss_ce
from .metrics import Counts, MetricReport, confusion_counts, derive_metrics, evaluate_maps
from .msafa import FlowFusion, MultiscaleIntegration
from .optim import AdamW
from .tensor import Tensor, backward, no_grad
from .train import TrainRunConfig, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "AdamW", "AugmentFlags", "ChangeDetector", "ChangeMap", "ChangeSample", "ConfigError", "Counts",
    "DafaAdapter", "DafaConfig", "DataError", "DatasetError", "DimensionError", "EncoderConfig",
    "FlowFusion", "FormatError", "GenSpec", "GenerationError", "MetricReport", "ModelConfig",
    "MultiscaleIntegration", "PyramidDecoder", "SiameseEncoder", "Tensor", "TrainRunConfig",
    "TrainingDiverged", "UsageError", "backward", "benchmark", "checkpoint_load", "checkpoint_save",
    "confusion_counts", "derive_metrics", "evaluate_maps", "generate", "grad_check", "load_model",
    "loss_ce", "no_grad", "read_dataset", "save_model", "write_dataset",
]
