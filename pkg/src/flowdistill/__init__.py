"""Teacher-student traffic flow forecasting with a numpy autodiff core."""

from .data import (
    FlowScaler,
    FlowSeries,
    SynthConfig,
    WindowBatch,
    chronological_split,
    extract_windows,
    generate_synthetic,
    load_dataset,
    make_windows,
    write_dataset,
)
from .estimator import FlowDistillRegressor, check_window_batch
from .exceptions import (
    BoundsError,
    ContractError,
    DimensionError,
    FlowDistillError,
    FormatError,
    IngestionError,
    NumericalError,
    SplitError,
)
from .losses import LossWeights, total_loss
from .metrics import compute_metrics, evaluate_predictions
from .model import ModelConfig, forward, init_params, predict
from .pipeline import SplitSpec, neighbors_for, prepare, run_experiment
from .teacher import OracleConfig, OracleTeacher, load_predictions, oracle_teacher, save_predictions
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "BoundsError",
    "ContractError",
    "DimensionError",
    "FlowDistillError",
    "FlowDistillRegressor",
    "FlowScaler",
    "FlowSeries",
    "FormatError",
    "IngestionError",
    "LossWeights",
    "ModelConfig",
    "NumericalError",
    "OracleConfig",
    "OracleTeacher",
    "SplitError",
    "SplitSpec",
    "SynthConfig",
    "TrainConfig",
    "WindowBatch",
    "check_window_batch",
    "chronological_split",
    "compute_metrics",
    "evaluate_predictions",
    "extract_windows",
    "forward",
    "generate_synthetic",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "load_predictions",
    "make_windows",
    "neighbors_for",
    "oracle_teacher",
    "predict",
    "prepare",
    "run_experiment",
    "save_checkpoint",
    "save_predictions",
    "total_loss",
    "train",
    "write_dataset",
]
