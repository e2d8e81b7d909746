"""Shifted-window transformer for retinal severity grading, on a small numpy autodiff engine."""
from .kernels import BACKEND
from .model import ModelConfig, SchemaError, init_params, load_params, model_forward, save_params
from .preprocess import AugmentPolicy, ClaheParams, DatasetManifest, circular_crop, clahe
from .tensor import Tape, Tensor
from .training import Metrics, NonFiniteLoss, TrainConfig, evaluate, train
from .windowing import flops_msa, flops_wmsa, shifted_window_attention

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AugmentPolicy",
    "ClaheParams",
    "DatasetManifest",
    "Metrics",
    "ModelConfig",
    "NonFiniteLoss",
    "SchemaError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "circular_crop",
    "clahe",
    "evaluate",
    "flops_msa",
    "flops_wmsa",
    "init_params",
    "load_params",
    "model_forward",
    "save_params",
    "shifted_window_attention",
    "train",
]
