"""Incremental few-shot learning with anchor-based output alignment."""

from .autodiff import Tape, Tensor, constant, grad_check
from .data import Dataset, EpisodeSpec, SyntheticSpec, gen_synthetic, sample_episode
from .losses import LossBreakdown, MethodKind, incremental_objective, meta_xent_loss
from .model import AnchorSet, BackboneConfig, ModelSnapshot, ParamStore, init_backbone
from .anchorstore import load_snapshot, save_snapshot
from .trainer import TrainConfig, run_rounds, train_base, train_incremental, train_paragon
from .evaluator import EvalReport, confidence_interval, evaluate

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "BackboneConfig",
    "Dataset",
    "EpisodeSpec",
    "EvalReport",
    "LossBreakdown",
    "MethodKind",
    "ModelSnapshot",
    "ParamStore",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "confidence_interval",
    "constant",
    "evaluate",
    "gen_synthetic",
    "grad_check",
    "incremental_objective",
    "init_backbone",
    "load_snapshot",
    "meta_xent_loss",
    "run_rounds",
    "sample_episode",
    "save_snapshot",
    "train_base",
    "train_incremental",
    "train_paragon",
    "__version__",
]
