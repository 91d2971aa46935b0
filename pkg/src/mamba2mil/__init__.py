"""Multi-branch state-space-duality MIL classifier for whole-slide feature bags."""

from .data import FeatureBag, SyntheticSpec, generate_synthetic, load_bags, make_splits, save_bags
from .metrics import accuracy, aggregate, roc_auc_binary, roc_auc_multiclass
from .model import ModelConfig, backward, forward, init_params, load_checkpoint, predict_proba, save_checkpoint
from .seq_transform import Ordering, inverse_reorder, reorder, square
from .ssd import SsdBlockConfig, ssd_chunked_scan, ssd_dual_quadratic, ssd_recurrence
from .training import TrainConfig, gradient_check, train

__version__ = "0.1.0"

__all__ = [
    "FeatureBag", "SyntheticSpec", "generate_synthetic", "load_bags", "make_splits", "save_bags",
    "accuracy", "aggregate", "roc_auc_binary", "roc_auc_multiclass",
    "ModelConfig", "backward", "forward", "init_params", "load_checkpoint", "predict_proba",
    "save_checkpoint", "Ordering", "inverse_reorder", "reorder", "square", "SsdBlockConfig",
    "ssd_chunked_scan", "ssd_dual_quadratic", "ssd_recurrence", "TrainConfig", "gradient_check",
    "train",
]
