from .config import ArchConfig, Batch, LayerConfig, LayerKind, OptimizerConfig, PreprocConfig
from .network import PathLayer, Tape, backward, forward, softmax_xent, validate_path_kinds
from .optim import clip_by_global_norm, global_norm, lr_at, sgd_step
from .preprocess import preprocess

__all__ = [
    "ArchConfig", "Batch", "LayerConfig", "LayerKind", "OptimizerConfig", "PreprocConfig",
    "PathLayer", "Tape", "backward", "forward", "softmax_xent", "validate_path_kinds",
    "clip_by_global_norm", "global_norm", "lr_at", "sgd_step", "preprocess",
]
