"""FPN segmentation network: encoders, pyramid decoder, assembly head,
and the versioned checkpoint format."""

from .blocks import ResidualSEBlock, SEBlock, SEResNeXtBottleneck
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_encoder_weights,
    read_checkpoint,
    save_checkpoint,
    save_encoder_weights,
    write_checkpoint,
)
from .encoders import ENCODERS, SEResNeXt50Encoder, TinyEncoder, build_encoder
from .model import (
    STRIDES,
    CrackFPN,
    ModelConfig,
    PyramidFeatures,
    WOp,
    binarize,
    build_model,
    top_down_merge,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "CrackFPN",
    "ENCODERS",
    "ModelConfig",
    "PyramidFeatures",
    "ResidualSEBlock",
    "SEBlock",
    "SEResNeXt50Encoder",
    "SEResNeXtBottleneck",
    "STRIDES",
    "TinyEncoder",
    "WOp",
    "binarize",
    "build_encoder",
    "build_model",
    "load_checkpoint",
    "load_encoder_weights",
    "read_checkpoint",
    "save_checkpoint",
    "save_encoder_weights",
    "top_down_merge",
    "write_checkpoint",
]
