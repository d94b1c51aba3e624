"""Crack segmentation for high-resolution survey photos: training-set
construction (resize or pad+split), an FPN with squeeze-excitation
encoders, Dice-loss training, tiled full-resolution inference, and
IoU/Dice evaluation with optional morphological post-processing.
"""

from .core_data import (
    BinaryMask,
    DatasetManifest,
    ManifestError,
    ProbMask,
    RasterImage,
    TileRecord,
    load_image,
    load_mask,
    read_manifest,
    save_image,
    save_mask,
    write_manifest,
)
from .eval_post import (
    MetricsReport,
    PostprocessParams,
    dice_loss_metric,
    dilate_threshold_extend,
    evaluate_dataset,
    iou,
)
from .fpn_net import (
    Checkpoint,
    CrackFPN,
    ModelConfig,
    binarize,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .preprocess import (
    AugmentConfig,
    SplitParams,
    augment,
    build_resize_set,
    build_split_set,
    pad_to_tile_multiple,
    resize_bilinear,
    split_training_tiles,
)
from .synth import SynthConfig, build_synth_set, synth_pair
from .tiled_infer import (
    InferencePlan,
    model_predictor,
    plan_tiles,
    predict_resize_back,
    predict_tiled,
)
from .train_engine import TrainConfig, TrainHistory, fit, soft_dice_loss

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BinaryMask",
    "Checkpoint",
    "CrackFPN",
    "DatasetManifest",
    "InferencePlan",
    "ManifestError",
    "MetricsReport",
    "ModelConfig",
    "PostprocessParams",
    "ProbMask",
    "RasterImage",
    "SplitParams",
    "SynthConfig",
    "TileRecord",
    "TrainConfig",
    "TrainHistory",
    "augment",
    "binarize",
    "build_model",
    "build_resize_set",
    "build_split_set",
    "build_synth_set",
    "dice_loss_metric",
    "dilate_threshold_extend",
    "evaluate_dataset",
    "fit",
    "iou",
    "load_checkpoint",
    "load_image",
    "load_mask",
    "model_predictor",
    "pad_to_tile_multiple",
    "plan_tiles",
    "predict_resize_back",
    "predict_tiled",
    "read_manifest",
    "resize_bilinear",
    "save_checkpoint",
    "save_image",
    "save_mask",
    "soft_dice_loss",
    "split_training_tiles",
    "synth_pair",
    "write_manifest",
]
