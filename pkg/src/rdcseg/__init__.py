"""Restricted deformable convolution, fisheye zoom augmentation and multi-task
segmentation training at desk scale, in numpy."""

from .deform import (
    DC,
    FRDC,
    RDC,
    KernelGeometry,
    bilinear_sample,
    deformable_conv2d,
    factorized_rdc_1d,
    make_offset_layer,
    restricted_deformable_conv2d,
)
from .fisheye import (
    ProjectionParams,
    RemapGrid,
    ZoomAugmentConfig,
    build_remap_grid,
    default_base_focal,
    radial_map,
    sample_focal,
    warp_image,
    warp_labels,
)
from .metrics import ConfusionMatrix, mean_iou, per_class_iou
from .ops import batch_normalize, conv2d, relu, softmax_cross_entropy
from .training import DomainNormBank, LossWeights, Schedule, hlw_total_loss, nag_step, poly_lr

__version__ = "0.1.0"

__all__ = [
    "DC", "FRDC", "RDC", "KernelGeometry", "bilinear_sample", "deformable_conv2d", "factorized_rdc_1d",
    "make_offset_layer", "restricted_deformable_conv2d",
    "ProjectionParams", "RemapGrid", "ZoomAugmentConfig", "build_remap_grid", "default_base_focal",
    "radial_map", "sample_focal", "warp_image", "warp_labels",
    "ConfusionMatrix", "mean_iou", "per_class_iou",
    "batch_normalize", "conv2d", "relu", "softmax_cross_entropy",
    "DomainNormBank", "LossWeights", "Schedule", "hlw_total_loss", "nag_step", "poly_lr",
]
