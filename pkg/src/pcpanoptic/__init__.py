"""Non-neural core of a point-cloud panoptic segmentation pipeline.

Input preparation, instance clustering from per-point predictions,
cross-sphere merging, back-mapping, the evaluation suite and the training
losses, plus a synthetic scene generator that stands in for trained
backbones.
"""

from .cluster import ClusterParams, connected_components, mean_shift, shift_coordinates
from .io import read_ply, read_predictions, read_report, write_ply, write_predictions, write_report
from .losses import cross_entropy, embedding_loss, offset_loss, total_loss
from .merge import FusionAccumulator, accumulate_probs, block_merge, finalize_semantics
from .metrics import MetricsReport, evaluate
from .model import (
    IGNORE_INSTANCE,
    NPM3D_TAXONOMY,
    PipelineConfig,
    PointCloud,
    PredictionSet,
    SegmentationResult,
    Taxonomy,
    canonicalize_instances,
    validate,
)
from .pipeline import run_pipeline
from .sampling import tile_spheres, upsample_labels, voxel_downsample

__all__ = [
    "ClusterParams",
    "FusionAccumulator",
    "IGNORE_INSTANCE",
    "MetricsReport",
    "NPM3D_TAXONOMY",
    "PipelineConfig",
    "PointCloud",
    "PredictionSet",
    "SegmentationResult",
    "Taxonomy",
    "accumulate_probs",
    "block_merge",
    "canonicalize_instances",
    "connected_components",
    "cross_entropy",
    "embedding_loss",
    "evaluate",
    "finalize_semantics",
    "mean_shift",
    "offset_loss",
    "read_ply",
    "read_predictions",
    "read_report",
    "run_pipeline",
    "shift_coordinates",
    "tile_spheres",
    "total_loss",
    "upsample_labels",
    "validate",
    "voxel_downsample",
    "write_ply",
    "write_predictions",
    "write_report",
]

__version__ = "0.1.0"
