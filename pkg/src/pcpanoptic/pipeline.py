"""End-to-end post-processing: downsample, tile, fuse, cluster, merge, back-map, score.

Backbone inference is replaced by slicing a whole-cloud :class:`PredictionSet`
per sphere. The stages are exposed individually so the CLI can run them one
at a time with identical results.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cluster import ClusterParams, cluster_embeddings, cluster_offsets
from .merge import FusionAccumulator, accumulate_probs, block_merge, finalize_semantics
from .metrics import MetricsReport, evaluate
from .model import PipelineConfig, PointCloud, PredictionSet, SegmentationResult, Taxonomy, majority_semantics
from .sampling import tile_spheres, upsample_labels, voxel_downsample

log = logging.getLogger(__name__)

MODES = ("embed", "offset")


class CountMismatchError(ValueError):
    """Prediction file and cloud disagree on the number of points."""


@dataclass
class PipelineOutput:
    sub_cloud: PointCloud
    kept: np.ndarray
    sub_result: SegmentationResult
    result: SegmentationResult
    report: Optional[MetricsReport]


def align_predictions(preds: PredictionSet, n_full: int, kept, aligned: str = "full") -> PredictionSet:
    """Predictions for the downsampled points.

    ``aligned="full"`` means the file has one row per original point and is
    sliced with ``kept``; ``aligned="sub"`` means it already matches the
    downsampled cloud.
    """
    if aligned == "full":
        if len(preds) != n_full or (len(kept) and np.max(kept) >= len(preds)):
            raise CountMismatchError(f"prediction file has {len(preds)} rows, cloud has {n_full} points")
        return preds.subset(kept)
    if aligned == "sub":
        if len(preds) != len(kept):
            raise CountMismatchError(f"prediction file has {len(preds)} rows, downsampled cloud has {len(kept)} points")
        return preds
    raise ValueError(f"aligned must be 'full' or 'sub', got {aligned!r}")


def fuse_semantics(n_points, spheres, preds: PredictionSet):
    """Average the per-sphere class probabilities and take the argmax."""
    if preds.class_probs is None:
        raise ValueError("predictions carry no class probabilities")
    acc = FusionAccumulator(n_points, preds.num_classes)
    for sphere in spheres:
        accumulate_probs(acc, sphere.point_indices, preds.class_probs[sphere.point_indices])
    return finalize_semantics(acc)


def cluster_spheres(cloud: PointCloud, spheres, preds: PredictionSet, semantic, taxonomy: Taxonomy,
                    cfg: PipelineConfig, mode: str = "embed"):
    """Local instance ids per sphere, computed on things points only."""
    params = ClusterParams.from_config(cfg)
    things = taxonomy.is_thing(semantic)
    if mode == "embed" and preds.embeddings is None:
        raise ValueError("embed mode needs embeddings in the prediction file")
    if mode == "offset" and preds.offsets is None:
        raise ValueError("offset mode needs offsets in the prediction file")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    local = []
    for sphere in spheres:
        idx = sphere.point_indices
        if mode == "embed":
            lab = cluster_embeddings(preds.embeddings[idx], semantic[idx], things[idx], params)
        else:
            lab = cluster_offsets(cloud.positions[idx], preds.offsets[idx], semantic[idx], things[idx], params)
        local.append(lab)
    return local


def merge_spheres(n_points, n_classes, spheres, local_labels, semantic, th_bm) -> SegmentationResult:
    """BlockMerging over spheres in their given order, then a per-instance majority vote."""
    acc = FusionAccumulator(n_points, n_classes)
    for sphere, lab in zip(spheres, local_labels):
        block_merge(acc, sphere.point_indices, lab, th_bm)
    instance = acc.global_instance
    return SegmentationResult(majority_semantics(semantic, instance), instance)


def run_pipeline(cloud: PointCloud, preds: PredictionSet, cfg: PipelineConfig, taxonomy: Taxonomy,
                 mode: str = "embed", aligned: str = "full") -> PipelineOutput:
    """Full post-processing chain; scores the result when ``cloud`` carries labels."""
    sub, kept = voxel_downsample(cloud, cfg.voxel_size, cfg.seed)
    sub_preds = align_predictions(preds, len(cloud), kept, aligned)
    if sub_preds.class_probs is not None and sub_preds.num_classes != taxonomy.num_classes:
        raise ValueError(f"predictions have {sub_preds.num_classes} classes, taxonomy has {taxonomy.num_classes}")
    spheres = tile_spheres(sub, cfg.radius, cfg.stride, cfg.feature_dim)
    log.info("%d points -> %d after downsampling, %d spheres", len(cloud), len(sub), len(spheres))
    semantic = fuse_semantics(len(sub), spheres, sub_preds)
    local = cluster_spheres(sub, spheres, sub_preds, semantic, taxonomy, cfg, mode)
    sub_result = merge_spheres(len(sub), taxonomy.num_classes, spheres, local, semantic, cfg.th_bm)
    result = upsample_labels(cloud, sub, sub_result, cfg.th_d, cfg.rescue_factor)
    report = None
    if cloud.semantic is not None and cloud.instance is not None:
        report = evaluate(SegmentationResult.from_cloud(cloud), result, taxonomy)
    return PipelineOutput(sub, kept, sub_result, result, report)
