"""Fusing the predictions of overlapping spheres.

Class probabilities are summed and averaged per point. Instance ids are
reconciled sphere by sphere with an IoU-thresholded BlockMerging: spheres must
be fed in a fixed order (lexicographic center order from
:func:`pcpanoptic.sampling.tile_spheres`), because earlier writes win.
"""

from __future__ import annotations

import numpy as np

from .model import IGNORE_INSTANCE


class FusionAccumulator:
    """Running per-point state while spheres are folded in.

    Attributes
    ----------
    prob_sum : (N, C) float array
    count : (N,) int array, number of spheres that visited each point
    global_instance : (N,) int array, ``-1`` until a merge assigns an id
    instance_size : list of point counts per global id
    """

    def __init__(self, n_points, n_classes):
        self.prob_sum = np.zeros((n_points, n_classes), dtype=np.float64)
        self.count = np.zeros(n_points, dtype=np.int64)
        self.global_instance = np.full(n_points, IGNORE_INSTANCE, dtype=np.int64)
        self.instance_size = []

    @property
    def n_points(self):
        return len(self.count)

    @property
    def next_global_id(self):
        return len(self.instance_size)

    def mean_probs(self):
        out = np.zeros_like(self.prob_sum)
        seen = self.count > 0
        out[seen] = self.prob_sum[seen] / self.count[seen, None]
        return out


def _check_indices(acc, idx):
    idx = np.asarray(idx, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= acc.n_points):
        bad = idx[(idx < 0) | (idx >= acc.n_points)][0]
        raise IndexError(f"sphere index {bad} out of range for {acc.n_points} points")
    return idx


def accumulate_probs(acc: FusionAccumulator, sphere_indices, sphere_probs):
    """Add one sphere's class probabilities into ``acc`` (in place; returns ``acc``)."""
    idx = _check_indices(acc, sphere_indices)
    probs = np.asarray(sphere_probs, dtype=np.float64)
    if probs.shape != (len(idx), acc.prob_sum.shape[1]):
        raise ValueError(f"probs shape {probs.shape} does not match {len(idx)} indices")
    # np.add.at so that repeated indices inside one sphere accumulate
    np.add.at(acc.prob_sum, idx, probs)
    np.add.at(acc.count, idx, 1)
    return acc


def finalize_semantics(acc: FusionAccumulator):
    """Argmax of the averaged probabilities; ties go to the lowest class id."""
    unvisited = np.flatnonzero(acc.count == 0)
    if len(unvisited):
        raise ValueError(f"point {unvisited[0]} was not covered by any sphere")
    return np.argmax(acc.prob_sum / acc.count[:, None], axis=1).astype(np.int64)


def block_merge(acc: FusionAccumulator, sphere_indices, local_instances, th_bm=0.01):
    """Fold one sphere's local instance ids into the global ids of ``acc``.

    Local instances are visited in ascending id. For each, the IoU against
    every global instance present on its already-labeled points is computed
    over the points labeled so far; the best one (ties to the lower global
    id) is adopted if its IoU is at least ``th_bm``, otherwise a fresh global
    id is opened. Only unlabeled points are written, so the first label a
    point receives is final. Local ``-1`` points are left untouched.
    """
    idx = _check_indices(acc, sphere_indices)
    local = np.asarray(local_instances, dtype=np.int64)
    if local.shape != idx.shape:
        raise ValueError("local_instances must have one entry per sphere index")
    g = acc.global_instance
    for lid in np.unique(local[local >= 0]):
        pts = np.unique(idx[local == lid])
        current = g[pts]
        labeled = current >= 0
        free = pts[~labeled]
        target = -1
        if labeled.any():
            cand, inter = np.unique(current[labeled], return_counts=True)
            sizes = np.asarray(acc.instance_size, dtype=np.int64)[cand]
            iou = inter / (len(pts) + sizes - inter)
            best = int(np.argmax(iou))  # cand is sorted, so ties pick the lower id
            if iou[best] >= th_bm:
                target = int(cand[best])
        if len(free) == 0:
            continue
        if target < 0:
            target = acc.next_global_id
            acc.instance_size.append(0)
        g[free] = target
        acc.instance_size[target] += len(free)
    return acc
