"""Semantic, instance and panoptic evaluation of point-wise segmentations.

Conventions
-----------
* Ground-truth points carrying the taxonomy's ignore label are dropped before
  any counting.
* A predicted (or ground-truth) instance takes the majority class of its
  points, ties to the lowest class id. Stuff classes are evaluated as one
  segment per class made of every point with that class.
* A prediction is valid when its matched IoU is at least the threshold
  (0.5). Matching is one-to-one, greedy by descending IoU with ties broken
  by ascending ground-truth id and then prediction id.
* A class with neither ground truth nor predictions is left out of every
  class mean. Per-class ratios with a zero denominator are ``None``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import IGNORE_INSTANCE, SegmentationResult, Taxonomy, majority_semantics

VALID_IOU = 0.5


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _f1(p, r):
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass
class MetricsReport:
    """Nested per-class and aggregate scores; see :meth:`to_dict` for the layout."""

    semantic: dict
    instance: dict
    panoptic: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"semantic": self.semantic, "instance": self.instance, "panoptic": self.panoptic, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["semantic"], d["instance"], d["panoptic"], d.get("meta", {}))


# ----------------------------------------------------------------------- semantic


def semantic_metrics(gt_sem, pred_sem, taxonomy: Taxonomy) -> dict:
    gt = np.asarray(gt_sem, dtype=np.int64)
    pred = np.asarray(pred_sem, dtype=np.int64)
    if gt.shape != pred.shape:
        raise ValueError(f"length mismatch: {gt.shape} vs {pred.shape}")
    if taxonomy.ignore_label is not None:
        keep = gt != taxonomy.ignore_label
        gt, pred = gt[keep], pred[keep]
    c = taxonomy.num_classes
    in_gt = (gt >= 0) & (gt < c)
    in_pred = (pred >= 0) & (pred < c)
    gt_count = np.bincount(gt[in_gt], minlength=c)
    pre_count = np.bincount(pred[in_pred], minlength=c)
    tp = np.bincount(gt[in_gt & (gt == pred)], minlength=c)
    denom = gt_count + pre_count - tp
    iou = [float(tp[i] / denom[i]) if denom[i] > 0 else None for i in range(c)]
    n = len(gt)
    return {
        "oacc": float(tp.sum() / n) if n else None,
        "miou": _mean(iou),
        "per_class_iou": iou,
        "n_skipped_classes": int(sum(v is None for v in iou)),
    }


# ---------------------------------------------------------------------- instances


def build_instances(result: SegmentationResult, taxonomy: Taxonomy, keep=None) -> dict:
    """Per-class lists of point-index arrays.

    Things classes hold one array per instance (ascending instance id); stuff
    classes hold at most one array with all points of that class. ``keep``
    optionally restricts evaluation to a subset of points.
    """
    if keep is None:
        keep = np.ones(len(result), dtype=bool)
    inst = np.where(keep, result.instance, IGNORE_INSTANCE)
    sem = majority_semantics(result.semantic, inst)
    out = {c: [] for c in range(taxonomy.num_classes)}
    stuff = taxonomy.is_stuff(sem)
    thing_pts = np.flatnonzero(keep & taxonomy.is_thing(sem) & (inst != IGNORE_INSTANCE))
    if len(thing_pts):
        ids, inv = np.unique(inst[thing_pts], return_inverse=True)
        order = np.argsort(inv, kind="stable")
        bounds = np.cumsum(np.bincount(inv.reshape(-1), minlength=len(ids)))[:-1]
        for group in np.split(thing_pts[order], bounds):
            out[int(sem[group[0]])].append(group)
    for c in taxonomy.stuff:
        pts = np.flatnonzero(keep & stuff & (sem == c))
        if len(pts):
            out[int(c)].append(pts)
    return out


@dataclass
class Matching:
    """maxIoU bookkeeping for one class."""

    iou: np.ndarray                 # (n_gt, n_pred)
    gt_sizes: np.ndarray
    pred_sizes: np.ndarray
    max_iou_gt: np.ndarray
    max_iou_pred: np.ndarray
    best_pred_for_gt: np.ndarray    # -1 when there is no prediction
    best_gt_for_pred: np.ndarray

    @property
    def n_gt(self):
        return len(self.gt_sizes)

    @property
    def n_pred(self):
        return len(self.pred_sizes)

    def matches(self, threshold=VALID_IOU):
        """One-to-one ``(gt, pred, iou)`` pairs with ``iou >= threshold``."""
        if self.iou.size == 0:
            return []
        g, p = np.nonzero(self.iou >= threshold)
        vals = self.iou[g, p]
        order = np.lexsort((p, g, -vals))
        used_g, used_p, out = set(), set(), []
        for k in order:
            if g[k] in used_g or p[k] in used_p:
                continue
            used_g.add(g[k])
            used_p.add(p[k])
            out.append((int(g[k]), int(p[k]), float(vals[k])))
        return out


def match_max_iou(gt_instances, pred_instances) -> Matching:
    """IoU of every ground-truth / predicted pair plus the maxIoU in both directions."""
    gt_sizes = np.array([len(g) for g in gt_instances], dtype=np.int64)
    pred_sizes = np.array([len(p) for p in pred_instances], dtype=np.int64)
    inter = np.zeros((len(gt_sizes), len(pred_sizes)), dtype=np.int64)
    if len(gt_sizes) and len(pred_sizes):
        g_idx = np.concatenate(gt_instances)
        g_lab = np.repeat(np.arange(len(gt_sizes)), gt_sizes)
        p_idx = np.concatenate(pred_instances)
        p_lab = np.repeat(np.arange(len(pred_sizes)), pred_sizes)
        common, gi, pi = np.intersect1d(g_idx, p_idx, assume_unique=True, return_indices=True)
        np.add.at(inter, (g_lab[gi], p_lab[pi]), 1)
    union = gt_sizes[:, None] + pred_sizes[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    if iou.size:
        max_gt, best_p = iou.max(axis=1), iou.argmax(axis=1)
        max_p, best_g = iou.max(axis=0), iou.argmax(axis=0)
    else:
        max_gt = np.zeros(len(gt_sizes))
        best_p = np.full(len(gt_sizes), -1)
        max_p = np.zeros(len(pred_sizes))
        best_g = np.full(len(pred_sizes), -1)
    return Matching(iou, gt_sizes, pred_sizes, max_gt, max_p, best_p, best_g)


def match_classes(gt: SegmentationResult, pred: SegmentationResult, taxonomy: Taxonomy) -> dict:
    """:class:`Matching` per class id after dropping ignore-labeled points."""
    keep = np.ones(len(gt), dtype=bool)
    if taxonomy.ignore_label is not None:
        keep = gt.semantic != taxonomy.ignore_label
    gt_sets = build_instances(gt, taxonomy, keep)
    pred_sets = build_instances(pred, taxonomy, keep)
    return {c: match_max_iou(gt_sets[c], pred_sets[c]) for c in range(taxonomy.num_classes)}


def instance_metrics(matching: dict, taxonomy: Taxonomy, threshold=VALID_IOU) -> dict:
    per_class = {}
    for c in taxonomy.things:
        m = matching[int(c)]
        name = taxonomy.class_names[c]
        if m.n_gt == 0 and m.n_pred == 0:
            per_class[name] = {"cov": None, "wcov": None, "prec": None, "rec": None,
                               "n_gt": 0, "n_pred": 0, "n_val": 0}
            continue
        n_val = len(m.matches(threshold))
        cov = wcov = rec = prec = None
        if m.n_gt:
            cov = float(m.max_iou_gt.mean())
            w = m.gt_sizes / m.gt_sizes.sum()
            wcov = float((w * m.max_iou_gt).sum())
            rec = n_val / m.n_gt
        if m.n_pred:
            prec = n_val / m.n_pred
        per_class[name] = {"cov": cov, "wcov": wcov, "prec": prec, "rec": rec,
                           "n_gt": m.n_gt, "n_pred": m.n_pred, "n_val": n_val}
    col = lambda k: [v[k] for v in per_class.values()]
    mprec, mrec = _mean(col("prec")), _mean(col("rec"))
    return {
        "mcov": _mean(col("cov")),
        "mwcov": _mean(col("wcov")),
        "mprec": mprec,
        "mrec": mrec,
        "f1": _f1(mprec, mrec),
        "per_class": per_class,
    }


def panoptic_metrics(matching: dict, taxonomy: Taxonomy, threshold=VALID_IOU) -> dict:
    per_class = {}
    for c in range(taxonomy.num_classes):
        m = matching[c]
        name = taxonomy.class_names[c]
        if m.n_gt == 0 and m.n_pred == 0:
            per_class[name] = {"pq": None, "sq": None, "rq": None, "pq_dagger": None}
            continue
        tp_ious = [iou for _, _, iou in m.matches(threshold)]
        tp = len(tp_ious)
        sq = float(np.mean(tp_ious)) if tp else 0.0
        rq = tp / (tp + 0.5 * (m.n_pred - tp) + 0.5 * (m.n_gt - tp))
        pq = sq * rq
        if taxonomy.stuff_mask[c]:
            pq_dagger = float(m.iou[0, 0]) if m.iou.size else 0.0
        else:
            pq_dagger = pq
        per_class[name] = {"pq": pq, "sq": sq, "rq": rq, "pq_dagger": pq_dagger}

    def agg(names):
        rows = [per_class[n] for n in names]
        return {k: _mean([r[k] for r in rows]) for k in ("pq", "rq", "sq")}

    names = list(taxonomy.class_names)
    thing_names = [names[c] for c in taxonomy.things]
    stuff_names = [names[c] for c in taxonomy.stuff]
    overall = agg(names)
    return {
        "pq": overall["pq"],
        "pq_dagger": _mean([per_class[n]["pq_dagger"] for n in names]),
        "rq": overall["rq"],
        "sq": overall["sq"],
        "things": agg(thing_names),
        "stuff": agg(stuff_names),
        "per_class": per_class,
    }


def evaluate(gt: SegmentationResult, pred: SegmentationResult, taxonomy: Taxonomy,
             threshold=VALID_IOU) -> MetricsReport:
    """Full metric suite for one scene."""
    if len(gt) != len(pred):
        raise ValueError(f"length mismatch: {len(gt)} ground-truth vs {len(pred)} predicted points")
    matching = match_classes(gt, pred, taxonomy)
    sem = semantic_metrics(gt.semantic, pred.semantic, taxonomy)
    n_eval = int(len(gt) if taxonomy.ignore_label is None else (gt.semantic != taxonomy.ignore_label).sum())
    meta = {
        "n_points": n_eval,
        "valid_iou": threshold,
        "taxonomy": taxonomy.to_dict(),
    }
    return MetricsReport(sem, instance_metrics(matching, taxonomy, threshold),
                         panoptic_metrics(matching, taxonomy, threshold), meta)
