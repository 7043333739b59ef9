"""Core data types shared by every stage of the toolkit.

Instance id ``-1`` is the single sentinel for "ignored / unassigned" on both
the ground-truth and the prediction side. Class ids are dense ``0..C-1``; an
optional ignore label lives outside that range.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

IGNORE_INSTANCE = -1


def _frozen(arr, dtype):
    if arr is None:
        return None
    out = np.ascontiguousarray(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Point positions (meters) plus optional colors and labels.

    Arrays are copied to read-only contiguous buffers on construction, so a
    cloud can be shared freely. Shape problems raise ``ValueError``;
    content problems (NaN, out-of-range labels) are reported by
    :func:`validate` instead.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    semantic: Optional[np.ndarray] = None
    instance: Optional[np.ndarray] = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            if pos.size == 0:
                pos = pos.reshape(0, 3)
            else:
                raise ValueError(f"positions must be N x 3, got shape {pos.shape}")
        object.__setattr__(self, "positions", _frozen(pos, np.float64))
        object.__setattr__(self, "colors", _frozen(self.colors, np.uint8))
        object.__setattr__(self, "semantic", _frozen(self.semantic, np.int64))
        object.__setattr__(self, "instance", _frozen(self.instance, np.int64))
        n = len(pos)
        if self.colors is not None and self.colors.shape != (n, 3):
            raise ValueError(f"colors must be {n} x 3, got {self.colors.shape}")
        for name in ("semantic", "instance"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (n,):
                raise ValueError(f"{name} must have length {n}, got shape {arr.shape}")

    def __len__(self):
        return len(self.positions)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        return True

    __hash__ = None

    def subset(self, indices) -> "PointCloud":
        """Cloud restricted to ``indices`` (duplicates allowed)."""
        idx = np.asarray(indices, dtype=np.int64)
        take = lambda a: None if a is None else a[idx]
        return PointCloud(self.positions[idx], take(self.colors), take(self.semantic), take(self.instance))

    def with_labels(self, semantic=None, instance=None) -> "PointCloud":
        return replace(
            self,
            semantic=self.semantic if semantic is None else semantic,
            instance=self.instance if instance is None else instance,
        )


@dataclass(frozen=True)
class Taxonomy:
    """Semantic class list with the things/stuff partition."""

    class_names: tuple
    stuff_mask: tuple
    ignore_label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(str(c) for c in self.class_names))
        object.__setattr__(self, "stuff_mask", tuple(bool(s) for s in self.stuff_mask))
        if len(self.class_names) < 1:
            raise ValueError("taxonomy needs at least one class")
        if len(self.stuff_mask) != len(self.class_names):
            raise ValueError("stuff_mask length must equal number of classes")
        if self.ignore_label is not None and 0 <= self.ignore_label < len(self.class_names):
            raise ValueError(f"ignore_label {self.ignore_label} collides with a class id")

    @classmethod
    def from_names(cls, class_names: Sequence[str], stuff: Sequence[str] = (), ignore_label=None):
        stuff = set(stuff)
        unknown = stuff - set(class_names)
        if unknown:
            raise ValueError(f"unknown stuff classes: {sorted(unknown)}")
        return cls(tuple(class_names), tuple(c in stuff for c in class_names), ignore_label)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def things(self) -> np.ndarray:
        """Class ids of the things classes."""
        return np.flatnonzero(~np.asarray(self.stuff_mask))

    @property
    def stuff(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.stuff_mask))

    def is_stuff(self, labels) -> np.ndarray:
        """Boolean mask over ``labels``; out-of-range labels count as not stuff."""
        labels = np.asarray(labels)
        mask = np.asarray(self.stuff_mask)
        ok = (labels >= 0) & (labels < self.num_classes)
        out = np.zeros(labels.shape, dtype=bool)
        out[ok] = mask[labels[ok]]
        return out

    def is_thing(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        ok = (labels >= 0) & (labels < self.num_classes)
        return ok & ~self.is_stuff(labels)

    def index(self, name: str) -> int:
        return self.class_names.index(name)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "stuff": [c for c, s in zip(self.class_names, self.stuff_mask) if s],
            "ignore_label": self.ignore_label,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Taxonomy":
        return cls.from_names(d["class_names"], d.get("stuff", ()), d.get("ignore_label"))


# NPM3D's nine evaluated classes; "natural" is the tree archetype.
NPM3D_TAXONOMY = Taxonomy.from_names(
    ["ground", "building", "pole", "bollard", "trash_can", "barrier", "pedestrian", "car", "natural"],
    stuff=["ground", "building", "barrier"],
)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    """Per-point backbone outputs: class probabilities, embeddings, offsets."""

    class_probs: Optional[np.ndarray] = None
    embeddings: Optional[np.ndarray] = None
    offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("class_probs", "embeddings", "offsets"):
            object.__setattr__(self, name, _frozen(getattr(self, name), np.float64))
        present = [a for a in (self.class_probs, self.embeddings, self.offsets) if a is not None]
        if not present:
            raise ValueError("PredictionSet needs at least one array")
        if any(a.ndim != 2 for a in present):
            raise ValueError("prediction arrays must be two-dimensional")
        if len({len(a) for a in present}) != 1:
            raise ValueError("prediction arrays disagree on N")
        if self.offsets is not None and self.offsets.shape[1] != 3:
            raise ValueError("offsets must be N x 3")
        if self.class_probs is not None and len(self.class_probs):
            err = np.abs(self.class_probs.sum(axis=1) - 1.0).max()
            if not err <= 1e-4:
                raise ValueError(f"class_probs rows must sum to 1 (max deviation {err:.3g})")

    def __len__(self):
        for a in (self.class_probs, self.embeddings, self.offsets):
            if a is not None:
                return len(a)
        return 0

    @property
    def num_classes(self) -> int:
        return 0 if self.class_probs is None else self.class_probs.shape[1]

    @property
    def emb_dim(self) -> int:
        return 0 if self.embeddings is None else self.embeddings.shape[1]

    def subset(self, indices) -> "PredictionSet":
        idx = np.asarray(indices, dtype=np.int64)
        take = lambda a: None if a is None else a[idx]
        return PredictionSet(take(self.class_probs), take(self.embeddings), take(self.offsets))


@dataclass(frozen=True, eq=False)
class SegmentationResult:
    """Per-point semantic label and instance id (``-1`` for none)."""

    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "semantic", _frozen(self.semantic, np.int64))
        object.__setattr__(self, "instance", _frozen(self.instance, np.int64))
        if self.semantic.shape != self.instance.shape or self.semantic.ndim != 1:
            raise ValueError("semantic and instance must be equal-length vectors")

    def __len__(self):
        return len(self.semantic)

    def __eq__(self, other):
        if not isinstance(other, SegmentationResult):
            return NotImplemented
        return np.array_equal(self.semantic, other.semantic) and np.array_equal(self.instance, other.instance)

    __hash__ = None

    @classmethod
    def from_cloud(cls, cloud: PointCloud) -> "SegmentationResult":
        if cloud.semantic is None or cloud.instance is None:
            raise ValueError("cloud carries no semantic/instance labels")
        return cls(cloud.semantic, cloud.instance)


@dataclass(frozen=True)
class PipelineConfig:
    """Pipeline parameters; defaults are the best NPM3D settings.

    ``th_d`` defaults to ``1.5 * voxel_size`` when left as ``None``.
    """

    voxel_size: float = 0.12
    radius: float = 8.0
    stride: float = 8.0
    k_points: int = 17500
    feature_dim: int = 4
    w_embed: float = 1.0
    w_offset: float = 0.1
    w_reg: float = 0.0
    th_d: Optional[float] = None
    th_n: int = 10
    th_bm: float = 0.01
    bandwidth: float = 0.6
    emb_dim: int = 5
    seed: int = 0
    aug_scale: float = 0.1
    aug_jitter: float = 0.01
    rescue_factor: float = 3.0
    max_iter: int = 300
    tol: float = 1e-3

    def __post_init__(self):
        if self.th_d is None:
            object.__setattr__(self, "th_d", 1.5 * self.voxel_size)
        for name in ("voxel_size", "radius", "stride", "bandwidth", "th_d"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.th_n < 1:
            raise ValueError("th_n must be >= 1")
        if not 0.0 <= self.th_bm <= 1.0:
            raise ValueError("th_bm must lie in [0, 1]")
        if self.feature_dim not in (3, 4, 6, 7):
            raise ValueError("feature_dim must be one of 3, 4, 6, 7")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def canonicalize_instances(cloud: PointCloud):
    """Remap instance ids to dense ``0..M-1`` in order of first appearance.

    Returns ``(cloud, M)``; ``-1`` is preserved.
    """
    if cloud.instance is None:
        raise ValueError("canonicalize_instances requires an instance array")
    dense, count = dense_relabel(cloud.instance)
    return cloud.with_labels(instance=dense), count


def dense_relabel(ids):
    """Dense relabeling of non-negative ids by first appearance; ``-1`` kept."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.full(ids.shape, IGNORE_INSTANCE, dtype=np.int64)
    valid = ids >= 0
    if not valid.any():
        return out, 0
    uniq, first, inverse = np.unique(ids[valid], return_index=True, return_inverse=True)
    # rank unique ids by where they first appear
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    out[valid] = rank[inverse]
    return out, len(uniq)


def majority_semantics(semantic, instance):
    """Give every point of an instance the instance's majority class.

    Ties go to the lowest class id. Points with instance ``-1`` keep their label.
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    instance = np.asarray(instance, dtype=np.int64)
    out = semantic.copy()
    valid = instance >= 0
    if not valid.any():
        return out
    inst = instance[valid]
    sem = semantic[valid]
    uinst, inv = np.unique(inst, return_inverse=True)
    usem, sinv = np.unique(sem, return_inverse=True)
    counts = np.zeros((len(uinst), len(usem)), dtype=np.int64)
    np.add.at(counts, (inv, sinv), 1)
    # argmax returns the first maximum, and usem is sorted ascending
    winner = usem[np.argmax(counts, axis=1)]
    out[valid] = winner[inv]
    return out


def validate(cloud: PointCloud, taxonomy: Optional[Taxonomy] = None) -> list:
    """List of human-readable violations; an empty list means the cloud is valid."""
    issues = []
    finite = np.isfinite(cloud.positions).all(axis=1)
    for row in np.flatnonzero(~finite):
        issues.append(f"non-finite position at row {row}")
    if cloud.semantic is not None and taxonomy is not None:
        sem = cloud.semantic
        bad = (sem < 0) | (sem >= taxonomy.num_classes)
        if taxonomy.ignore_label is not None:
            bad &= sem != taxonomy.ignore_label
        for row in np.flatnonzero(bad):
            issues.append(f"label out of range at row {row}: {sem[row]}")
    if cloud.instance is not None:
        for row in np.flatnonzero(cloud.instance < IGNORE_INSTANCE):
            issues.append(f"invalid instance id at row {row}: {cloud.instance[row]}")
    return issues
