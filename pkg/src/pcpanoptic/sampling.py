"""Input preparation and the final label back-mapping.

Voxel keys are ``floor(p / d)`` on the global lattice, offset so that the
voxel holding the bounding-box minimum has index 0. Anchoring on the lattice
(rather than on the raw minimum coordinate) keeps downsampling idempotent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .model import IGNORE_INSTANCE, PointCloud, SegmentationResult


@dataclass(frozen=True, eq=False)
class SphereBatch:
    """Points of one spherical neighborhood.

    ``features`` start with the coordinates relative to ``center``; optional
    columns (absolute z, RGB scaled to [0, 1]) follow per the feature
    dimension.
    """

    center: np.ndarray
    point_indices: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "point_indices", np.asarray(self.point_indices, dtype=np.int64))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            feats = feats.reshape(len(self.point_indices), -1)
        object.__setattr__(self, "features", feats)
        if len(self.features) != len(self.point_indices):
            raise ValueError("features row count must equal index count")

    def __len__(self):
        return len(self.point_indices)

    @property
    def relative(self) -> np.ndarray:
        return self.features[:, :3]


def voxel_keys(positions, d):
    """Integer voxel index per point (N x 3), anchored at the bounding-box voxel."""
    cells = np.floor(np.asarray(positions, dtype=np.float64) / d).astype(np.int64)
    if len(cells):
        cells -= cells.min(axis=0)
    return cells


def _encode_rows(cells):
    """Collapse integer rows to one int64 key each (row order preserved)."""
    cells = np.asarray(cells, dtype=np.int64)
    if len(cells) == 0:
        return np.zeros(0, dtype=np.int64)
    span = cells.max(axis=0) + 1
    if np.prod(span.astype(np.float64)) < 2**62:
        key = cells[:, 0]
        for j in range(1, cells.shape[1]):
            key = key * span[j] + cells[:, j]
        return key
    _, inv = np.unique(cells, axis=0, return_inverse=True)
    return inv.reshape(-1).astype(np.int64)


def voxel_downsample(cloud: PointCloud, d: float, seed=0):
    """Keep one uniformly chosen point per ``d x d x d`` voxel.

    Returns ``(sub_cloud, kept_indices)`` with indices sorted ascending.
    """
    if not d > 0:
        raise ValueError("voxel size must be positive")
    n = len(cloud)
    if n == 0:
        return cloud, np.zeros(0, dtype=np.int64)
    keys = _encode_rows(voxel_keys(cloud.positions, d))
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    # first occurrence in a random order is a uniform pick within the voxel
    _, first = np.unique(keys[order], return_index=True)
    kept = np.sort(order[first])
    return cloud.subset(kept), kept


def sphere_features(cloud: PointCloud, indices, center, feature_dim=3):
    """K-dimensional input vectors: relative xyz, then absolute z and/or RGB."""
    pts = cloud.positions[indices]
    cols = [pts - center]
    if feature_dim in (4, 7):
        cols.append(pts[:, 2:3])
    if feature_dim in (6, 7):
        if cloud.colors is None:
            cols.append(np.zeros((len(pts), 3)))
        else:
            cols.append(cloud.colors[indices].astype(np.float64) / 255.0)
    if feature_dim not in (3, 4, 6, 7):
        raise ValueError("feature_dim must be one of 3, 4, 6, 7")
    return np.hstack(cols)


def sphere_centers(positions, s):
    """Grid of candidate centers with spacing ``s`` from the bounding-box minimum.

    The grid extends far enough that every point has a grid node within
    ``s * sqrt(3) / 2``. Rows are in lexicographic (x, y, z) order.
    """
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    counts = np.ceil((hi - lo) / s).astype(np.int64) + 1
    axes = [lo[j] + s * np.arange(counts[j]) for j in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid


def tile_spheres(cloud: PointCloud, R: float, s: float, feature_dim=3, tree=None):
    """Cover the cloud with radius-``R`` spheres on a stride-``s`` grid.

    Empty spheres are dropped; the rest come in lexicographic center order,
    each with sorted member indices. ``tree`` may pass a prebuilt
    ``cKDTree`` over ``cloud.positions``.
    """
    if not (R > 0 and s > 0):
        raise ValueError("radius and stride must be positive")
    if len(cloud) == 0:
        return []
    tree = cKDTree(cloud.positions) if tree is None else tree
    centers = sphere_centers(cloud.positions, s)
    # skip grid nodes farther than R from the whole cloud before the ball queries
    near, _ = tree.query(centers, k=1, distance_upper_bound=R * (1 + 1e-12))
    centers = centers[np.isfinite(near)]
    members = tree.query_ball_point(centers, R, return_sorted=True)
    out = []
    for c, idx in zip(centers, members):
        if len(idx) == 0:
            continue
        idx = np.asarray(idx, dtype=np.int64)
        out.append(SphereBatch(c, idx, sphere_features(cloud, idx, c, feature_dim)))
    return out


def sample_training_sphere(cloud: PointCloud, R: float, seed=None, feature_dim=3, tree=None):
    """Sphere around a center drawn uniformly from the cloud's points."""
    if len(cloud) == 0:
        raise ValueError("cannot sample a sphere from an empty cloud")
    rng = np.random.default_rng(seed)
    center = cloud.positions[rng.integers(len(cloud))]
    tree = cKDTree(cloud.positions) if tree is None else tree
    idx = np.asarray(tree.query_ball_point(center, R, return_sorted=True), dtype=np.int64)
    return SphereBatch(center, idx, sphere_features(cloud, idx, center, feature_dim))


def augment(batch: SphereBatch, cfg=None, seed=None, *, scale=None, angle=None, jitter=None):
    """Random scaling, rotation about +z and Gaussian jitter of the relative xyz.

    ``cfg`` supplies ``aug_scale`` (``a``: scale drawn from ``[1-a, 1+a]``) and
    ``aug_jitter`` (sigma in meters); defaults are 0.1 and 0.01. The keyword
    arguments pin a component instead of drawing it. Other feature columns
    are left alone.
    """
    a = 0.1 if cfg is None else cfg.aug_scale
    sigma = 0.01 if cfg is None else cfg.aug_jitter
    if jitter is not None:
        sigma = jitter
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2 * np.pi)
    factor = rng.uniform(1 - a, 1 + a)
    theta = theta if angle is None else angle
    factor = factor if scale is None else scale
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    xyz = factor * batch.relative @ rot.T
    if sigma > 0:
        xyz = xyz + rng.normal(0.0, sigma, size=xyz.shape)
    feats = batch.features.copy()
    feats[:, :3] = xyz
    return SphereBatch(batch.center, batch.point_indices, feats)


def resample_fixed_count(batch: SphereBatch, k: int = 17500, seed=None):
    """Randomly drop or duplicate rows so the batch has exactly ``k`` points."""
    n = len(batch)
    if n == 0:
        raise ValueError("cannot resample an empty batch")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if n >= k:
        rows = rng.choice(n, size=k, replace=False)
    else:
        rows = np.concatenate([np.arange(n), rng.integers(0, n, size=k - n)])
        rows = rows[rng.permutation(k)]
    return SphereBatch(batch.center, batch.point_indices[rows], batch.features[rows])


def _nearest_lowest_index(tree, n_ref, queries, k=8):
    """Nearest reference point per query; equidistant ties go to the lowest index."""
    k = min(k, n_ref)
    dist, idx = tree.query(queries, k=k)
    if k == 1:
        return dist, idx
    tied = dist == dist[:, :1]
    cand = np.where(tied, idx, np.iinfo(np.int64).max)
    return dist[:, 0], cand.min(axis=1)


def upsample_labels(full_cloud: PointCloud, sub_cloud: PointCloud, sub_result: SegmentationResult,
                    th_d: float = 0.18, rescue_factor: float = 3.0):
    """Map sub-cloud labels back to every full-cloud point by nearest neighbor.

    A point whose nearest sub point carries instance ``-1`` (a cluster too small
    to keep) is rescued into the nearest same-class labeled instance within
    ``rescue_factor * th_d``. Points that coincide with a sub point are copied
    verbatim.
    """
    if len(sub_cloud) == 0:
        raise ValueError("sub cloud is empty")
    if len(sub_result) != len(sub_cloud):
        raise ValueError("sub_result length does not match sub_cloud")
    tree = cKDTree(sub_cloud.positions)
    dist, nn = _nearest_lowest_index(tree, len(sub_cloud), full_cloud.positions)
    semantic = sub_result.semantic[nn].copy()
    instance = sub_result.instance[nn].copy()

    radius = rescue_factor * th_d
    needs = np.flatnonzero((instance == IGNORE_INSTANCE) & (dist > 0))
    labeled = sub_result.instance != IGNORE_INSTANCE
    if len(needs) and labeled.any() and radius > 0:
        for cls in np.unique(semantic[needs]):
            donors = np.flatnonzero(labeled & (sub_result.semantic == cls))
            if len(donors) == 0:
                continue
            q = needs[semantic[needs] == cls]
            d2, j = cKDTree(sub_cloud.positions[donors]).query(full_cloud.positions[q], k=1,
                                                                distance_upper_bound=radius)
            ok = np.isfinite(d2)
            instance[q[ok]] = sub_result.instance[donors[j[ok]]]
    return SegmentationResult(semantic, instance)
