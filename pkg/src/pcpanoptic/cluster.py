"""Instance clustering inside one sphere.

Two routes turn per-point instance features into instance ids:

* :func:`mean_shift` on learned embeddings (flat kernel, grid seeding);
* :func:`connected_components` on offset-shifted coordinates.

Both are deterministic; label values are fixed by explicit tie rules so the
result does not depend on input order beyond a renaming.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _csgraph_components
from scipy.spatial import cKDTree

from .model import IGNORE_INSTANCE


@dataclass(frozen=True)
class ClusterParams:
    bandwidth: float = 0.6
    th_d: float = 0.18
    th_n: int = 10
    max_iter: int = 300
    tol: float = 1e-3

    def __post_init__(self):
        if not (self.bandwidth > 0 and self.th_d > 0):
            raise ValueError("bandwidth and th_d must be positive")
        if self.th_n < 1:
            raise ValueError("th_n must be >= 1")

    @classmethod
    def from_config(cls, cfg):
        return cls(cfg.bandwidth, cfg.th_d, cfg.th_n, cfg.max_iter, cfg.tol)


# ------------------------------------------------------------------ mean shift


def _grid_seeds(points, bw):
    """One seed per occupied ``bw``-cell, placed at the mean of its points."""
    cells = np.floor(points / bw).astype(np.int64)
    _, inv = np.unique(cells, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv)
    sums = np.zeros((len(counts), points.shape[1]))
    np.add.at(sums, inv, points)
    return sums / counts[:, None]


def _ball_means(tree, points, centers, bw, chunk=4096):
    """Mean and count of the points within ``bw`` (inclusive) of each center."""
    means = np.zeros_like(centers)
    support = np.zeros(len(centers), dtype=np.int64)
    for lo in range(0, len(centers), chunk):
        hoods = tree.query_ball_point(centers[lo:lo + chunk], bw, return_sorted=False)
        lens = np.fromiter((len(h) for h in hoods), dtype=np.int64, count=len(hoods))
        support[lo:lo + chunk] = lens
        if lens.sum() == 0:
            continue
        flat = np.fromiter((i for h in hoods for i in h), dtype=np.int64, count=int(lens.sum()))
        owner = np.repeat(np.arange(len(hoods)), lens)
        sums = np.zeros((len(hoods), points.shape[1]))
        np.add.at(sums, owner, points[flat])
        nz = lens > 0
        means[lo:lo + chunk][nz] = sums[nz] / lens[nz, None]
    return means, support


def mean_shift(points, bandwidth=0.6, max_iter=300, tol=1e-3, seed=0):
    """Flat-kernel mean-shift; returns dense labels ``0..K-1``.

    Seeds are the occupied cells of a grid with cell size ``bandwidth``. Each
    seed moves to the mean of the points within ``bandwidth`` until the shift
    drops below ``tol * bandwidth`` or ``max_iter`` is reached. Modes closer
    than ``bandwidth`` are merged, the higher-support mode winning (ties to
    the lower seed index), and every point joins its nearest surviving mode.
    Label 0 is the mode with the highest support.

    ``seed`` is accepted for interface symmetry; the procedure draws no
    random numbers.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    m = len(pts)
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    tree = cKDTree(pts)
    modes = _grid_seeds(pts, bandwidth)
    support = np.zeros(len(modes), dtype=np.int64)
    active = np.arange(len(modes))
    stop = tol * bandwidth
    for _ in range(max_iter):
        if len(active) == 0:
            break
        new, cnt = _ball_means(tree, pts, modes[active], bandwidth)
        empty = cnt == 0
        new[empty] = modes[active][empty]
        shift = np.linalg.norm(new - modes[active], axis=1)
        modes[active] = new
        support[active] = cnt
        active = active[(shift >= stop) & ~empty]
    if len(active):
        _, support[active] = _ball_means(tree, pts, modes[active], bandwidth)

    alive = np.flatnonzero(support > 0)
    # highest support first; stable sort keeps lower seed index first on ties
    order = alive[np.argsort(-support[alive], kind="stable")]
    kept = []
    for i in order:
        if kept:
            d = np.linalg.norm(modes[kept] - modes[i], axis=1)
            if (d < bandwidth).any():
                continue
        kept.append(i)
    if not kept:
        return np.zeros(m, dtype=np.int64)
    centers = modes[kept]
    dist, lab = cKDTree(centers).query(pts, k=min(len(centers), 8))
    if lab.ndim == 1:
        return lab.astype(np.int64)
    tied = dist == dist[:, :1]
    return np.where(tied, lab, np.iinfo(np.int64).max).min(axis=1).astype(np.int64)


# ----------------------------------------------------------- connected components


# half of the 5^3 neighborhood (one of each +/- pair), grouped into rings by
# the number of axes on which the cell boxes are a full cell apart
_HALF = [(i, j, k) for i in range(-2, 3) for j in range(-2, 3) for k in range(-2, 3) if (i, j, k) > (0, 0, 0)]
_RINGS = [
    np.array([o for o in _HALF if sum(abs(x) == 2 for x in o) == r], dtype=np.int64)
    for r in range(4)
]

_EXPAND_LIMIT = 256  # point pairs per cell pair checked by brute force
_CHUNK = 1 << 21


def _cell_edges(pts, starts, counts, order, a, b, th_d):
    """Which cell pairs ``(a[i], b[i])`` hold at least one point pair closer than ``th_d``."""
    hit = np.zeros(len(a), dtype=bool)
    prod = counts[a] * counts[b]
    small = np.flatnonzero(prod <= _EXPAND_LIMIT)
    th2 = th_d * th_d
    # brute-force the small pairs in bounded chunks
    csum = np.cumsum(prod[small])
    lo = 0
    while lo < len(small):
        base = csum[lo - 1] if lo else 0
        hi = max(lo + 1, int(np.searchsorted(csum, base + _CHUNK, side="right")))
        sel = small[lo:hi]
        p = prod[sel]
        owner = np.repeat(np.arange(len(sel)), p)
        local = np.arange(p.sum()) - np.repeat(np.cumsum(p) - p, p)
        nb = counts[b[sel]][owner]
        u = order[starts[a[sel]][owner] + local // nb]
        v = order[starts[b[sel]][owner] + local % nb]
        d2 = ((pts[u] - pts[v]) ** 2).sum(axis=1)
        hit[sel] = np.bincount(owner[d2 < th2], minlength=len(sel)) > 0
        lo = hi
    big = np.flatnonzero(prod > _EXPAND_LIMIT)
    if len(big):
        trees = {}
        for i in big:
            ca, cb = a[i], b[i]
            if counts[ca] > counts[cb]:
                ca, cb = cb, ca
            if cb not in trees:
                trees[cb] = cKDTree(pts[order[starts[cb]:starts[cb] + counts[cb]]])
            q = pts[order[starts[ca]:starts[ca] + counts[ca]]]
            d, _ = trees[cb].query(q, k=1, distance_upper_bound=th_d)
            hit[i] = bool((d < th_d).any())
    return hit


def connected_components(shifted, semantic, th_d=0.18, th_n=10):
    """Group points whose shifted coordinates chain together at distance ``< th_d``.

    Edges join same-class points only. Components with ``<= th_n`` points
    get ``-1``; the rest are labeled densely in order of their smallest
    member index.

    Points are hashed into cubic cells of edge ``th_d / sqrt(3)``, so all
    points in a cell are mutually closer than ``th_d`` and merge for free;
    only neighboring cells need a point-pair test, which keeps dense clumps
    linear instead of quadratic.
    """
    pts = np.asarray(shifted, dtype=np.float64).reshape(-1, 3)
    sem = np.asarray(semantic, dtype=np.int64).reshape(-1)
    m = len(pts)
    if len(sem) != m:
        raise ValueError("shifted and semantic lengths differ")
    if not th_d > 0:
        raise ValueError("th_d must be positive")
    labels = np.full(m, IGNORE_INSTANCE, dtype=np.int64)
    if m == 0:
        return labels
    edge = th_d / np.sqrt(3.0) * (1 - 1e-9)
    idx = np.floor(pts / edge).astype(np.int64)
    idx -= idx.min(axis=0) - 2  # margin of 2 cells so neighbor offsets never wrap
    span = idx.max(axis=0) + 3
    _, sem_code = np.unique(sem, return_inverse=True)
    sem_code = sem_code.reshape(-1)
    n_sem = int(sem_code.max()) + 1
    if np.prod(span.astype(np.float64)) * n_sem >= 2**62:
        raise ValueError("point extent too large for the cell hash at this th_d")
    mult = np.array([span[1] * span[2], span[2], 1], dtype=np.int64)
    key = sem_code * (span[0] * span[1] * span[2]) + idx @ mult
    cell_keys, cell_of, counts = np.unique(key, return_inverse=True, return_counts=True)
    cell_of = cell_of.reshape(-1)
    order = np.argsort(cell_of, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    n_cells = len(cell_keys)
    ea, eb = [np.zeros(0, dtype=np.int64)], [np.zeros(0, dtype=np.int64)]
    comp_of_cell = np.arange(n_cells)
    for ring in _RINGS:
        ca, cb = [], []
        for off in ring:
            target = cell_keys + off @ mult
            pos = np.minimum(np.searchsorted(cell_keys, target), n_cells - 1)
            found = np.flatnonzero(cell_keys[pos] == target)
            ca.append(found)
            cb.append(pos[found])
        a, b = np.concatenate(ca), np.concatenate(cb)
        # pairs already joined through closer rings need no distance test
        todo = comp_of_cell[a] != comp_of_cell[b]
        a, b = a[todo], b[todo]
        if len(a) == 0:
            continue
        hit = _cell_edges(pts, starts, counts, order, a, b, th_d)
        ea.append(a[hit])
        eb.append(b[hit])
        a, b = np.concatenate(ea), np.concatenate(eb)
        graph = coo_matrix((np.ones(len(a), dtype=np.int8), (a, b)), shape=(n_cells, n_cells))
        _, comp_of_cell = _csgraph_components(graph, directed=False)
    comp = comp_of_cell[cell_of]

    sizes = np.bincount(comp)
    keep = sizes[comp] > th_n
    if not keep.any():
        return labels
    first = np.full(len(sizes), m, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(m))
    survivors = np.flatnonzero(sizes > th_n)
    rank = np.full(len(sizes), IGNORE_INSTANCE, dtype=np.int64)
    rank[survivors[np.argsort(first[survivors], kind="stable")]] = np.arange(len(survivors))
    labels[keep] = rank[comp[keep]]
    return labels


def shift_coordinates(positions, offsets):
    """Offset-shifted coordinates: ``positions + offsets``."""
    positions = np.asarray(positions, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    if positions.shape != offsets.shape:
        raise ValueError(f"shape mismatch: {positions.shape} vs {offsets.shape}")
    return positions + offsets


# --------------------------------------------------------------- per-class drivers


def cluster_embeddings(embeddings, semantic, mask, params: ClusterParams):
    """Mean-shift separately per semantic class on the points selected by ``mask``.

    Returns ids dense across classes (classes in ascending order), ``-1``
    outside ``mask``.
    """
    semantic = np.asarray(semantic, dtype=np.int64)
    out = np.full(len(semantic), IGNORE_INSTANCE, dtype=np.int64)
    next_id = 0
    for cls in np.unique(semantic[mask]):
        sel = np.flatnonzero(mask & (semantic == cls))
        lab = mean_shift(embeddings[sel], params.bandwidth, params.max_iter, params.tol)
        out[sel] = lab + next_id
        next_id += int(lab.max()) + 1
    return out


def cluster_offsets(positions, offsets, semantic, mask, params: ClusterParams):
    """Connected components of shifted coordinates on the points selected by ``mask``."""
    out = np.full(len(semantic), IGNORE_INSTANCE, dtype=np.int64)
    sel = np.flatnonzero(mask)
    if len(sel):
        shifted = shift_coordinates(positions[sel], offsets[sel])
        out[sel] = connected_components(shifted, np.asarray(semantic)[sel], params.th_d, params.th_n)
    return out
