"""Synthetic street scenes and simulated backbone outputs for testing.

Scenes are a ground plane with a facade and a low barrier as stuff, and a
set of primitive objects as things. Every object floats ``clearance`` meters
above the ground and keeps at least ``clearance`` from every other surface,
so that voxel downsampling and nearest-neighbor back-mapping can never mix
two segments. Per-object random streams come from ``SeedSequence.spawn``,
which keeps generation independent of evaluation order.

:func:`oracle_metrics` is a deliberately naive re-implementation of the
metric suite (plain Python sets, quadratic loops) used to cross-check
:mod:`pcpanoptic.metrics`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import IGNORE_INSTANCE, NPM3D_TAXONOMY, PointCloud, PredictionSet, SegmentationResult, Taxonomy

THING_ARCHETYPES = ("pole", "bollard", "trash_can", "pedestrian", "car", "natural")


@dataclass(frozen=True)
class SceneSpec:
    extent: tuple = (30.0, 30.0, 10.0)   # ground size in x, y; facade height
    density: float = 150.0               # points per square meter of surface
    counts: dict = field(default_factory=dict)  # archetype name -> count
    building: bool = True
    barrier: bool = True
    jitter: float = 0.01
    clearance: float = 0.5
    seed: int = 0
    merge_grid: tuple = None             # optional (R, s) of the inference sphere grid

    def __post_init__(self):
        if not self.density > 0:
            raise ValueError("density must be positive")
        if self.jitter < 0 or self.clearance < 0:
            raise ValueError("jitter and clearance must be non-negative")
        for name, n in self.counts.items():
            if name not in THING_ARCHETYPES:
                raise ValueError(f"unknown archetype {name!r}; choose from {THING_ARCHETYPES}")
            if n < 0:
                raise ValueError(f"count for {name} must be >= 0")

    @classmethod
    def mixed(cls, n_things, **kw):
        """Spread ``n_things`` objects round-robin over the archetypes."""
        counts = {a: 0 for a in THING_ARCHETYPES}
        for i in range(n_things):
            counts[THING_ARCHETYPES[i % len(THING_ARCHETYPES)]] += 1
        return cls(counts=counts, **kw)


@dataclass(frozen=True)
class NoiseSpec:
    sem_confusion: float = 0.0
    emb_sigma: float = 0.0
    emb_sep: float = 3.0
    off_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.sem_confusion <= 1.0:
            raise ValueError("sem_confusion must lie in [0, 1]")
        if self.emb_sigma < 0 or self.off_sigma < 0:
            raise ValueError("sigmas must be non-negative")
        if not self.emb_sep > 0:
            raise ValueError("emb_sep must be positive")


# ------------------------------------------------------------------ primitives
# Each sampler returns surface points of an object whose footprint is centered
# at the xy origin and whose lowest point sits at z = 0.


def _n_points(rng, area, density):
    return int(rng.poisson(area * density))


def _cylinder(rng, density, r, h, caps=False):
    n = _n_points(rng, 2 * np.pi * r * h, density)
    t = rng.uniform(0, 2 * np.pi, n)
    side = np.column_stack([r * np.cos(t), r * np.sin(t), rng.uniform(0, h, n)])
    if not caps:
        return side
    m = _n_points(rng, np.pi * r * r, density)
    rad = r * np.sqrt(rng.uniform(0, 1, m))
    t = rng.uniform(0, 2 * np.pi, m)
    top = np.column_stack([rad * np.cos(t), rad * np.sin(t), np.full(m, h)])
    return np.vstack([side, top])


def _sphere_surface(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _ellipsoid(rng, density, a, b, c):
    # Thomsen's approximation of the surface area
    p = 1.6075
    area = 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)
    u = _sphere_surface(rng, _n_points(rng, area, density))
    return u * [a, b, c] + [0, 0, c]


def _box(rng, density, lx, ly, lz, yaw):
    faces = [  # (area, fixed axis, value)
        (ly * lz, 0, 0.0), (ly * lz, 0, lx), (lx * lz, 1, 0.0), (lx * lz, 1, ly),
        (lx * ly, 2, 0.0), (lx * ly, 2, lz),
    ]
    size = np.array([lx, ly, lz])
    parts = []
    for area, axis, value in faces:
        n = _n_points(rng, area, density)
        pts = rng.uniform(0, 1, (n, 3)) * size
        pts[:, axis] = value
        parts.append(pts)
    pts = np.vstack(parts) - [lx / 2, ly / 2, 0]
    c, s = np.cos(yaw), np.sin(yaw)
    return pts @ np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]])


def _object(rng, kind, density):
    """Surface points and footprint radius of one archetype instance."""
    if kind == "pole":
        r = rng.uniform(0.08, 0.15)
        return _cylinder(rng, density, r, rng.uniform(3, 6)), r
    if kind == "bollard":
        r = rng.uniform(0.08, 0.12)
        return _cylinder(rng, density, r, rng.uniform(0.7, 1.0), caps=True), r
    if kind == "trash_can":
        r = rng.uniform(0.25, 0.35)
        return _cylinder(rng, density, r, rng.uniform(0.8, 1.1), caps=True), r
    if kind == "pedestrian":
        a, b, c = rng.uniform(0.2, 0.3), rng.uniform(0.15, 0.22), rng.uniform(0.8, 0.95)
        return _ellipsoid(rng, density, a, b, c), max(a, b)
    if kind == "car":
        lx, ly, lz = rng.uniform(3.8, 4.6), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)
        return _box(rng, density, lx, ly, lz, rng.uniform(0, np.pi)), 0.5 * np.hypot(lx, ly)
    if kind == "natural":
        tr, th, cr = rng.uniform(0.12, 0.2), rng.uniform(2.0, 3.0), rng.uniform(1.0, 1.8)
        trunk = _cylinder(rng, density, tr, th)
        crown = cr * _sphere_surface(rng, _n_points(rng, 4 * np.pi * cr * cr, density)) + [0, 0, th + 0.8 * cr]
        # keep only the crown above the trunk top so the two parts touch
        crown = crown[crown[:, 2] >= th]
        return np.vstack([trunk, crown]), cr
    raise ValueError(f"unknown archetype {kind!r}")


def _plane(rng, density, origin, u, v):
    """Uniform points on the parallelogram ``origin + s*u + t*v``, s, t in [0, 1]."""
    u, v = np.asarray(u, float), np.asarray(v, float)
    area = np.linalg.norm(np.cross(u, v))
    n = _n_points(rng, area, density)
    st = rng.uniform(0, 1, (n, 2))
    return np.asarray(origin, float) + st[:, :1] * u + st[:, 1:] * v


def _first_sphere_contains(points, R, s, margin):
    """True if the lexicographically first grid sphere within reach of ``points`` holds them all.

    The grid is anchored at the origin. Any sphere that comes within
    ``R + margin`` of the points counts as reaching them, and containment
    must hold with ``margin`` to spare, so the answer survives small shifts
    of the grid anchor.
    """
    lo = np.floor((points.min(axis=0) - R - margin) / s).astype(int)
    hi = np.ceil((points.max(axis=0) + R + margin) / s).astype(int)
    axes = [np.arange(max(l, 0), h + 1) for l, h in zip(lo, hi)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3) * s
    for c in nodes:  # meshgrid "ij" order is lexicographic
        d = np.linalg.norm(points - c, axis=1)
        if d.min() <= R + margin:
            return d.max() <= R - margin
    return True


def generate_scene(spec: SceneSpec, taxonomy: Taxonomy = NPM3D_TAXONOMY) -> PointCloud:
    """Labeled synthetic scene; stuff points carry instance ``-1``.

    Things get instance ids ``0..M-1`` in placement order. Raises
    ``ValueError`` if the objects cannot be placed with the requested gaps.

    With ``merge_grid=(R, s)`` every object is also placed so that the first
    sphere of that tiling (anchored at the origin) to reach it contains it
    entirely. Sphere-by-sphere merging of exact local labels is then exact,
    because no later sphere ever sees an unlabeled point of the object.
    """
    lx, ly, lz = spec.extent
    gap = spec.clearance
    kinds = [k for k in THING_ARCHETYPES for _ in range(spec.counts.get(k, 0))]
    root = np.random.SeedSequence(spec.seed)
    place_seq, stuff_seq, jitter_seq, *obj_seqs = root.spawn(3 + len(kinds))

    pts, sem, ins = [], [], []

    def add(p, cls, inst):
        pts.append(p)
        sem.append(np.full(len(p), taxonomy.index(cls), dtype=np.int64))
        ins.append(np.full(len(p), inst, dtype=np.int64))

    srng = np.random.default_rng(stuff_seq)
    add(_plane(srng, spec.density, (0, 0, 0), (lx, 0, 0), (0, ly, 0)), "ground", IGNORE_INSTANCE)
    y_max = ly
    if spec.building:
        add(_plane(srng, spec.density, (0, ly, gap), (lx, 0, 0), (0, 0, lz - gap)), "building", IGNORE_INSTANCE)
        y_max = ly - gap
    x_min = 0.0
    if spec.barrier:
        add(_plane(srng, spec.density, (0, 0, gap), (0, y_max, 0), (0, 0, 1.2)), "barrier", IGNORE_INSTANCE)
        x_min = gap

    prng = np.random.default_rng(place_seq)
    placed = []  # (x, y, footprint radius)
    for inst, (kind, seq) in enumerate(zip(kinds, obj_seqs)):
        obj, r = _object(np.random.default_rng(seq), kind, spec.density)
        lo = np.array([x_min + gap + r, gap + r])
        hi = np.array([lx - r, y_max - gap - r])
        if (hi <= lo).any():
            raise ValueError("scene extent too small for the requested objects")
        for _ in range(5000):
            xy = prng.uniform(lo, hi)
            if not all(np.hypot(*(xy - (px, py))) >= r + pr + gap for px, py, pr in placed):
                continue
            if spec.merge_grid is None or _first_sphere_contains(obj + [xy[0], xy[1], gap], *spec.merge_grid,
                                                                 margin=0.25 + 5 * spec.jitter):
                break
        else:
            raise ValueError(f"could not place object {inst} ({kind}) with {gap} m clearance")
        placed.append((xy[0], xy[1], r))
        add(obj + [xy[0], xy[1], gap], "natural" if kind == "natural" else kind, inst)

    positions = np.vstack(pts) if pts else np.zeros((0, 3))
    if spec.jitter > 0:
        positions = positions + np.random.default_rng(jitter_seq).normal(0, spec.jitter, positions.shape)
    return PointCloud(positions, semantic=np.concatenate(sem), instance=np.concatenate(ins))


# ----------------------------------------------------------------- predictions


def _lattice_codes(n_codes, dim, sep):
    """``n_codes`` distinct points of the integer lattice scaled by ``sep``; row 0 is the origin."""
    base = 2
    while base ** dim < n_codes:
        base += 1
    digits = np.arange(n_codes)[:, None] // base ** np.arange(dim)[None, :] % base
    return sep * digits.astype(np.float64)


def simulate_predictions(cloud: PointCloud, noise: NoiseSpec, n_classes: int, emb_dim: int = 5,
                         logit_scale: float = 4.0) -> PredictionSet:
    """Head outputs that an ideal backbone would produce, degraded by ``noise``.

    * probabilities: softmax of ``logit_scale`` times a one-hot vector on the
      true class, flipped to a uniformly drawn other class with probability
      ``sem_confusion``;
    * embeddings: one lattice code per instance (pairwise at least
      ``emb_sep`` apart, the zero code for unassigned points) plus Gaussian
      noise;
    * offsets: instance centroid minus position plus Gaussian noise (zero
      target for unassigned points).
    """
    if cloud.semantic is None or cloud.instance is None:
        raise ValueError("simulate_predictions needs ground-truth semantic and instance labels")
    rng_sem, rng_emb, rng_off = (np.random.default_rng(s) for s in np.random.SeedSequence(noise.seed).spawn(3))
    n = len(cloud)
    label = cloud.semantic.copy()
    if noise.sem_confusion > 0 and n_classes > 1:
        flip = rng_sem.random(n) < noise.sem_confusion
        shift = rng_sem.integers(1, n_classes, size=n)
        label[flip] = (label[flip] + shift[flip]) % n_classes
    logits = np.zeros((n, n_classes))
    logits[np.arange(n), label] = logit_scale
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)

    ids, inv = np.unique(cloud.instance, return_inverse=True)
    inv = inv.reshape(-1)
    has_ignore = len(ids) and ids[0] == IGNORE_INSTANCE
    codes = _lattice_codes(len(ids) + (0 if has_ignore else 1), emb_dim, noise.emb_sep)
    # unassigned points take code 0; instances take codes 1, 2, ...
    code_of = codes[np.arange(len(ids)) + (0 if has_ignore else 1)]
    emb = code_of[inv]
    if noise.emb_sigma > 0:
        emb = emb + rng_emb.normal(0, noise.emb_sigma, emb.shape)

    sums = np.zeros((len(ids), 3))
    np.add.at(sums, inv, cloud.positions)
    centroid = sums / np.bincount(inv, minlength=len(ids))[:, None]
    offsets = centroid[inv] - cloud.positions
    offsets[cloud.instance == IGNORE_INSTANCE] = 0.0
    if noise.off_sigma > 0:
        offsets = offsets + rng_off.normal(0, noise.off_sigma, offsets.shape)
    return PredictionSet(probs, emb, offsets)


# ---------------------------------------------------------------------- oracle

ORACLE_MAX_POINTS = 10_000


def _oracle_segments(semantic, instance, kept, taxonomy):
    """Per-class list of frozensets of point indices, built with plain loops."""
    members = {}
    for i in kept:
        if instance[i] != IGNORE_INSTANCE:
            members.setdefault(instance[i], []).append(i)
    vote = {}
    for inst, pts in members.items():
        tally = {}
        for i in pts:
            tally[semantic[i]] = tally.get(semantic[i], 0) + 1
        top = max(tally.values())
        vote[inst] = min(c for c, k in tally.items() if k == top)
    label = {i: (vote[instance[i]] if instance[i] in vote else semantic[i]) for i in kept}
    out = {c: [] for c in range(taxonomy.num_classes)}
    for inst in sorted(members):
        c = vote[inst]
        if 0 <= c < taxonomy.num_classes and not taxonomy.stuff_mask[c]:
            out[c].append(frozenset(members[inst]))
    for c in range(taxonomy.num_classes):
        if taxonomy.stuff_mask[c]:
            seg = frozenset(i for i in kept if label[i] == c)
            if seg:
                out[c].append(seg)
    return out


def _oracle_mean(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def oracle_metrics(gt: SegmentationResult, pred: SegmentationResult, taxonomy: Taxonomy,
                   threshold: float = 0.5) -> dict:
    """Brute-force metric suite with the same report layout as ``evaluate(...).to_dict()``."""
    n = len(gt)
    if n > ORACLE_MAX_POINTS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_POINTS} points, got {n}")
    if len(pred) != n:
        raise ValueError("length mismatch")
    gs, gi = [int(v) for v in gt.semantic], [int(v) for v in gt.instance]
    ps, pi = [int(v) for v in pred.semantic], [int(v) for v in pred.instance]
    kept = [i for i in range(n) if taxonomy.ignore_label is None or gs[i] != taxonomy.ignore_label]
    names = list(taxonomy.class_names)
    C = len(names)

    # semantic
    iou = []
    for c in range(C):
        tp = sum(1 for i in kept if gs[i] == c and ps[i] == c)
        g = sum(1 for i in kept if gs[i] == c)
        p = sum(1 for i in kept if ps[i] == c)
        iou.append(tp / (g + p - tp) if g + p - tp > 0 else None)
    correct = sum(1 for i in kept if gs[i] == ps[i] and 0 <= gs[i] < C)
    semantic = {"oacc": correct / len(kept) if kept else None, "miou": _oracle_mean(iou),
                "per_class_iou": iou, "n_skipped_classes": sum(v is None for v in iou)}

    g_seg = _oracle_segments(gs, gi, kept, taxonomy)
    p_seg = _oracle_segments(ps, pi, kept, taxonomy)

    def pair_iou(a, b):
        return len(a & b) / len(a | b)

    def greedy(gl, pl):
        cand = [(-pair_iou(a, b), j, k) for j, a in enumerate(gl) for k, b in enumerate(pl)]
        cand = sorted(t for t in cand if -t[0] >= threshold)
        used_g, used_p, out = set(), set(), []
        for neg, j, k in cand:
            if j not in used_g and k not in used_p:
                used_g.add(j)
                used_p.add(k)
                out.append(-neg)
        return out

    inst_pc, pan_pc = {}, {}
    for c in range(C):
        gl, pl = g_seg[c], p_seg[c]
        empty = not gl and not pl
        valid = [] if empty else greedy(gl, pl)
        if not taxonomy.stuff_mask[c]:
            if empty:
                inst_pc[names[c]] = {"cov": None, "wcov": None, "prec": None, "rec": None,
                                     "n_gt": 0, "n_pred": 0, "n_val": 0}
            else:
                best = [max((pair_iou(a, b) for b in pl), default=0.0) for a in gl]
                total = sum(len(a) for a in gl)
                inst_pc[names[c]] = {
                    "cov": sum(best) / len(gl) if gl else None,
                    "wcov": sum(len(a) * m for a, m in zip(gl, best)) / total if gl else None,
                    "prec": len(valid) / len(pl) if pl else None,
                    "rec": len(valid) / len(gl) if gl else None,
                    "n_gt": len(gl), "n_pred": len(pl), "n_val": len(valid),
                }
        if empty:
            pan_pc[names[c]] = {"pq": None, "sq": None, "rq": None, "pq_dagger": None}
            continue
        tp = len(valid)
        sq = sum(valid) / tp if tp else 0.0
        rq = tp / (tp + 0.5 * (len(pl) - tp) + 0.5 * (len(gl) - tp))
        if taxonomy.stuff_mask[c]:
            dagger = pair_iou(gl[0], pl[0]) if gl and pl else 0.0
        else:
            dagger = sq * rq
        pan_pc[names[c]] = {"pq": sq * rq, "sq": sq, "rq": rq, "pq_dagger": dagger}

    def col(table, key):
        return [row[key] for row in table.values()]

    mprec, mrec = _oracle_mean(col(inst_pc, "prec")), _oracle_mean(col(inst_pc, "rec"))
    if mprec is None or mrec is None:
        f1 = None
    else:
        f1 = 0.0 if mprec + mrec == 0 else 2 * mprec * mrec / (mprec + mrec)
    instance = {"mcov": _oracle_mean(col(inst_pc, "cov")), "mwcov": _oracle_mean(col(inst_pc, "wcov")),
                "mprec": mprec, "mrec": mrec, "f1": f1, "per_class": inst_pc}

    def agg(classes):
        rows = [pan_pc[names[c]] for c in classes]
        return {k: _oracle_mean([r[k] for r in rows]) for k in ("pq", "rq", "sq")}

    things = [c for c in range(C) if not taxonomy.stuff_mask[c]]
    stuff = [c for c in range(C) if taxonomy.stuff_mask[c]]
    overall = agg(range(C))
    panoptic = {"pq": overall["pq"], "pq_dagger": _oracle_mean(col(pan_pc, "pq_dagger")),
                "rq": overall["rq"], "sq": overall["sq"], "things": agg(things), "stuff": agg(stuff),
                "per_class": pan_pc}
    return {"semantic": semantic, "instance": instance, "panoptic": panoptic}
