"""Random loss configurations kept away from kinks, and a central-difference gradient."""

import numpy as np

from pcpanoptic.losses import DELTA_D, DELTA_V, NORM_FLOOR, embedding_loss, offset_loss

STEP = 1e-5
KINK_MARGIN = 1e-3


def central_difference(f, x, h=STEP):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_error(analytic, numeric):
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-8))


def _groups(inst):
    ids, inv = np.unique(inst, return_inverse=True)
    counts = np.bincount(inv)
    return inv, counts


def embedding_kink_distance(ef, inst):
    inv, counts = _groups(inst)
    mu = np.zeros((len(counts), ef.shape[1]))
    np.add.at(mu, inv, ef)
    mu /= counts[:, None]
    diff = mu[inv] - ef
    d = [np.abs(diff).min(), np.abs(np.abs(diff).sum(axis=1) - DELTA_V).min(), np.abs(mu).min()]
    if len(counts) > 1:
        delta = mu[:, None] - mu[None]
        off = ~np.eye(len(counts), dtype=bool)
        d.append(np.abs(delta[off]).min())
        d.append(np.abs(np.abs(delta).sum(axis=2)[off] - 2 * DELTA_D).min())
    return float(min(d))


def offset_kink_distance(o, pos, inst):
    inv, counts = _groups(inst)
    c = np.zeros((len(counts), 3))
    np.add.at(c, inv, pos)
    t = c[inv] / counts[inv, None] - pos
    return float(min(np.abs(o - t).min(), np.linalg.norm(o, axis=1).min(), np.linalg.norm(t, axis=1).min()))


def random_embedding_case(rng):
    """An (EF, instances) pair at least ``KINK_MARGIN`` from every kink."""
    while True:
        k = int(rng.integers(1, 5))
        t = int(rng.integers(2, 6))
        n_per = rng.integers(1, 8, k)
        inst = np.repeat(np.arange(k), n_per)
        centers = rng.normal(0, 1.5, (k, t))
        ef = centers[inst] + rng.normal(0, 0.4, (len(inst), t))
        if embedding_kink_distance(ef, inst) >= KINK_MARGIN:
            return ef, inst


def random_offset_case(rng):
    while True:
        k = int(rng.integers(1, 5))
        inst = np.repeat(np.arange(k), rng.integers(2, 8, k))
        pos = rng.normal(0, 2, (k, 3))[inst] + rng.normal(0, 0.5, (len(inst), 3))
        o = rng.normal(0, 0.6, pos.shape)
        if offset_kink_distance(o, pos, inst) >= KINK_MARGIN and np.linalg.norm(o, axis=1).min() > NORM_FLOOR:
            return o, pos, inst


def embedding_total(inst):
    return lambda x: embedding_loss(x, inst).total


def offset_total(pos, inst):
    return lambda x: offset_loss(x, pos, inst).total
