"""Training losses of the three prediction heads, with analytic gradients.

The gradients stop at the prediction arrays; they exist to validate training
code and to back property tests, not to train anything here. Subgradients
use ``sign(0) = 0`` and resolve hinge kinks to zero.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

DELTA_V = 0.5
DELTA_D = 1.5
REG_WEIGHT = 0.001
PROB_FLOOR = 1e-12
NORM_FLOOR = 1e-9


@dataclass
class EmbeddingTerms:
    var: float
    dist: float
    reg: float  # unweighted mean L1 norm of the instance means

    @property
    def total(self) -> float:
        return self.var + self.dist + REG_WEIGHT * self.reg


@dataclass
class OffsetTerms:
    reg: float
    dir: float

    @property
    def total(self) -> float:
        return self.reg + self.dir


@dataclass
class LossBreakdown:
    semantic: float = 0.0
    embedding: EmbeddingTerms = None
    offset: OffsetTerms = None
    total: float = 0.0

    def to_dict(self) -> dict:
        d = {"L_s": self.semantic, "L": self.total}
        if self.embedding is not None:
            d["L_e"] = self.embedding.total
            d["L_e_parts"] = asdict(self.embedding)
        if self.offset is not None:
            d["L_o"] = self.offset.total
            d["L_o_parts"] = asdict(self.offset)
        return d


def cross_entropy(probs, labels) -> float:
    """Mean negative log-probability of the true class (probabilities floored at 1e-12)."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (len(probs),):
        raise ValueError(f"expected N x C probs and N labels, got {probs.shape} and {labels.shape}")
    if len(labels) and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("label out of range")
    if len(labels) == 0:
        return 0.0
    p = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(p, PROB_FLOOR)).mean())


def _groups(instances, n):
    inst = np.asarray(instances, dtype=np.int64)
    if inst.shape != (n,):
        raise ValueError("need one instance id per point")
    if n == 0:
        raise ValueError("no points")
    if inst.min() < 0:
        raise ValueError("every point must belong to a ground-truth instance (found id -1)")
    ids, inv = np.unique(inst, return_inverse=True)
    return inv.reshape(-1), np.bincount(inv.reshape(-1))


def _instance_means(x, inv, counts):
    sums = np.zeros((len(counts), x.shape[1]))
    np.add.at(sums, inv, x)
    return sums / counts[:, None]


def embedding_loss(embeddings, instances, delta_v=DELTA_V, delta_d=DELTA_D) -> EmbeddingTerms:
    """Discriminative loss with L1 distances: pull to the instance mean, push means apart.

    The push term averages over ordered instance pairs and is 0 with a single
    instance.
    """
    ef = np.asarray(embeddings, dtype=np.float64)
    inv, counts = _groups(instances, len(ef))
    k = len(counts)
    mu = _instance_means(ef, inv, counts)
    pull = np.maximum(np.abs(mu[inv] - ef).sum(axis=1) - delta_v, 0.0) ** 2
    var = float((np.bincount(inv, weights=pull) / counts).mean())
    dist = 0.0
    if k > 1:
        gap = np.abs(mu[:, None, :] - mu[None, :, :]).sum(axis=2)
        push = np.maximum(2 * delta_d - gap, 0.0) ** 2
        np.fill_diagonal(push, 0.0)
        dist = float(push.sum() / (k * (k - 1)))
    reg = float(np.abs(mu).sum(axis=1).mean())
    return EmbeddingTerms(var, dist, reg)


def embedding_loss_grad(embeddings, instances, delta_v=DELTA_V, delta_d=DELTA_D):
    """Gradient of ``embedding_loss(...).total`` with respect to the embeddings."""
    ef = np.asarray(embeddings, dtype=np.float64)
    inv, counts = _groups(instances, len(ef))
    k = len(counts)
    mu = _instance_means(ef, inv, counts)
    size = counts[inv][:, None].astype(np.float64)

    # pull term: h_j = [|mu_i - ef_j|_1 - dv]_+, loss_j = h_j^2 / (k |I_i|)
    diff = mu[inv] - ef
    h = np.maximum(np.abs(diff).sum(axis=1) - delta_v, 0.0)
    g_pt = (2 * h)[:, None] * np.sign(diff) / (k * size)  # d loss_j / d mu_i, and minus d/d ef_j
    g_mu = np.zeros_like(mu)
    np.add.at(g_mu, inv, g_pt)

    if k > 1:
        delta = mu[:, None, :] - mu[None, :, :]
        gap = np.abs(delta).sum(axis=2)
        hp = np.maximum(2 * delta_d - gap, 0.0)
        np.fill_diagonal(hp, 0.0)
        # both ordered pairs (a, b) and (b, a) contribute
        g_mu += (-4.0 / (k * (k - 1))) * (hp[:, :, None] * np.sign(delta)).sum(axis=1)
    g_mu += (REG_WEIGHT / k) * np.sign(mu)

    # mu_i depends on every member with weight 1 / |I_i|
    return g_mu[inv] / size - g_pt


def _centroid_targets(positions, instances):
    pos = np.asarray(positions, dtype=np.float64)
    inv, counts = _groups(instances, len(pos))
    return _instance_means(pos, inv, counts)[inv] - pos


def offset_loss(offsets, positions, instances) -> OffsetTerms:
    """L1 regression to the centroid offsets plus negative mean cosine similarity.

    Vectors shorter than 1e-9 contribute a cosine of 0.
    """
    o = np.asarray(offsets, dtype=np.float64)
    if o.shape != np.shape(positions) or o.ndim != 2 or o.shape[1] != 3:
        raise ValueError(f"offsets {o.shape} and positions {np.shape(positions)} must both be N x 3")
    t = _centroid_targets(positions, instances)
    reg = float(np.abs(o - t).sum(axis=1).mean())
    no = np.linalg.norm(o, axis=1)
    nt = np.linalg.norm(t, axis=1)
    ok = (no >= NORM_FLOOR) & (nt >= NORM_FLOOR)
    cos = np.zeros(len(o))
    cos[ok] = (o[ok] * t[ok]).sum(axis=1) / (no[ok] * nt[ok])
    return OffsetTerms(reg, float(-cos.mean()))


def offset_loss_grad(offsets, positions, instances):
    """Gradient of ``offset_loss(...).total`` with respect to the offsets."""
    o = np.asarray(offsets, dtype=np.float64)
    if o.shape != np.shape(positions):
        raise ValueError("offsets and positions must have equal shapes")
    t = _centroid_targets(positions, instances)
    n = len(o)
    grad = np.sign(o - t) / n
    no = np.linalg.norm(o, axis=1)
    nt = np.linalg.norm(t, axis=1)
    ok = (no >= NORM_FLOOR) & (nt >= NORM_FLOOR)
    ohat = o[ok] / no[ok, None]
    that = t[ok] / nt[ok, None]
    cos = (ohat * that).sum(axis=1)
    grad[ok] -= (that - cos[:, None] * ohat) / (no[ok, None] * n)
    return grad


def total_loss(parts: LossBreakdown, w_embed=1.0, w_offset=0.1, w_reg=0.0) -> float:
    """Weighted sum of the head losses.

    The weight regulariser needs network weights, so its term is always 0
    here; ``w_reg`` is accepted so configurations round-trip unchanged.
    """
    total = parts.semantic
    if parts.embedding is not None:
        total += w_embed * parts.embedding.total
    if parts.offset is not None:
        total += w_offset * parts.offset.total
    return float(total + w_reg * 0.0)


def loss_breakdown(probs=None, labels=None, embeddings=None, offsets=None, positions=None,
                   instances=None, w_embed=1.0, w_offset=0.1, w_reg=0.0) -> LossBreakdown:
    """Evaluate whichever heads are supplied and combine them."""
    out = LossBreakdown()
    if probs is not None:
        out.semantic = cross_entropy(probs, labels)
    if embeddings is not None:
        out.embedding = embedding_loss(embeddings, instances)
    if offsets is not None:
        out.offset = offset_loss(offsets, positions, instances)
    out.total = total_loss(out, w_embed, w_offset, w_reg)
    return out
