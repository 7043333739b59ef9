import math

import numpy as np
import pytest
from _grad import (
    central_difference,
    embedding_total,
    offset_total,
    random_embedding_case,
    random_offset_case,
    rel_error,
)
from hypothesis import given, settings, strategies as st

from pcpanoptic.losses import (
    REG_WEIGHT,
    EmbeddingTerms,
    LossBreakdown,
    OffsetTerms,
    cross_entropy,
    embedding_loss,
    embedding_loss_grad,
    loss_breakdown,
    offset_loss,
    offset_loss_grad,
    total_loss,
)

# ------------------------------------------------------------- cross-entropy


def test_ce_one_hot_is_zero():
    assert cross_entropy(np.eye(3)[[0, 2, 1]], [0, 2, 1]) == 0.0


def test_ce_uniform():
    assert cross_entropy(np.full((5, 4), 0.25), [0, 1, 2, 3, 0]) == pytest.approx(math.log(4), abs=1e-12)


def test_ce_random_vs_direct_sum():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6), 50)
    y = rng.integers(0, 6, 50)
    direct = -sum(sum((y[i] == j) * math.log(p[i, j]) for j in range(6)) for i in range(50)) / 50
    assert cross_entropy(p, y) == pytest.approx(direct, rel=1e-12)


def test_ce_clamp_and_errors():
    assert cross_entropy(np.array([[1.0, 0.0]]), [1]) == pytest.approx(-math.log(1e-12))
    with pytest.raises(ValueError):
        cross_entropy(np.full((2, 2), 0.5), [0, 2])
    with pytest.raises(ValueError):
        cross_entropy(np.full((2, 2), 0.5), [0])


# ---------------------------------------------------------------- embedding


def test_embedding_single_instance_at_zero():
    t = embedding_loss(np.zeros((4, 5)), np.zeros(4, int))
    assert (t.var, t.dist, t.reg, t.total) == (0, 0, 0, 0)


@pytest.mark.parametrize("dim", [1, 2, 5, 8])
def test_embedding_exact_separation(dim):
    ef = np.zeros((6, dim))
    ef[3:, 0] = 3.0
    t = embedding_loss(ef, [0, 0, 0, 1, 1, 1])
    assert t.var == 0 and t.dist == 0
    assert t.total == pytest.approx(0.0015, abs=1e-15)


def test_embedding_close_means():
    ef = np.array([[0.0, 0], [1.0, 0]])
    assert embedding_loss(ef, [0, 1]).dist == pytest.approx(4.0)


def test_embedding_requires_assignment():
    with pytest.raises(ValueError):
        embedding_loss(np.zeros((2, 3)), [0, -1])
    with pytest.raises(ValueError):
        embedding_loss(np.zeros((0, 3)), [])


def test_embedding_matches_direct_sum():
    rng = np.random.default_rng(1)
    ef, inst = random_embedding_case(rng)
    ids = sorted(set(inst))
    mu = {i: ef[inst == i].mean(axis=0) for i in ids}
    var = sum(
        sum(max(np.abs(mu[i] - e).sum() - 0.5, 0) ** 2 for e in ef[inst == i]) / (inst == i).sum() for i in ids
    ) / len(ids)
    pairs = [(a, b) for a in ids for b in ids if a != b]
    dist = sum(max(3.0 - np.abs(mu[a] - mu[b]).sum(), 0) ** 2 for a, b in pairs) / len(pairs) if pairs else 0
    reg = sum(np.abs(mu[i]).sum() for i in ids) / len(ids)
    t = embedding_loss(ef, inst)
    assert (t.var, t.dist, t.reg) == pytest.approx((var, dist, reg), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embedding_permutation_and_translation(seed):
    rng = np.random.default_rng(seed)
    ef, inst = random_embedding_case(rng)
    base = embedding_loss(ef, inst)
    perm = rng.permutation(len(inst))
    p = embedding_loss(ef[perm], inst[perm])
    assert (p.var, p.dist, p.reg) == pytest.approx((base.var, base.dist, base.reg), rel=1e-12, abs=1e-15)
    # dyadic shift keeps the arithmetic exact
    shift = rng.integers(-8, 9, ef.shape[1]) * 0.25
    moved = embedding_loss(ef + shift, inst)
    assert moved.var == pytest.approx(base.var, abs=1e-12)
    assert moved.dist == pytest.approx(base.dist, abs=1e-12)


def test_embedding_grad_inactive_hinges_is_reg_only():
    ef = np.array([[0.1, 0.2], [0.2, 0.1], [4.0, 4.1], [4.1, 4.0]])
    inst = np.array([0, 0, 1, 1])
    g = embedding_loss_grad(ef, inst)
    # d/d ef of (REG_WEIGHT / k) * sum_i |mu_i|_1, with mu_i the mean of two points
    assert np.allclose(g, REG_WEIGHT / 2 / 2 * np.ones_like(ef), atol=1e-15)


def test_embedding_grad_single_point():
    assert np.abs(embedding_loss_grad(np.zeros((1, 3)), [0])).max() == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_embedding_grad_matches_finite_differences(seed):
    ef, inst = random_embedding_case(np.random.default_rng(seed))
    assert rel_error(embedding_loss_grad(ef, inst), central_difference(embedding_total(inst), ef)) <= 1e-4


# ------------------------------------------------------------------- offsets


def _blob(rng, k=3):
    inst = np.repeat(np.arange(k), 6)
    pos = rng.normal(0, 3, (k, 3))[inst] + rng.normal(0, 0.5, (len(inst), 3))
    cent = np.array([pos[inst == i].mean(axis=0) for i in range(k)])
    return pos, inst, cent[inst] - pos


def test_offset_exact_and_reversed():
    pos, inst, target = _blob(np.random.default_rng(2))
    t = offset_loss(target, pos, inst)
    assert t.reg == pytest.approx(0, abs=1e-12) and t.dir == pytest.approx(-1, abs=1e-12)
    assert t.total == pytest.approx(-1, abs=1e-12)
    assert offset_loss(-target, pos, inst).dir == pytest.approx(1, abs=1e-12)


def test_offset_zero_vectors_contribute_zero_cosine():
    pos = np.array([[0.0, 0, 0], [1, 0, 0], [0.5, 0, 0]])
    o = np.array([[0.5, 0, 0], [0, 0, 0], [0.3, 0, 0]])  # point 2 sits at the centroid
    t = offset_loss(o, pos, [0, 0, 0])
    assert t.dir == pytest.approx(-1 / 3)


def test_offset_matches_direct_sum():
    rng = np.random.default_rng(3)
    o, pos, inst = random_offset_case(rng)
    reg = direc = 0.0
    for j in range(len(pos)):
        c = pos[inst == inst[j]].mean(axis=0)
        tgt = c - pos[j]
        reg += np.abs(o[j] - tgt).sum()
        direc -= o[j] @ tgt / (np.linalg.norm(o[j]) * np.linalg.norm(tgt))
    t = offset_loss(o, pos, inst)
    assert (t.reg, t.dir) == pytest.approx((reg / len(pos), direc / len(pos)), rel=1e-12)


def test_offset_shape_mismatch():
    with pytest.raises(ValueError):
        offset_loss(np.zeros((3, 3)), np.zeros((2, 3)), [0, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_offset_bounds_and_translation(seed):
    rng = np.random.default_rng(seed)
    o, pos, inst = random_offset_case(rng)
    t = offset_loss(o, pos, inst)
    assert t.total >= -1 and t.reg >= 0 and -1 <= t.dir <= 1
    shift = rng.integers(-16, 17, 3) * 0.5
    moved = offset_loss(o, pos + shift, inst)
    assert moved.total == pytest.approx(t.total, abs=1e-12)


def test_offset_minimum_only_at_exact():
    rng = np.random.default_rng(4)
    pos, inst, target = _blob(rng)
    bumped = target.copy()
    bumped[0] *= 1.01  # parallel but not exact: dir stays -1, reg grows
    assert offset_loss(bumped, pos, inst).total > -1


def test_offset_grad_stationary_at_optimum():
    pos, inst, target = _blob(np.random.default_rng(5))
    assert np.abs(offset_loss_grad(target, pos, inst)).max() < 1e-12


def test_offset_grad_symmetric_points():
    pos = np.array([[1.0, 0, 0], [-1, 0, 0], [0, 2, 0], [0, -2, 0]])
    inst = np.zeros(4, int)
    o = np.array([[-0.7, 0.1, 0.05], [0.6, -0.2, 0.1], [0.2, -1.5, 0.3], [-0.1, 1.7, -0.2]])
    g = offset_loss_grad(o, pos, inst)
    assert rel_error(g, central_difference(offset_total(pos, inst), o)) <= 1e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_offset_grad_matches_finite_differences(seed):
    o, pos, inst = random_offset_case(np.random.default_rng(seed))
    assert rel_error(offset_loss_grad(o, pos, inst), central_difference(offset_total(pos, inst), o)) <= 1e-4


# --------------------------------------------------------------------- total


def test_total_loss_arithmetic():
    parts = LossBreakdown(1.0, EmbeddingTerms(2.0, 0.0, 0.0), OffsetTerms(0.0, -1.0))
    assert total_loss(parts, 1.0, 0.1) == pytest.approx(2.9)
    zero = LossBreakdown(0.0, EmbeddingTerms(0, 0, 0), OffsetTerms(0, 0))
    assert total_loss(zero, 5.0, 3.0, 2.0) == 0


def test_loss_breakdown_dict():
    rng = np.random.default_rng(6)
    pos, inst, target = _blob(rng)
    probs = np.full((len(pos), 4), 0.25)
    d = loss_breakdown(probs=probs, labels=inst, embeddings=np.zeros((len(pos), 5)), offsets=target,
                       positions=pos, instances=inst).to_dict()
    assert d["L_s"] == pytest.approx(math.log(4))
    assert d["L_o"] == pytest.approx(-1)
    assert d["L"] == pytest.approx(d["L_s"] + d["L_e"] - 0.1)
    assert set(d["L_e_parts"]) == {"var", "dist", "reg"} and set(d["L_o_parts"]) == {"reg", "dir"}
