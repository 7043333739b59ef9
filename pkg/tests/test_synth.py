import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.stats import binomtest

from pcpanoptic.cluster import mean_shift
from pcpanoptic.io import encode_ply
from pcpanoptic.model import NPM3D_TAXONOMY, PointCloud, SegmentationResult
from pcpanoptic.synth import (
    ORACLE_MAX_POINTS,
    NoiseSpec,
    SceneSpec,
    _lattice_codes,
    generate_scene,
    oracle_metrics,
    simulate_predictions,
)

TAX = NPM3D_TAXONOMY


def same_partition(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.array_equal(a[:, None] == a[None], b[:, None] == b[None])


def test_scene_is_deterministic():
    spec = SceneSpec.mixed(6, extent=(12, 12, 5), density=40, seed=3)
    a, b = generate_scene(spec), generate_scene(spec)
    assert encode_ply(a, binary=True) == encode_ply(b, binary=True)
    assert generate_scene(SceneSpec.mixed(6, extent=(12, 12, 5), density=40, seed=4)) != a


def test_stuff_only_scene():
    cloud = generate_scene(SceneSpec(extent=(10, 10, 4), density=30))
    assert np.all(cloud.instance == -1)
    assert set(np.unique(cloud.semantic)) == {TAX.index(c) for c in ("ground", "building", "barrier")}


def test_three_poles():
    cloud = generate_scene(SceneSpec(extent=(10, 10, 4), density=50, counts={"pole": 3}))
    ids = np.unique(cloud.instance[cloud.instance >= 0])
    assert ids.tolist() == [0, 1, 2]
    assert np.all(cloud.semantic[cloud.instance >= 0] == TAX.index("pole"))


def test_ground_point_count_is_poisson():
    cloud = generate_scene(SceneSpec(extent=(10, 10, 4), density=100, building=False, barrier=False, seed=11))
    assert abs(len(cloud) - 10_000) <= 3 * 100


def test_every_archetype_appears_with_its_class():
    cloud = generate_scene(SceneSpec.mixed(12, extent=(20, 20, 6), density=40, seed=1))
    classes = {TAX.class_names[c] for c in np.unique(cloud.semantic[cloud.instance >= 0])}
    assert classes == {"pole", "bollard", "trash_can", "pedestrian", "car", "natural"}


def test_instances_keep_their_clearance():
    spec = SceneSpec.mixed(18, extent=(20, 20, 6), density=60, seed=2)
    cloud = generate_scene(spec)
    tol = 6 * spec.jitter
    tree = cKDTree(cloud.positions)
    for i in np.unique(cloud.instance[cloud.instance >= 0]):
        own = cloud.instance == i
        near = tree.query_ball_point(cloud.positions[own], spec.clearance - tol)
        hits = np.unique(np.concatenate([np.asarray(n, dtype=np.int64) for n in near]))
        assert np.all(cloud.instance[hits] == i)


def test_placement_failure_is_reported():
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(extent=(3, 3, 3), density=10, counts={"car": 4}))


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(density=0)
    with pytest.raises(ValueError):
        SceneSpec(counts={"tree": 1})
    with pytest.raises(ValueError):
        NoiseSpec(sem_confusion=1.5)
    with pytest.raises(ValueError):
        NoiseSpec(emb_sigma=-1)


def test_lattice_codes_are_separated():
    codes = _lattice_codes(200, 5, 3.0)
    assert np.all(codes[0] == 0)
    d = np.abs(codes[:, None] - codes[None]).sum(axis=2)
    np.fill_diagonal(d, np.inf)
    assert d.min() >= 3.0
    # L2 separation matters for the flat mean-shift kernel
    d2 = np.linalg.norm(codes[:, None] - codes[None], axis=2)
    np.fill_diagonal(d2, np.inf)
    assert d2.min() >= 3.0


def test_zero_noise_predictions_are_exact(small_scene):
    preds = simulate_predictions(small_scene, NoiseSpec(), TAX.num_classes)
    assert np.array_equal(preds.class_probs.argmax(axis=1), small_scene.semantic)
    for i in np.unique(small_scene.instance):
        rows = preds.embeddings[small_scene.instance == i]
        assert np.all(rows == rows[0])
    things = small_scene.instance >= 0
    target = np.zeros_like(small_scene.positions)
    for i in np.unique(small_scene.instance[things]):
        m = small_scene.instance == i
        target[m] = small_scene.positions[m].mean(axis=0) - small_scene.positions[m]
    assert np.allclose(preds.offsets, target, atol=1e-12)


def test_flip_rate():
    n = 100_000
    cloud = PointCloud(np.zeros((n, 3)), semantic=np.arange(n) % TAX.num_classes, instance=np.full(n, -1))
    preds = simulate_predictions(cloud, NoiseSpec(sem_confusion=0.1, seed=5), TAX.num_classes)
    flips = int((preds.class_probs.argmax(axis=1) != cloud.semantic).sum())
    assert abs(flips / n - 0.1) <= 0.01
    assert binomtest(flips, n, 0.1).pvalue > 1e-4


def test_mean_shift_recovers_noisy_codes(small_scene):
    noise = NoiseSpec(emb_sigma=3.0 / 20, emb_sep=3.0, seed=9)
    preds = simulate_predictions(small_scene, noise, TAX.num_classes)
    things = small_scene.instance >= 0
    lab = mean_shift(preds.embeddings[things], bandwidth=noise.emb_sep / 2)
    assert same_partition(lab, small_scene.instance[things])


def test_predictions_are_deterministic(small_scene):
    noise = NoiseSpec(0.2, 0.3, 3.0, 0.1, seed=4)
    a = simulate_predictions(small_scene, noise, TAX.num_classes)
    b = simulate_predictions(small_scene, noise, TAX.num_classes)
    assert all(np.array_equal(x, y) for x, y in ((a.class_probs, b.class_probs), (a.embeddings, b.embeddings),
                                                  (a.offsets, b.offsets)))


def test_predictions_need_labels():
    with pytest.raises(ValueError):
        simulate_predictions(PointCloud(np.zeros((3, 3))), NoiseSpec(), 4)


def test_oracle_perfect_and_empty():
    sem = np.array([0, 0, 2, 2, 2, 7, 7])
    inst = np.array([-1, -1, 0, 0, 0, 1, 1])
    gt = SegmentationResult(sem, inst)
    rep = oracle_metrics(gt, gt, TAX)
    assert rep["panoptic"]["pq"] == 1 and rep["instance"]["f1"] == 1
    empty = oracle_metrics(gt, SegmentationResult(np.zeros(7, int), np.full(7, -1)), TAX)
    pole = empty["instance"]["per_class"]["pole"]
    assert pole["prec"] is None and pole["rec"] == 0


def test_oracle_size_guard():
    n = ORACLE_MAX_POINTS + 1
    r = SegmentationResult(np.zeros(n, int), np.full(n, -1))
    with pytest.raises(ValueError):
        oracle_metrics(r, r, TAX)
