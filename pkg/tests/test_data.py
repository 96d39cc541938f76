"""Synthetic generators, directory ingestion, metrics (with brute-force oracles)."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import mmtl.data as D
from mmtl.data import (
    SyntheticWorld,
    flat_plane_scene,
    least_squares_intersection,
    load_image_directory_episodes,
    metric_accuracy_ci,
    metric_nil,
    metric_threshold_accuracy,
    ramp_scene,
    read_split_classes,
    render_line_bundle,
    sample_classification_episode,
    sample_dense_regression_episode,
    sample_vector_regression_episode,
)
from mmtl.tensor import ShapeError


def small_world(seed=0):
    return SyntheticWorld(seed=seed, image_size=16, label_size=16,
                          train_subtasks=6, val_subtasks=3, test_subtasks=4,
                          train_classes=8, val_classes=4, test_classes=6)


# ---------------------------------------------------------------------------
# classification episodes
# ---------------------------------------------------------------------------


def test_classification_episode_sizes():
    ep = sample_classification_episode(small_world(), n_way=5, k_shot=1,
                                       n_query=15)
    assert ep.support_x.shape[0] == 5
    assert ep.query_x.shape[0] == 75
    assert set(ep.support_y) == set(range(5))
    assert set(ep.query_y) == set(range(5))


def test_classification_deterministic_replay():
    a = sample_classification_episode(small_world(3), 3, 2, 4, episode_index=5)
    b = sample_classification_episode(small_world(3), 3, 2, 4, episode_index=5)
    assert np.array_equal(a.support_x, b.support_x)
    assert np.array_equal(a.query_x, b.query_x)
    assert np.array_equal(a.query_y, b.query_y)


def test_classification_pool_classes_disjoint():
    w = small_world()
    assert not set(w.class_pool("train")) & set(w.class_pool("test"))
    assert not set(w.class_pool("train")) & set(w.class_pool("val"))


def test_classification_insufficient_classes():
    with pytest.raises(ValueError):
        sample_classification_episode(small_world(), n_way=20, k_shot=1,
                                      n_query=1)


def test_classification_nearest_centroid_beats_chance():
    # brute-force oracle: nearest pixel-space class centroid
    correct = total = 0
    for i in range(6):
        ep = sample_classification_episode(small_world(1), 5, 5, 6,
                                           episode_index=i)
        cents = np.stack([
            ep.support_x[ep.support_y == c].reshape(5, -1).mean(axis=0)
            for c in range(5)])
        for x, y in zip(ep.query_x, ep.query_y):
            d = np.linalg.norm(cents - x.reshape(-1), axis=1)
            correct += int(d.argmin() == y)
            total += 1
    assert correct / total > 0.3  # chance is 0.2


# ---------------------------------------------------------------------------
# dense regression episodes
# ---------------------------------------------------------------------------


def test_flat_plane_constant_depth_and_normals():
    s = flat_plane_scene(0.4)
    d = s.depth(16)
    n = s.normals(16)
    assert np.allclose(d, 0.4)
    assert np.allclose(n[2], 1.0) and np.allclose(n[:2], 0.0)


def test_ramp_matches_plane_equation():
    s = ramp_scene(z0=0.5, gx=0.2, gy=-0.1)
    d = s.depth(16)[0]
    vv, uu = D._grid(16)
    want = 0.5 + 0.2 * (uu - 0.5) - 0.1 * (vv - 0.5)
    assert np.max(np.abs(d - want)) < 1e-12


def test_dense_episode_labels_valid():
    for kind, channels in (("depth", 1), ("normal", 3)):
        ep = sample_dense_regression_episode(small_world(), kind, 4, 3,
                                             episode_index=1)
        assert ep.support_y.shape == (4, channels, 16, 16)
        if kind == "depth":
            assert ep.support_y.min() >= 0.0 and ep.support_y.max() <= 1.0
        else:
            norms = np.linalg.norm(ep.support_y, axis=1)
            assert np.max(np.abs(norms - 1.0)) < 1e-6


def test_dense_episode_deterministic():
    a = sample_dense_regression_episode(small_world(2), "depth", 3, 3,
                                        episode_index=7)
    b = sample_dense_regression_episode(small_world(2), "depth", 3, 3,
                                        episode_index=7)
    assert np.array_equal(a.support_x, b.support_x)
    assert np.array_equal(a.query_y, b.query_y)


def test_dense_subtask_pool_enforced():
    w = small_world()
    with pytest.raises(ValueError):
        sample_dense_regression_episode(w, "depth", 2, 2, pool="train",
                                        subtask_id=max(w.domain_pool("test")))


# ---------------------------------------------------------------------------
# vanishing point episodes
# ---------------------------------------------------------------------------


def test_vp_center_bundle_oracle():
    vp = np.array([0.5, 0.5])
    angles = np.array([0.2, 1.0, 1.9, 2.6])
    lines = [(vp + 0.3 * np.array([np.cos(a), np.sin(a)]), a) for a in angles]
    rec = least_squares_intersection(lines)
    assert np.max(np.abs(rec - vp)) < 1e-10
    img = render_line_bundle(vp, angles, 16, 3, 0.02)
    assert img.shape == (3, 16, 16)


def test_vp_episode_oracle_recovers_labels():
    ep = sample_vector_regression_episode(small_world(4), 3, 2, episode_index=2)
    labels = np.concatenate([ep.support_y, ep.query_y])
    for i, lines in enumerate(ep.meta["lines"]):
        rec = least_squares_intersection(lines)
        assert np.max(np.abs(rec - labels[i])) < 1e-3


def test_vp_labels_inside_unit_square():
    for i in range(5):
        ep = sample_vector_regression_episode(small_world(5), 4, 4,
                                              episode_index=i)
        for y in np.concatenate([ep.support_y, ep.query_y]):
            assert 0.0 <= y[0] <= 1.0 and 0.0 <= y[1] <= 1.0


def test_vp_episode_deterministic():
    a = sample_vector_regression_episode(small_world(6), 3, 3, episode_index=1)
    b = sample_vector_regression_episode(small_world(6), 3, 3, episode_index=1)
    assert np.array_equal(a.support_x, b.support_x)
    assert np.array_equal(a.support_y, b.support_y)


# ---------------------------------------------------------------------------
# image directory ingestion
# ---------------------------------------------------------------------------


def _make_image_root(tmp_path, classes, images_per_class=2, size=8):
    rng = np.random.default_rng(0)
    for cls in classes:
        d = tmp_path / cls
        d.mkdir()
        for i in range(images_per_class):
            arr = (rng.uniform(size=(size, size, 3)) * 255).astype(np.uint8)
            Image.fromarray(arr).save(d / f"img{i}.png")
    (tmp_path / "train.txt").write_text("\n".join(classes), encoding="utf-8")
    return tmp_path


def test_directory_minimal_episode(tmp_path):
    classes = [f"c{i}" for i in range(5)]
    root = _make_image_root(tmp_path, classes)
    eps = list(load_image_directory_episodes(root, 5, 1, 1, "train",
                                             image_size=8, episodes=1))
    assert len(eps) == 1
    ep = eps[0]
    assert ep.support_x.shape == (5, 3, 8, 8)
    assert ep.query_x.shape == (5, 3, 8, 8)
    assert ep.support_x.min() >= 0.0 and ep.support_x.max() <= 1.0


def test_directory_overlapping_splits_rejected(tmp_path):
    root = _make_image_root(tmp_path, ["a", "b"])
    (tmp_path / "test.txt").write_text("b", encoding="utf-8")
    with pytest.raises(ValueError) as ei:
        read_split_classes(root)
    assert "b" in str(ei.value)


def test_directory_deterministic(tmp_path):
    root = _make_image_root(tmp_path, [f"c{i}" for i in range(6)], 3)
    a = list(load_image_directory_episodes(root, 3, 1, 1, "train", 8, seed=9,
                                           episodes=2))
    b = list(load_image_directory_episodes(root, 3, 1, 1, "train", 8, seed=9,
                                           episodes=2))
    for ea, eb in zip(a, b):
        assert np.array_equal(ea.support_x, eb.support_x)
        assert np.array_equal(ea.query_y, eb.query_y)


def test_directory_small_class_excluded(tmp_path):
    root = _make_image_root(tmp_path, [f"c{i}" for i in range(5)], 2)
    lone = tmp_path / "tiny"
    lone.mkdir()
    Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8)).save(lone / "one.png")
    (tmp_path / "train.txt").write_text(
        "\n".join([f"c{i}" for i in range(5)] + ["tiny"]), encoding="utf-8")
    with pytest.warns(UserWarning, match="tiny"):
        eps = list(load_image_directory_episodes(root, 5, 1, 1, "train", 8,
                                                 episodes=1))
    assert len(eps) == 1


def test_directory_undecodable_skipped(tmp_path):
    root = _make_image_root(tmp_path, [f"c{i}" for i in range(5)], 3)
    bad = tmp_path / "c0" / "broken.png"
    bad.write_bytes(b"not an image")
    with pytest.warns(UserWarning, match="broken"):
        eps = list(load_image_directory_episodes(root, 5, 1, 2, "train", 8,
                                                 episodes=1))
    assert eps[0].query_x.shape[0] == 10


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def test_threshold_accuracy_values():
    assert metric_threshold_accuracy(np.zeros(4), np.zeros(4)) == 1.0
    assert metric_threshold_accuracy(np.array([0.0005, 0.01]),
                                     np.zeros(2), tau=1e-3) == 0.5
    noise = np.random.default_rng(0).normal(size=100)
    assert metric_threshold_accuracy(noise, np.zeros(100), tau=0.0) == 0.0


def test_threshold_accuracy_shape_mismatch():
    with pytest.raises(ShapeError):
        metric_threshold_accuracy(np.zeros(3), np.zeros(4))


def test_nil_one_hot_embeddings():
    sup = np.eye(3)
    labels = np.array([0, 1, 2])
    acc = metric_nil(sup, labels, sup.copy(), labels)
    assert acc == 1.0


def test_nil_tie_takes_lowest_support_index():
    sup = np.array([[1.0, 0.0], [0.0, 1.0]])
    sup_labels = np.array([7, 8])
    q = np.array([[1.0, 1.0]])  # equidistant from both supports
    assert metric_nil(sup, sup_labels, q, np.array([7])) == 1.0
    assert metric_nil(sup, sup_labels, q, np.array([8])) == 0.0


def test_nil_zero_norm_rejected():
    with pytest.raises(ValueError):
        metric_nil(np.zeros((1, 2)), np.array([0]), np.ones((1, 2)),
                   np.array([0]))


def _nil_brute_force(sup, sup_y, que, que_y):
    correct = 0
    for q, y in zip(que, que_y):
        best, best_sim = None, -np.inf
        for i, s in enumerate(sup):
            sim = float(q @ s / (np.linalg.norm(q) * np.linalg.norm(s)))
            if sim > best_sim:  # strict: ties keep the lowest index
                best, best_sim = i, sim
        correct += int(sup_y[best] == y)
    return correct / len(que_y)


def test_nil_agrees_with_brute_force_100_instances():
    rng = np.random.default_rng(42)
    for _ in range(100):
        n, m, d = rng.integers(2, 8), rng.integers(1, 8), rng.integers(2, 6)
        sup = rng.normal(size=(n, d))
        que = rng.normal(size=(m, d))
        sup_y = rng.integers(0, 3, size=n)
        que_y = rng.integers(0, 3, size=m)
        assert metric_nil(sup, sup_y, que, que_y) == \
            _nil_brute_force(sup, sup_y, que, que_y)


def test_accuracy_ci_values():
    p, hw = metric_accuracy_ci(50, 100)
    assert p == 0.5 and abs(hw - 0.098) < 1e-3
    assert metric_accuracy_ci(100, 100) == (1.0, 0.0)
    assert metric_accuracy_ci(0, 100) == (0.0, 0.0)


def test_accuracy_ci_rejects_empty():
    with pytest.raises(ValueError):
        metric_accuracy_ci(0, 0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(0, 40))
def test_generators_pure_function_of_seed(seed, index):
    w1, w2 = small_world(seed), small_world(seed)
    a = sample_classification_episode(w1, 3, 1, 2, episode_index=index)
    b = sample_classification_episode(w2, 3, 1, 2, episode_index=index)
    assert np.array_equal(a.support_x, b.support_x)
    assert np.array_equal(a.query_x, b.query_x)
