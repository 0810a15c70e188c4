import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from setnet.data import (
    PART_SETS,
    PointCloud,
    SynthSpec,
    augment,
    corrupt,
    furthest_point_sample,
    is_test_id,
    mnist_to_pointset,
    normalize_unit_sphere,
    read_cloud_file,
    read_dataset,
    read_idx_images,
    read_idx_labels,
    resample,
    rotate_z,
    split_dataset,
    synth_generate,
    write_cloud_file,
    write_dataset,
    write_idx_images,
    write_idx_labels,
)
from setnet.data.mnist import load_mnist_pointsets
from setnet.errors import ConfigError, DimensionError, EmptySetError, ParseError


# ------------------------------------------------------------------- clouds


def test_point_cloud_validation():
    with pytest.raises(DimensionError):
        PointCloud(np.zeros(3))
    with pytest.raises(DimensionError):
        PointCloud(np.zeros((3, 2)), per_point_labels=[0, 1])
    with pytest.raises(DimensionError):
        PointCloud(np.zeros((3, 3)), normals=np.zeros((2, 3)))


def test_normalize_unit_sphere(rng):
    c = normalize_unit_sphere(PointCloud(rng.normal(size=(50, 3)) * 7 + 3))
    np.testing.assert_allclose(c.points.mean(axis=0), 0, atol=1e-12)
    assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0, abs=1e-15)


def test_rotate_z_is_counterclockwise():
    np.testing.assert_allclose(rotate_z(np.array([[1.0, 0.0, 0.5]]), np.pi / 2), [[0.0, 1.0, 0.5]],
                               atol=1e-15)


def test_augment_rotates_points_and_normals(rng):
    c = PointCloud(rng.normal(size=(10, 3)), normals=rng.normal(size=(10, 3)))
    out = augment(c, rng, sigma=0.0, angle=0.3)
    np.testing.assert_array_equal(out.points[:, 2], c.points[:, 2])
    np.testing.assert_allclose(np.linalg.norm(out.points, axis=1), np.linalg.norm(c.points, axis=1))
    np.testing.assert_allclose(out.normals, rotate_z(c.normals, 0.3))
    jittered = augment(PointCloud(np.zeros((20000, 2))), np.random.default_rng(0), sigma=0.02)
    assert jittered.points.std() == pytest.approx(0.02, rel=0.02)


# --------------------------------------------------------------------- FPS


def brute_force_best_min_distance(points, k):
    best = 0.0
    for combo in itertools.combinations(range(len(points)), k):
        sub = points[list(combo)]
        d = np.sqrt(((sub[:, None] - sub[None]) ** 2).sum(-1))
        best = max(best, d[np.triu_indices(k, 1)].min())
    return best


def min_pairwise(points):
    d = np.sqrt(((points[:, None] - points[None]) ** 2).sum(-1))
    return d[np.triu_indices(len(points), 1)].min()


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 9), st.integers(0, 2**31 - 1))
def test_fps_is_within_factor_two_of_the_optimum(n, seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, size=(n, 3))
    k = int(rng.integers(2, n + 1))
    idx = furthest_point_sample(pts, k)
    assert len(set(idx.tolist())) == k and idx[0] == 0
    # greedy max-min selection is a 2-approximation of the best spread
    assert 2.0 * min_pairwise(pts[idx]) >= brute_force_best_min_distance(pts, k) - 1e-12


def test_fps_ties_go_to_the_lowest_index():
    pts = np.array([[0.0, 0, 0], [1.0, 0, 0], [-1.0, 0, 0], [0.5, 0, 0]])
    np.testing.assert_array_equal(furthest_point_sample(pts, 3), [0, 1, 2])
    with pytest.raises(DimensionError):
        furthest_point_sample(pts, 5)


# -------------------------------------------------------------- corruption


def test_corruptions(rng):
    c = PointCloud(rng.normal(size=(40, 3)), per_point_labels=np.arange(40) % 3)
    assert corrupt(c, "delete_random", 0.5, rng).n == 20
    assert corrupt(c, "delete_furthest", 0.875, rng).n == 5
    assert corrupt(c, "delete_random", 0.0, rng).n == 40
    out = corrupt(c, "outliers", 0.2, rng)
    assert out.n == 48 and (out.per_point_labels[40:] == -1).all()
    assert np.linalg.norm(out.points[40:], axis=1).max() <= 1.0
    assert corrupt(c, "perturb", 0.0, rng) is c
    assert not np.array_equal(corrupt(c, "perturb", 0.05, rng).points, c.points)
    for proto, sev in (("delete_random", 1.0), ("outliers", -0.1), ("perturb", -1.0), ("melt", 0.1)):
        with pytest.raises(ConfigError):
            corrupt(c, proto, sev, rng)
    # floor(p n) deletions never empty a cloud
    assert corrupt(PointCloud(np.zeros((1, 3))), "delete_random", 0.9, rng).n == 1


def test_furthest_deletion_keeps_an_fps_subset(rng):
    c = PointCloud(rng.normal(size=(30, 3)))
    out = corrupt(c, "delete_furthest", 0.5, rng)
    np.testing.assert_array_equal(out.points, c.points[furthest_point_sample(c.points, 15)])


def test_resample(rng):
    c = PointCloud(np.arange(15.0).reshape(5, 3))
    assert resample(c, 3, rng).n == 3
    np.testing.assert_array_equal(resample(c, 7, rng).points[5:], c.points[:2])


# -------------------------------------------------------------- synthetic


def test_synth_is_deterministic_and_well_formed():
    spec = SynthSpec(points=64, clouds_per_class=5, seed=3)
    a, b = synth_generate(spec), synth_generate(spec)
    assert len(a) == 20
    for x, y in zip(a, b):
        assert x.id == y.id and np.array_equal(x.points, y.points)
    for c in a:
        shape = c.id.split("-")[0]
        assert set(np.unique(c.per_point_labels)) <= set(PART_SETS[shape])
        assert np.linalg.norm(c.points, axis=1).max() == pytest.approx(1.0)
        np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1.0)


def test_synth_class_subsets_keep_their_clouds():
    full = {c.id: c for c in synth_generate(SynthSpec(points=32, clouds_per_class=3))}
    part = synth_generate(SynthSpec(classes=("cone",), points=32, clouds_per_class=3))
    assert all(np.array_equal(c.points, full[c.id].points) and c.class_label == 0 for c in part)
    with pytest.raises(ConfigError):
        SynthSpec(classes=("torus",))


def test_split_is_a_fixed_hash_partition():
    clouds = synth_generate(SynthSpec(points=8, clouds_per_class=200))
    train, test = split_dataset(clouds)
    assert len(train) + len(test) == 800
    assert 0.15 < len(test) / 800 < 0.25
    assert all(is_test_id(c.id) for c in test) and not any(is_test_id(c.id) for c in train)


# ------------------------------------------------------------------- MNIST


def test_idx_round_trip(tmp_path, rng):
    images = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    labels = np.array([7, 0, 9], dtype=np.uint8)
    for suffix in ("", ".gz"):
        write_idx_images(images, tmp_path / f"img{suffix}")
        write_idx_labels(labels, tmp_path / f"lab{suffix}")
        np.testing.assert_array_equal(read_idx_images(tmp_path / f"img{suffix}"), images)
        np.testing.assert_array_equal(read_idx_labels(tmp_path / f"lab{suffix}"), labels)


def test_idx_errors(tmp_path):
    write_idx_labels(np.array([1, 2], dtype=np.uint8), tmp_path / "lab")
    with pytest.raises(ParseError):
        read_idx_images(tmp_path / "lab")
    raw = (tmp_path / "lab").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(ParseError):
        read_idx_labels(tmp_path / "short")


def test_mnist_to_pointset():
    img = np.zeros((28, 28), dtype=np.uint8)
    img[0, 0] = 255
    img[27, 27] = 200
    img[5, 5] = 128  # not above the threshold
    c = mnist_to_pointset(img, label=3)
    assert c.points.shape == (256, 2) and c.class_label == 3
    np.testing.assert_array_equal(c.points[:2], [[-1.0, 1.0], [1.0, -1.0]])
    np.testing.assert_array_equal(c.points[2:4], c.points[:2])  # padding cycles
    with pytest.raises(EmptySetError):
        mnist_to_pointset(np.zeros((28, 28)))


def test_mnist_subsampling_is_a_sorted_subset():
    img = np.full((28, 28), 255, dtype=np.uint8)
    c = mnist_to_pointset(img, np.random.default_rng(0))
    assert c.n == 256
    order = np.lexsort((c.points[:, 0], -c.points[:, 1]))
    np.testing.assert_array_equal(order, np.arange(256))  # still in raster order
    assert len({tuple(p) for p in c.points}) == 256


def test_load_mnist_pointsets(tmp_path, rng):
    images = np.zeros((4, 28, 28), dtype=np.uint8)
    images[:, 10:20, 10:20] = 255
    write_idx_images(images, tmp_path / "img.gz")
    write_idx_labels(np.array([1, 2, 3, 4], dtype=np.uint8), tmp_path / "lab.gz")
    clouds = load_mnist_pointsets(tmp_path / "img.gz", tmp_path / "lab.gz", limit=3)
    assert [c.class_label for c in clouds] == [1, 2, 3]
    write_idx_labels(np.array([1], dtype=np.uint8), tmp_path / "one")
    with pytest.raises(ParseError):
        load_mnist_pointsets(tmp_path / "img.gz", tmp_path / "one")


# ---------------------------------------------------------------- text io


def test_cloud_file_round_trip_is_exact(tmp_path, rng):
    c = PointCloud(rng.normal(size=(9, 3)) * 1e-7, per_point_labels=np.arange(9), id="x")
    write_cloud_file(c, tmp_path / "x.txt")
    back = read_cloud_file(tmp_path / "x.txt")
    assert np.array_equal(back.points, c.points)
    assert np.array_equal(back.per_point_labels, c.per_point_labels) and back.id == "x"


def test_cloud_file_without_header(tmp_path):
    (tmp_path / "p.txt").write_text("0 1\n2 3\n\n4 5\n")
    c = read_cloud_file(tmp_path / "p.txt")
    assert c.points.shape == (3, 2) and c.per_point_labels is None


def test_cloud_file_errors_name_the_line(tmp_path):
    (tmp_path / "bad.txt").write_text("# setnet-cloud v1 dims=3 labels=0\n0 1 2\n0 1\n")
    with pytest.raises(ParseError, match="line 3"):
        read_cloud_file(tmp_path / "bad.txt")
    (tmp_path / "nan.txt").write_text("0 1 x\n")
    with pytest.raises(ParseError, match="line 1"):
        read_cloud_file(tmp_path / "nan.txt")
    (tmp_path / "empty.txt").write_text("# nothing\n")
    with pytest.raises(ParseError):
        read_cloud_file(tmp_path / "empty.txt")


def test_dataset_directory_round_trip(tmp_path):
    clouds = synth_generate(SynthSpec(points=16, clouds_per_class=2))
    splits = ["train", "test"] * 4
    write_dataset(tmp_path, clouds, splits, ("sphere", "cube", "cylinder", "cone"))
    back, back_splits, classes = read_dataset(tmp_path)
    assert back_splits == splits and classes == ("sphere", "cube", "cylinder", "cone")
    for a, b in zip(clouds, back):
        assert a.id == b.id and a.class_label == b.class_label
        assert np.array_equal(a.points, b.points)
        assert np.array_equal(a.per_point_labels, b.per_point_labels)
    with pytest.raises(ParseError):
        read_dataset(tmp_path / "missing")
