import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protodistill.exceptions import FormatError, ShapeError
from protodistill.models import forward, init_params, zero_params
from protodistill.prototype import (
    Prototype,
    crop_region,
    dataset_prototype,
    load_prototype,
    prototype_bytes,
    prototype_from_bytes,
    save_prototype,
    slice_centroids,
)
from protodistill.synthdata import LabeledItem


def brute_force_centroids(features, labels, n_classes):
    ch = features.shape[0]
    sums = [[0.0] * ch for _ in range(n_classes)]
    counts = [0] * n_classes
    h, w = labels.shape
    for i in range(h):
        for j in range(w):
            k = int(labels[i, j])
            if k == 0:
                continue
            counts[k - 1] += 1
            for c in range(ch):
                sums[k - 1][c] += features[c, i, j]
    z = np.zeros((n_classes, ch))
    for k in range(n_classes):
        if counts[k]:
            z[k] = [s / counts[k] for s in sums[k]]
    return z, np.array(counts) > 0


def test_single_class_constant_features():
    feats = np.broadcast_to(np.array([0.5, -1.0, 2.0])[:, None, None], (3, 4, 4))
    labels = np.zeros((4, 4), dtype=int)
    labels[1:3, 1:3] = 2
    z, present = slice_centroids(feats, labels, n_classes=2)
    assert present.tolist() == [False, True]
    np.testing.assert_array_equal(z[1], [0.5, -1.0, 2.0])
    np.testing.assert_array_equal(z[0], 0.0)


def test_two_class_hand_example():
    feats = np.stack([np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((2, 2))])
    labels = np.array([[1, 1], [0, 2]])
    z, present = slice_centroids(feats, labels, n_classes=2)
    np.testing.assert_array_equal(z, [[1.5, 1.0], [4.0, 1.0]])
    assert present.all()


@pytest.mark.parametrize("seed", range(5))
def test_centroids_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(5, 6, 7))
    labels = rng.integers(0, 5, size=(6, 7))
    labels[labels == 3] = 0  # leave one class absent
    z, present = slice_centroids(feats, labels, n_classes=4)
    zb, pb = brute_force_centroids(feats, labels, 4)
    np.testing.assert_array_equal(present, pb)
    np.testing.assert_allclose(z, zb, rtol=0, atol=1e-12)


def test_centroids_shape_mismatch():
    with pytest.raises(ShapeError):
        slice_centroids(np.zeros((3, 4, 4)), np.zeros((4, 5), dtype=int))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_centroids_lie_in_convex_hull(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(3, 5, 5))
    labels = rng.integers(0, 3, size=(5, 5))
    z, present = slice_centroids(feats, labels, n_classes=2)
    for k in np.flatnonzero(present):
        vecs = feats[:, labels == k + 1]
        assert np.all(z[k] >= vecs.min(axis=1) - 1e-12)
        assert np.all(z[k] <= vecs.max(axis=1) + 1e-12)


@pytest.mark.parametrize(
    "depth, window, expected",
    [(10, (0.0, 1.0), (0, 10)), (10, (0.3, 0.7), (3, 7)), (5, (0.5, 0.55), (2, 3))],
)
def test_crop_region(depth, window, expected):
    r = crop_region(depth, window)
    assert (r.start, r.stop) == expected


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.floats(0, 1), st.floats(0, 1))
def test_crop_region_never_empty(depth, a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    r = crop_region(depth, (lo, hi))
    assert len(r) >= 1 and 0 <= r.start and r.stop <= depth


def test_crop_region_rejects_inverted_window():
    with pytest.raises(ValueError):
        crop_region(10, (0.6, 0.4))


def _constant_teacher(head_bias):
    """Teacher whose logits equal ``head_bias`` everywhere."""
    p = zero_params("teacher3d", len(head_bias) - 1)
    arrays = p.arrays()
    arrays[-1] = np.asarray(head_bias, dtype=np.float64)
    return p.with_arrays(arrays)


def _volume(labels, seed):
    labels = np.asarray(labels, dtype=np.uint8)
    return LabeledItem(np.zeros((1,) + labels.shape), labels, {"seed": seed})


def test_dataset_prototype_single_slice_equals_slice_centroids():
    teacher = init_params("teacher3d", 2, seed=0)
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(1, 6, 6))
    vol = LabeledItem(rng.normal(size=(1, 1, 6, 6)), labels.astype(np.uint8), {"seed": 1})
    proto = dataset_prototype(teacher, [vol], window=(0.0, 1.0))
    feats = forward(teacher, vol.image[None]).value[0][:, 0]
    z, present = slice_centroids(feats, labels[0], 2)
    np.testing.assert_array_equal(proto.matrix, z)
    np.testing.assert_array_equal(proto.present, present)


def test_dataset_prototype_is_mean_over_slices():
    # two volumes, one slice each; class 1 present in both, class 2 in neither
    t1 = _constant_teacher([0.0, 1.0, 0.0])
    t2 = _constant_teacher([0.0, 3.0, 2.0])
    lab = np.zeros((1, 4, 4), dtype=np.uint8)
    lab[0, 1, 1] = 1
    p1 = dataset_prototype(t1, [_volume(lab, 0)], window=(0.0, 1.0))
    p2 = dataset_prototype(t2, [_volume(lab, 1)], window=(0.0, 1.0))
    assert p1.matrix[0].tolist() == [0.0, 1.0, 0.0]
    assert p2.matrix[0].tolist() == [0.0, 3.0, 2.0]
    # the same teacher on two slices of one volume: class row averages slices
    teacher = _constant_teacher([0.0, 1.0, 5.0])
    lab2 = np.zeros((2, 4, 4), dtype=np.uint8)
    lab2[0, 0, 0] = 1
    lab2[1, 2, 2] = 1
    proto = dataset_prototype(teacher, [_volume(lab2, 0)], window=(0.0, 1.0))
    assert proto.counts.tolist() == [2, 0]
    assert proto.present.tolist() == [True, False]
    np.testing.assert_array_equal(proto.matrix[1], 0.0)


def _identity_teacher():
    """C=1 teacher with logits (relu(x), relu(x) - 1) at every voxel."""
    p = zero_params("teacher3d", 1)
    arrays = [a.copy() for a in p.arrays()]
    for layer in range(3):
        arrays[2 * layer][0, 0, 1, 1, 1] = 1.0
    arrays[6][:, 0] = 1.0
    arrays[7][:] = [0.0, -1.0]
    return p.with_arrays(arrays)


def test_dataset_prototype_hand_mean_of_two_centroids():
    # slice centroids (1, 0) and (3, 2) -> (2, 1)
    image = np.stack([np.full((4, 4), 1.0), np.full((4, 4), 3.0)])[None]
    labels = np.zeros((2, 4, 4), dtype=np.uint8)
    labels[:, 1:3, 1:3] = 1
    vol = LabeledItem(image, labels, {"seed": 0})
    proto = dataset_prototype(_identity_teacher(), [vol], window=(0.0, 1.0))
    np.testing.assert_allclose(proto.matrix, [[2.0, 1.0]], rtol=0, atol=1e-15)
    assert proto.counts.tolist() == [2]


def test_dataset_prototype_permutation_invariant():
    teacher = init_params("teacher3d", 3, seed=4)
    rng = np.random.default_rng(4)
    vols = [
        LabeledItem(rng.normal(size=(1, 5, 6, 6)), rng.integers(0, 4, size=(5, 6, 6)).astype(np.uint8), {"seed": s})
        for s in (11, 5, 8)
    ]
    a = dataset_prototype(teacher, vols)
    b = dataset_prototype(teacher, vols[::-1])
    assert np.max(np.abs(a.matrix - b.matrix)) <= 1e-12


def test_dataset_prototype_requires_organs_and_teacher():
    lab = np.zeros((3, 4, 4), dtype=np.uint8)
    with pytest.raises(ValueError):
        dataset_prototype(_constant_teacher([0.0, 1.0, 2.0]), [_volume(lab, 0)])
    with pytest.raises(ValueError):
        dataset_prototype(init_params("student2d", 2, 0), [_volume(lab, 0)])


def _proto():
    return Prototype(
        np.array([[0.5, 2.0, -1.0], [0.0, 0.0, 0.0]]),
        np.array([True, False]),
        (0.35, 0.65),
        np.array([7, 0]),
        "teacher3d/plain",
        "0f" * 32,
    )


def test_save_load_round_trip(tmp_path):
    proto = _proto()
    path = tmp_path / "p.proto"
    save_prototype(proto, path)
    assert load_prototype(path) == proto
    assert path.read_bytes()[:8] == b"PROTO1\0\0"


def test_truncated_prototype_file():
    data = prototype_bytes(_proto())
    for cut in (3, 12, len(data) - 1):
        with pytest.raises(FormatError):
            prototype_from_bytes(data[:cut])


def test_prototype_version_error_names_found_and_expected():
    data = bytearray(prototype_bytes(_proto()))
    data[5] = ord("2")
    with pytest.raises(FormatError, match=r"'2'.*expected '1'"):
        prototype_from_bytes(bytes(data))


def test_absent_rows_must_be_zero():
    with pytest.raises(ValueError):
        Prototype(np.ones((2, 3)), np.array([True, False]))
