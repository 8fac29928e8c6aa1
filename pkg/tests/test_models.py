import numpy as np
import pytest

from protodistill import autodiff as ad
from protodistill.exceptions import FormatError, ShapeError
from protodistill.models import (
    checkpoint_bytes,
    forward,
    init_params,
    load_checkpoint,
    params_from_bytes,
    predict_labels,
    save_checkpoint,
    zero_params,
)

# conv 1->8, 8->16, 16->16 with 3x3 kernels plus a 16->5 pointwise head, all with bias
STUDENT_C4_PARAMS = (8 * 1 * 9 + 8) + (16 * 8 * 9 + 16) + (16 * 16 * 9 + 16) + (5 * 16 + 5)


def test_init_is_deterministic_per_seed():
    a = init_params("student2d", 4, seed=7)
    b = init_params("student2d", 4, seed=7)
    c = init_params("student2d", 4, seed=8)
    assert a.equals(b)
    assert not a.equals(c)


def test_head_shape_and_parameter_count():
    p = init_params("student2d", 4, seed=0)
    assert p.layers[-1][0].shape == (5, 16, 1, 1)
    assert p.n_parameters() == STUDENT_C4_PARAMS == 3653
    t = init_params("teacher3d", 4, seed=0)
    assert t.layers[0][0].shape == (8, 1, 3, 3, 3)
    assert t.layers[-1][0].shape == (5, 16, 1, 1, 1)


def test_init_bounds():
    p = init_params("teacher3d", 3, seed=1)
    for w, b in p.layers:
        bound = 1 / np.sqrt(np.prod(w.shape[1:]))
        assert np.abs(w.value).max() <= bound
        assert np.abs(b.value).max() <= bound


def test_init_rejects_bad_arguments():
    with pytest.raises(ValueError):
        init_params("student2d", 1, seed=0)
    with pytest.raises(ValueError):
        init_params("unet", 4, seed=0)


def test_zero_params_give_zero_logits():
    out = forward(zero_params("student2d", 3), np.zeros((1, 1, 8, 8)))
    np.testing.assert_array_equal(out.value, 0.0)


@pytest.mark.parametrize("arch, shape", [("student2d", (1, 1, 32, 32)), ("teacher3d", (1, 1, 16, 32, 32))])
def test_forward_keeps_spatial_shape(arch, shape):
    p = init_params(arch, 4, seed=0)
    out = forward(p, np.random.default_rng(0).normal(size=shape))
    assert out.shape == (1, 5) + shape[2:]


def test_forward_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        forward(init_params("student2d", 2, 0), np.zeros((1, 1, 4, 4, 4)))
    with pytest.raises(ShapeError):
        forward(init_params("student2d", 2, 0), np.zeros((1, 2, 4, 4)))


def test_forward_is_bitwise_deterministic():
    p = init_params("student2d", 3, seed=3)
    x = np.random.default_rng(1).normal(size=(2, 1, 12, 12))
    np.testing.assert_array_equal(forward(p, x).value, forward(p, x).value)


def test_gradient_reaches_first_kernel():
    p = init_params("student2d", 2, seed=2)
    x = np.random.default_rng(2).normal(size=(1, 1, 6, 6))
    ad.backward(ad.sum_all(forward(p, x)))
    first = p.layers[0][0]
    assert np.any(first.grad != 0)

    # finite-difference spot check of one first-layer weight
    def value(w):
        q = p.with_arrays([w] + p.arrays()[1:])
        return forward(q, x).value.sum()

    w0 = p.arrays()[0].copy()
    h, idx = 1e-5, (3, 0, 1, 2)
    wp, wm = w0.copy(), w0.copy()
    wp[idx] += h
    wm[idx] -= h
    numeric = (value(wp) - value(wm)) / (2 * h)
    assert first.grad[idx] == pytest.approx(numeric, rel=1e-6, abs=1e-9)


def test_predict_argmax_and_tie_break():
    logits = np.array([0.1, 0.9]).reshape(1, 2, 1, 1)
    assert predict_labels(logits)[0, 0, 0] == 1
    tie = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
    assert predict_labels(tie)[0, 0, 0] == 0


def test_predict_matches_brute_force_loop():
    rng = np.random.default_rng(9)
    logits = rng.normal(size=(2, 4, 5, 6))
    logits[0, 2, 1, 1] = logits[0, 3, 1, 1] = 9.0  # a tie
    got = predict_labels(logits)
    for b in range(2):
        for i in range(5):
            for j in range(6):
                vals = list(logits[b, :, i, j])
                assert got[b, i, j] == vals.index(max(vals))


def test_checkpoint_round_trip(tmp_path):
    p = init_params("teacher3d", 3, seed=5)
    p.config_hash = "ab" * 32
    path = tmp_path / "t.ckpt"
    save_checkpoint(p, path)
    q = load_checkpoint(path)
    assert q.equals(p) and q.arch == "teacher3d" and q.config_hash == p.config_hash
    assert path.read_bytes()[:8] == b"PDNET\0\0\0"


def test_checkpoint_truncated_and_bad_version():
    data = checkpoint_bytes(init_params("student2d", 2, seed=0))
    with pytest.raises(FormatError, match="truncated"):
        params_from_bytes(data[:-3])
    bumped = data[:8] + (2).to_bytes(4, "little") + data[12:]
    with pytest.raises(FormatError, match="version"):
        params_from_bytes(bumped)
