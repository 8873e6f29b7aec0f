import math

import numpy as np
import pytest

from mfmnet import layers
from mfmnet.errors import (
    CacheMismatchError,
    InvalidLabelError,
    InvalidParameterError,
    InvalidShapeError,
)
from mfmnet.layers import EVAL, TRAIN, ConvParams
from mfmnet.tensor import make_rng


def test_conv_identity_kernel():
    x = make_rng(0).standard_normal((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 1, 1), dtype=np.float32)
    for c in range(3):
        w[c, c, 0, 0] = 1
    out, _ = layers.conv2d_forward(x, ConvParams(w, np.zeros(3, dtype=np.float32)))
    np.testing.assert_allclose(out, x, rtol=1e-6)


def test_conv_matches_direct_sum():
    rng = make_rng(1)
    x = rng.standard_normal((1, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    out, _ = layers.conv2d_forward(x, ConvParams(w, b, stride=2))
    assert out.shape == (1, 3, 2, 3)
    for o in range(3):
        for y in range(2):
            for xx in range(3):
                expected = b[o] + np.sum(x[0, :, 2 * y : 2 * y + 3, 2 * xx : 2 * xx + 2] * w[o])
                assert out[0, o, y, xx] == pytest.approx(expected)


def test_conv_full_conv1_shape():
    x = np.zeros((1, 1, 128, 128), dtype=np.float32)
    w = np.zeros((48, 1, 9, 9), dtype=np.float32)
    out, _ = layers.conv2d_forward(x, ConvParams(w, np.zeros(48, dtype=np.float32)))
    assert out.shape == (1, 48, 120, 120)


def test_conv_errors():
    w = np.zeros((2, 1, 5, 5))
    with pytest.raises(InvalidShapeError):
        layers.conv2d_forward(np.zeros((1, 1, 4, 4)), ConvParams(w, np.zeros(2)))
    with pytest.raises(InvalidShapeError):
        layers.conv2d_forward(np.zeros((1, 2, 8, 8)), ConvParams(w, np.zeros(2)))
    with pytest.raises(InvalidShapeError):
        ConvParams(w, np.zeros(3))
    with pytest.raises(InvalidParameterError):
        ConvParams(w, np.zeros(2), stride=0)


def test_mfm_forward_values():
    a = np.array([[1.0, -2.0, 3.0]])
    b = np.array([[0.5, -1.0, 3.0]])
    out, cache = layers.mfm_forward(a, b)
    assert out.tolist() == [[1.0, -1.0, 3.0]]
    # Ties go to the first candidate
    assert cache.saved["a_wins"].tolist() == [[True, False, True]]


def test_mfm_backward_masks_are_complementary():
    rng = make_rng(2)
    a = rng.standard_normal((2, 4, 3, 3))
    b = rng.standard_normal((2, 4, 3, 3))
    out, cache = layers.mfm_forward(a, b)
    grad = rng.standard_normal(out.shape)
    grad_a, grad_b = layers.mfm_backward(grad, cache)
    np.testing.assert_array_equal(grad_a + grad_b, grad)
    assert np.all((grad_a == 0) | (grad_b == 0))
    assert layers.gradient_sparsity(grad_a, grad_b) == pytest.approx(0.5)


def test_mfm_swapping_candidates_swaps_gradients():
    rng = make_rng(5)
    a = rng.standard_normal((2, 4, 3, 3))
    b = rng.standard_normal((2, 4, 3, 3))
    out_ab, cache_ab = layers.mfm_forward(a, b)
    out_ba, cache_ba = layers.mfm_forward(b, a)
    np.testing.assert_array_equal(out_ab, out_ba)
    grad = rng.standard_normal(out_ab.shape)
    grad_a, grad_b = layers.mfm_backward(grad, cache_ab)
    swapped_b, swapped_a = layers.mfm_backward(grad, cache_ba)
    np.testing.assert_array_equal(grad_a, swapped_a)
    np.testing.assert_array_equal(grad_b, swapped_b)


def test_mfm_output_is_dense_where_relu_is_sparse():
    x = make_rng(6).standard_normal((4, 8, 6, 6))
    out, _ = layers.mfm_forward(*layers.mfm_split(x))
    assert layers.activation_sparsity(out) == 0.0
    relu_out, _ = layers.relu_forward(x)
    assert 0.3 < layers.activation_sparsity(relu_out) < 0.7


def test_mfm_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        layers.mfm_forward(np.zeros((1, 2)), np.zeros((1, 3)))


def test_mfm_split_matches_pair_form():
    x = make_rng(3).standard_normal((2, 6, 4, 4))
    a, b = layers.mfm_split(x)
    assert a.shape == b.shape == (2, 3, 4, 4)
    out, _ = layers.mfm_forward(a, b)
    np.testing.assert_array_equal(out, np.maximum(x[:, :3], x[:, 3:]))
    with pytest.raises(InvalidShapeError):
        layers.mfm_split(np.zeros((1, 5, 2, 2)))


def test_relu():
    x = np.array([[-1.0, 0.0, 2.0]])
    out, cache = layers.relu_forward(x)
    assert out.tolist() == [[0.0, 0.0, 2.0]]
    assert layers.relu_backward(np.ones_like(x), cache).tolist() == [[0.0, 0.0, 1.0]]
    assert layers.activation_sparsity(out) == pytest.approx(2 / 3)


@pytest.mark.parametrize(
    "size,k,stride,expected",
    (
        (120, 2, 2, 60),
        (56, 2, 2, 28),
        (24, 2, 2, 12),
        (9, 2, 2, 5),
        (7, 3, 2, 3),
        (5, 2, 2, 3),
        (4, 2, 2, 2),
        (2, 2, 2, 1),
        # The trailing window would start past the input
        (4, 1, 2, 2),
    ),
)
def test_pool_output_size(size, k, stride, expected):
    assert layers.pool_output_size(size, k, stride) == expected


def test_pool_output_size_errors():
    with pytest.raises(InvalidShapeError):
        layers.pool_output_size(1, 2, 2)
    with pytest.raises(InvalidParameterError):
        layers.pool_output_size(4, 0, 2)


def test_maxpool_ceil_mode_border():
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    out, _ = layers.maxpool_forward(x, 2, 2)
    assert out.shape == (1, 1, 2, 2)
    assert out[0, 0].tolist() == [[4.0, 5.0], [7.0, 8.0]]


def test_maxpool_ties_route_to_first_index():
    x = np.ones((1, 1, 2, 2))
    out, cache = layers.maxpool_forward(x, 2, 2)
    grad = layers.maxpool_backward(np.full(out.shape, 3.0), cache)
    assert grad[0, 0].tolist() == [[3.0, 0.0], [0.0, 0.0]]


def test_maxpool_backward_accumulates_overlaps():
    x = np.zeros((1, 1, 3, 3))
    x[0, 0, 1, 1] = 5.0
    out, cache = layers.maxpool_forward(x, 2, 1)
    assert out.shape == (1, 1, 2, 2)
    grad = layers.maxpool_backward(np.ones(out.shape), cache)
    assert grad[0, 0, 1, 1] == 4.0
    assert grad.sum() == 4.0


def test_fc():
    x = np.array([[1.0, 2.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    b = np.array([0.0, 1.0, -1.0])
    out, cache = layers.fc_forward(x, w, b)
    assert out.tolist() == [[1.0, 3.0, 2.0]]
    grad_x, grad_w, grad_b = layers.fc_backward(np.ones((1, 3)), cache)
    assert grad_x.tolist() == [[2.0, 2.0]]
    assert grad_w.tolist() == [[1.0, 2.0]] * 3
    assert grad_b.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(InvalidShapeError):
        layers.fc_forward(np.zeros((1, 3)), w, b)


def test_dropout_eval_is_identity():
    x = make_rng(4).standard_normal((3, 5))
    out, cache = layers.dropout_forward(x, 0.7, EVAL)
    assert out is x
    assert layers.dropout_backward(np.ones_like(x), cache).tolist() == np.ones_like(x).tolist()


def test_dropout_train_scaling_and_determinism():
    x = np.ones((4, 100))
    out, cache = layers.dropout_forward(x, 0.7, TRAIN, rng_seed=5)
    again, _ = layers.dropout_forward(x, 0.7, TRAIN, rng_seed=5)
    np.testing.assert_array_equal(out, again)
    assert set(np.unique(out).round(6).tolist()) <= {0.0, round(1 / 0.3, 6)}
    grad = layers.dropout_backward(np.ones_like(x), cache)
    np.testing.assert_array_equal(grad, out)


def test_dropout_expectation():
    x = np.full((250_000,), 2.0)
    out, _ = layers.dropout_forward(x, 0.7, TRAIN, rng_seed=6)
    assert out.mean() == pytest.approx(2.0, rel=0.01)


@pytest.mark.parametrize("ratio", (-0.1, 1.0, 1.5))
def test_dropout_invalid_ratio(ratio):
    with pytest.raises(InvalidParameterError):
        layers.dropout_forward(np.ones(3), ratio, TRAIN, rng_seed=0)


def test_softmax_xent_uniform_logits():
    loss, grad = layers.softmax_xent(np.zeros((2, 4)), [0, 3])
    assert loss == pytest.approx(math.log(4))
    np.testing.assert_allclose(grad[0], [(0.25 - 1) / 2, 0.125, 0.125, 0.125])
    np.testing.assert_allclose(grad.sum(axis=1), 0, atol=1e-12)


def test_softmax_xent_is_stable_for_large_logits():
    loss, grad = layers.softmax_xent(np.array([[1000.0, 0.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(grad))


@pytest.mark.parametrize("labels", ([2], [-1]))
def test_softmax_xent_invalid_labels(labels):
    with pytest.raises(InvalidLabelError):
        layers.softmax_xent(np.zeros((1, 2)), labels)


def test_crop_mirror_eval_center():
    image = np.arange(144 * 144, dtype=np.float32).reshape(1, 144, 144)
    crop = layers.crop_mirror(image, EVAL)
    assert crop.shape == (1, 128, 128)
    np.testing.assert_array_equal(crop, image[:, 8:136, 8:136])


def test_crop_mirror_train_offsets_and_mirroring():
    image = np.arange(6 * 6, dtype=np.float32).reshape(1, 6, 6)
    rng = make_rng(7)
    corners = set()
    mirrored = 0
    trials = 2000
    for _ in range(trials):
        crop = layers.crop_mirror(image, TRAIN, rng, crop_size=4, input_size=6)
        is_mirrored = crop[0, 0, 0] > crop[0, 0, -1]
        mirrored += is_mirrored
        window = crop[..., ::-1] if is_mirrored else crop
        corners.add((int(window[0, 0, 0]) // 6, int(window[0, 0, 0]) % 6))
    # Every offset 0..2 in both directions is reachable
    assert corners == {(top, left) for top in range(3) for left in range(3)}
    assert abs(mirrored / trials - 0.5) < 0.05


def test_crop_mirror_errors():
    with pytest.raises(InvalidShapeError):
        layers.crop_mirror(np.zeros((1, 100, 100)), EVAL)
    with pytest.raises(InvalidShapeError):
        layers.crop_mirror(np.zeros((1, 10, 10)), EVAL, crop_size=12, input_size=10)
    with pytest.raises(InvalidParameterError):
        layers.crop_mirror(np.zeros((1, 144, 144)), TRAIN)


def test_crop_mirror_batch():
    batch = np.zeros((3, 1, 36, 36), dtype=np.float32)
    out = layers.crop_mirror_batch(batch, TRAIN, 0, crop_size=32)
    assert out.shape == (3, 1, 32, 32)


def test_backward_rejects_foreign_cache():
    out, cache = layers.relu_forward(np.ones((2, 2)))
    with pytest.raises(CacheMismatchError):
        layers.mfm_backward(np.ones((2, 2)), cache)
    with pytest.raises(InvalidShapeError):
        layers.relu_backward(np.ones((3, 2)), cache)
