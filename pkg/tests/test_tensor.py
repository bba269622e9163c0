import math

import numpy as np
import pytest

from probekit.exceptions import DimensionError, InputError, NumericError
from probekit.tensor import (
    Rng,
    Tensor,
    add_bias,
    concat,
    conv2d,
    cross_entropy,
    grad_check,
    leaky_relu,
    matmul,
    maxpool2d,
    scale,
    softmax,
    softmax_cross_entropy,
    sum_all,
)


# ---------- Rng ----------
def test_rng_same_seed_same_stream():
    a, b = Rng(42), Rng(42)
    assert np.array_equal(a.next_u64(16), b.next_u64(16))
    assert np.array_equal(a.normal((3, 4)), b.normal((3, 4)))


def test_rng_stream_is_resumable():
    whole = Rng(3).uniform(10)
    r = Rng(3)
    parts = np.concatenate([r.uniform(4), r.uniform(6)])
    assert np.array_equal(whole, parts)


def test_rng_splitmix_reference_value():
    # first splitmix64 output for seed 0
    assert int(Rng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF


def test_rng_derive_gives_distinct_streams():
    base = Rng(9)
    assert not np.array_equal(base.derive(0).uniform(8), base.derive(1).uniform(8))
    assert np.array_equal(base.derive(2, 5).uniform(8), Rng(9).derive(2, 5).uniform(8))


def test_rng_normal_moments():
    z = Rng(1).normal(20000)
    assert abs(z.mean()) < 0.05
    assert abs(z.std() - 1.0) < 0.05


def test_rng_uniform_range_and_permutation():
    u = Rng(4).uniform(1000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert sorted(Rng(4).permutation(50).tolist()) == list(range(50))


# ---------- Tensor ----------
def test_tensor_is_read_only():
    t = Tensor([[1.0, 2.0]])
    with pytest.raises(ValueError):
        t.data[0, 0] = 5.0
    assert t.data.dtype == np.float32


def test_detach_cuts_gradient_path():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = sum_all(scale(x.detach(), 2.0))
    y.backward()
    assert x.grad is None


# ---------- matmul ----------
def test_matmul_identity():
    b = np.arange(6, dtype=np.float32).reshape(3, 2)
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(b)).data, b)


def test_matmul_hand_example():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [1]]))
    assert out.data.tolist() == [[2.0], [4.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_matmul_gradients_match_finite_differences(rng):
    assert grad_check(matmul, [rng.normal((4, 5)), rng.normal((5, 3))], eps=1e-3) < 1e-3


# ---------- leaky_relu ----------
@pytest.mark.parametrize(
    "x, alpha, expected",
    [([2.0, -2.0], 0.5, [2.0, -1.0]), ([-4.0, 0.0, 3.0], 0.5, [-2.0, 0.0, 3.0]), ([1.5, -0.7], 1.0, [1.5, -0.7])],
)
def test_leaky_relu_values(x, alpha, expected):
    assert np.allclose(leaky_relu(Tensor(x), alpha).data, expected)


def test_leaky_relu_derivative_at_zero_is_alpha():
    x = Tensor([0.0], requires_grad=True)
    sum_all(leaky_relu(x, 0.25)).backward()
    assert x.grad.tolist() == [0.25]


def test_leaky_relu_rejects_alpha_outside_unit_interval():
    with pytest.raises(InputError):
        leaky_relu(Tensor([1.0]), 1.5)


def test_leaky_relu_gradient_away_from_kink(rng):
    x = rng.normal((5, 5))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    assert grad_check(lambda t: leaky_relu(t, 0.5), [x]) < 1e-4


# ---------- conv2d ----------
def test_conv_identity_kernel():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    assert np.array_equal(out.data, x)


def test_conv_all_ones_on_constant_field_valid():
    x = np.full((1, 5, 5, 1), 2.0)
    out = conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))), Tensor([0.0]), padding="valid")
    assert out.shape == (1, 3, 3, 1)
    assert np.allclose(out.data, 18.0)


def test_conv_same_padding_output_shapes():
    x = Tensor(np.zeros((2, 28, 28, 1)))
    out = conv2d(x, Tensor(np.zeros((5, 5, 1, 32))), Tensor(np.zeros(32)))
    assert out.shape == (2, 28, 28, 32)
    strided = conv2d(Tensor(np.zeros((1, 7, 7, 2))), Tensor(np.zeros((3, 3, 2, 4))), Tensor(np.zeros(4)), stride=2)
    assert strided.shape == (1, 4, 4, 4)


def test_conv_kernel_larger_than_input_valid():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 2, 1))), Tensor(np.zeros((3, 3, 1, 1))), Tensor([0.0]), padding="valid")


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 3, 1, 1))), Tensor([0.0]))


# ---------- maxpool2d ----------
def test_maxpool_single_window():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    assert maxpool2d(Tensor(x), 2, 2).data.reshape(-1).tolist() == [4.0]


def test_maxpool_constant_field():
    out = maxpool2d(Tensor(np.full((1, 6, 6, 2), 1.5)), 2, 2)
    assert out.shape == (1, 3, 3, 2)
    assert np.all(out.data == 1.5)


def test_maxpool_ties_route_gradient_to_lowest_index():
    x = Tensor(np.ones((1, 2, 2, 1)), requires_grad=True)
    sum_all(maxpool2d(x, 2, 2)).backward()
    assert x.grad.reshape(-1).tolist() == [1.0, 0.0, 0.0, 0.0]


def test_maxpool_window_too_large():
    with pytest.raises(DimensionError):
        maxpool2d(Tensor(np.zeros((1, 2, 2, 1))), 3, 1)


# ---------- softmax cross-entropy ----------
def test_cross_entropy_uniform_logits():
    labels = np.eye(10)[[3]]
    loss, _ = softmax_cross_entropy(np.zeros((1, 10)), labels)
    assert loss == pytest.approx(math.log(10), abs=1e-6)


def test_cross_entropy_saturated_margin():
    logits = np.zeros((1, 4))
    logits[0, 2] = 30.0
    loss, _ = softmax_cross_entropy(logits, np.eye(4)[[2]])
    assert loss < 1e-9


def test_cross_entropy_gradient_formula():
    logits = np.array([[1.0, 2.0, 0.5], [0.0, 0.0, 0.0]])
    labels = np.eye(3)[[1, 0]]
    _, grad = softmax_cross_entropy(logits, labels)
    assert np.allclose(grad, (softmax(logits) - labels) / 2)


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(InputError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([[1, 1, 0], [0, 0, 1]]))
    with pytest.raises(InputError):
        softmax_cross_entropy(np.zeros((2, 0)), np.zeros((2, 0)))


def test_cross_entropy_finite_differences(rng):
    labels = np.eye(5)[[0, 3, 1, 4]]
    assert grad_check(lambda z: cross_entropy(z, labels), [rng.normal((4, 5))]) < 1e-3


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.normal((6, 7)) * 10)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


# ---------- concat ----------
def test_concat_values_and_empty():
    assert concat(Tensor([1, 2]), Tensor([3]), axis=0).data.tolist() == [1.0, 2.0, 3.0]
    x = Tensor([4.0, 5.0])
    assert np.array_equal(concat(x, Tensor(np.zeros(0)), axis=0).data, x.data)


def test_concat_split_round_trip(rng):
    x = rng.normal((3, 7)).astype(np.float32)
    joined = concat(Tensor(x[:, :4]), Tensor(x[:, 4:]), axis=1)
    assert np.array_equal(joined.data, x)


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        concat(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3))), axis=1)


def test_concat_backward_splits_at_seam():
    a = Tensor(np.zeros((1, 2)), requires_grad=True)
    b = Tensor(np.zeros((1, 1)), requires_grad=True)
    out = concat(a, b, axis=1)
    out.backward(np.array([[1.0, 2.0, 3.0]]))
    assert a.grad.tolist() == [[1.0, 2.0]]
    assert b.grad.tolist() == [[3.0]]


# ---------- grad_check ----------
def test_grad_check_linear_is_exact(rng):
    assert grad_check(lambda x: scale(x, 3.0), [rng.normal((3, 3))]) < 1e-7


def test_grad_check_rejects_bad_eps():
    with pytest.raises(InputError):
        grad_check(lambda x: x, [np.zeros(2)], eps=0.0)


def test_grad_check_non_finite():
    with pytest.raises(NumericError):
        grad_check(lambda x: scale(x, 2.0), [np.array([np.inf, 1.0])])


def test_add_bias_accumulates_over_batch():
    x = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    sum_all(add_bias(x, b)).backward()
    assert b.grad.tolist() == [3.0, 3.0]


def test_ops_are_deterministic(rng):
    x = rng.normal((2, 6, 6, 3))
    k = rng.normal((3, 3, 3, 4))
    bias = rng.normal(4)
    first = conv2d(Tensor(x), Tensor(k), Tensor(bias)).data
    second = conv2d(Tensor(x), Tensor(k), Tensor(bias)).data
    assert first.tobytes() == second.tobytes()
