"""Autodiff core: op gradients against central differences, tape contracts."""

import numpy as np
import pytest

from megdecode import tensor as T
from megdecode.errors import GradientError, ShapeError


def randt(rng, *shape, scale=1.0):
    return T.Tensor(scale * rng.standard_normal(shape), requires_grad=True)


def test_add_mul_grads():
    rng = np.random.default_rng(0)
    a, b = randt(rng, 3, 4), randt(rng, 3, 4)
    err = T.grad_check(lambda a, b: T.tsum(T.mul(T.add(a, b), a)), [a, b], max_coords=12)
    assert err < 1e-8


def test_div_sub_neg_grads():
    rng = np.random.default_rng(1)
    a = randt(rng, 4, 2)
    b = T.Tensor(rng.standard_normal((4, 2)) + 3.0, requires_grad=True)
    err = T.grad_check(lambda a, b: T.tsum(T.div(T.sub(a, T.neg(b)), b)), [a, b], max_coords=8)
    assert err < 1e-8


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "relu", "elu", "exp"])
def test_unary_grads(op):
    rng = np.random.default_rng(2)
    x = randt(rng, 5, 3)
    fn = getattr(T, op)
    err = T.grad_check(lambda x: T.tsum(fn(x)), [x], max_coords=15)
    assert err < 1e-7


def test_log_sqrt_grads():
    rng = np.random.default_rng(3)
    x = T.Tensor(rng.random((4, 4)) + 0.5, requires_grad=True)
    err = T.grad_check(lambda x: T.tmean(T.log(T.sqrt(x))), [x], max_coords=16)
    assert err < 1e-8


def test_matmul_grad_batched():
    rng = np.random.default_rng(4)
    a = randt(rng, 2, 3, 4, 5)
    b = randt(rng, 2, 3, 5, 2)
    err = T.grad_check(lambda a, b: T.tsum(T.tanh(T.matmul(a, b))), [a, b], max_coords=10)
    assert err < 1e-7


def test_matmul_grad_shared_weight():
    # rank-2 rhs broadcast against a batched lhs: grads sum over the batch
    rng = np.random.default_rng(5)
    a = randt(rng, 3, 4, 5)
    w = randt(rng, 5, 2)
    err = T.grad_check(lambda a, w: T.tsum(T.matmul(a, w)), [a, w], max_coords=10)
    assert err < 1e-8


def test_matmul_shape_errors():
    a, b = T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2)))
    with pytest.raises(ShapeError):
        T.matmul(a, b)
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones(3)), b)
    with pytest.raises(ShapeError):
        T.matmul(T.Tensor(np.ones((2, 2, 3))), T.Tensor(np.ones((3, 3, 2))))


def test_softmax_rows_and_grad():
    rng = np.random.default_rng(6)
    x = randt(rng, 4, 7)
    y = T.softmax(x, axis=-1)
    assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-12)
    w = T.Tensor(rng.standard_normal((4, 7)))
    err = T.grad_check(lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), w)), [x], max_coords=14)
    assert err < 1e-7


def test_softmax_shift_invariance():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 5))
    a = T.softmax(T.Tensor(x), axis=-1).data
    b = T.softmax(T.Tensor(x + 1000.0), axis=-1).data
    assert np.allclose(a, b, atol=1e-12)


def test_reductions_and_shape_ops():
    rng = np.random.default_rng(8)
    x = randt(rng, 2, 3, 4)
    err = T.grad_check(lambda x: T.tsum(T.tmean(x, axis=(0, 2))), [x], max_coords=10)
    assert err < 1e-9
    err = T.grad_check(lambda x: T.tsum(T.exp(T.transpose(x, (2, 0, 1)))), [x], max_coords=10)
    assert err < 1e-7
    err = T.grad_check(lambda x: T.tsum(T.reshape(x, (6, 4))[1:4, ::2]), [x], max_coords=10)
    assert err < 1e-9


def test_concat_stack_grads():
    rng = np.random.default_rng(9)
    a, b = randt(rng, 2, 3), randt(rng, 2, 2)
    err = T.grad_check(lambda a, b: T.tsum(T.tanh(T.concat([a, b], axis=1))), [a, b], max_coords=10)
    assert err < 1e-8
    c, d = randt(rng, 3, 2), randt(rng, 3, 2)
    err = T.grad_check(lambda c, d: T.tsum(T.mul(T.stack([c, d], axis=1), 0.5)), [c, d], max_coords=10)
    assert err < 1e-9


def test_concat_shape_validation():
    a, b = T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 3)))
    with pytest.raises(ShapeError):
        T.concat([a, b], axis=1)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((2, 5, 6, 3))
    w = rng.standard_normal((3, 3, 3, 4))
    b = rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding="valid").data
    ref = np.zeros((2, 3, 4, 4))
    for n in range(2):
        for i in range(3):
            for j in range(4):
                for f in range(4):
                    ref[n, i, j, f] = (x[n, i:i+3, j:j+3, :] * w[:, :, :, f]).sum() + b[f]
    assert np.allclose(out, ref, atol=1e-12)


def test_conv2d_same_padding_preserves_shape():
    rng = np.random.default_rng(11)
    for kh, kw in [(1, 1), (3, 3), (7, 7), (1, 128), (2, 4)]:
        x = T.Tensor(rng.standard_normal((1, 9, 11, 2)))
        w = T.Tensor(rng.standard_normal((kh, kw, 2, 3)) * 0.1)
        out = T.conv2d(x, w, padding="same")
        assert out.shape == (1, 9, 11, 3), (kh, kw)


def test_conv2d_grads():
    rng = np.random.default_rng(12)
    x = randt(rng, 2, 5, 6, 3)
    w = T.Tensor(0.3 * rng.standard_normal((3, 2, 3, 4)), requires_grad=True)
    b = randt(rng, 4)
    for pad in ("valid", "same"):
        err = T.grad_check(lambda x, w, b: T.tsum(T.tanh(T.conv2d(x, w, b, padding=pad))),
                           [x, w, b], max_coords=8)
        assert err < 1e-7, pad


def test_depthwise_matches_direct_loops():
    rng = np.random.default_rng(13)
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((2, 2, 3, 2))
    out = T.depthwise_conv2d(T.Tensor(x), T.Tensor(w)).data
    assert out.shape == (2, 4, 3, 6)
    for n in range(2):
        for i in range(4):
            for j in range(3):
                for c in range(3):
                    for m in range(2):
                        ref = (x[n, i:i+2, j:j+2, c] * w[:, :, c, m]).sum()
                        assert abs(out[n, i, j, c * 2 + m] - ref) < 1e-12


def test_depthwise_grads():
    rng = np.random.default_rng(14)
    x = randt(rng, 2, 6, 5, 3)
    w = T.Tensor(0.4 * rng.standard_normal((3, 1, 3, 2)), requires_grad=True)
    err = T.grad_check(lambda x, w: T.tsum(T.sigmoid(T.depthwise_conv2d(x, w))),
                       [x, w], max_coords=8)
    assert err < 1e-7


def test_avg_pool_truncates_and_averages():
    x = np.arange(2 * 1 * 10 * 1, dtype=np.float64).reshape(2, 1, 10, 1)
    out = T.avg_pool2d(T.Tensor(x), (1, 4)).data
    assert out.shape == (2, 1, 2, 1)   # trailing 2 columns dropped
    assert out[0, 0, 0, 0] == x[0, 0, :4, 0].mean()
    assert out[0, 0, 1, 0] == x[0, 0, 4:8, 0].mean()


def test_avg_pool_grad():
    rng = np.random.default_rng(15)
    x = randt(rng, 2, 4, 9, 3)
    err = T.grad_check(lambda x: T.tsum(T.tanh(T.avg_pool2d(x, (2, 4)))), [x], max_coords=10)
    assert err < 1e-8


def test_cross_entropy_grad_is_probs_minus_onehot():
    rng = np.random.default_rng(16)
    logits = T.Tensor(rng.standard_normal((6, 4)), requires_grad=True)
    onehot = np.eye(4)[rng.integers(0, 4, 6)]
    with T.Tape():
        loss = T.softmax_cross_entropy(logits, onehot)
        T.backward(loss)
    z = logits.data
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert np.allclose(logits.grad, (p - onehot) / 6.0, atol=1e-12)


def test_cross_entropy_matches_plain_formula():
    rng = np.random.default_rng(17)
    logits = rng.standard_normal((5, 4))
    onehot = np.eye(4)[rng.integers(0, 4, 5)]
    loss = T.softmax_cross_entropy(T.Tensor(logits), onehot).item()
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    ref = -(onehot * np.log(p)).sum(axis=1).mean()
    assert abs(loss - ref) < 1e-12


def test_elementwise_strict_shapes():
    a = T.Tensor(np.ones((2, 3)))
    b = T.Tensor(np.ones((3, 2)))
    with pytest.raises(ShapeError):
        T.elementwise("add", a, b)
    out = T.elementwise("mul", a, 2.0)
    assert np.all(out.data == 2.0)
    out = T.elementwise("scale", a, 3.0)
    assert np.all(out.data == 3.0)
    with pytest.raises(ShapeError):
        T.elementwise("scale", a, b)
    with pytest.raises(ShapeError):
        T.elementwise("frobnicate", a)


def test_backward_needs_scalar_and_tape():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape():
        y = T.mul(x, x)
        with pytest.raises(GradientError):
            T.backward(y)   # not rank-0
    z = T.tsum(T.mul(x, x))  # no active tape -> nothing recorded
    with pytest.raises(GradientError):
        T.backward(z)


def test_backward_twice_is_an_error():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = T.tsum(T.mul(x, x))
        T.backward(y)
        with pytest.raises(GradientError):
            tape.backward(y)


def test_gradient_accumulates_over_shared_use():
    x = T.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with T.Tape():
        y = T.tsum(T.add(T.mul(x, x), x))   # d/dx (x^2 + x) = 2x + 1
        T.backward(y)
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_off_path_leaf_gets_zero_grad():
    x = T.Tensor(np.ones(2), requires_grad=True)
    z = T.Tensor(np.ones(2), requires_grad=True)
    with T.Tape():
        _ = T.mul(z, 2.0)              # recorded but not part of the loss
        loss = T.tsum(x)
        T.backward(loss)
    assert np.allclose(x.grad, 1.0)
    assert z.grad is not None and np.all(z.grad == 0.0)


def test_no_recording_without_tape():
    x = T.Tensor(np.ones(3), requires_grad=True)
    y = T.tanh(x)
    assert y._tape is None


def test_grad_check_rejects_bad_eps_and_dtype():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda x: T.tsum(x), [x], eps=1e-2)
    x32 = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(ValueError):
        T.grad_check(lambda x: T.tsum(x), [x32])


def test_float32_pipeline_keeps_dtype():
    rng = np.random.default_rng(18)
    x = T.Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    w = T.Tensor(rng.standard_normal((4, 2)).astype(np.float32), requires_grad=True)
    with T.Tape():
        out = T.tsum(T.relu(T.matmul(x, w)))
        T.backward(out)
    assert out.dtype == np.float32
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32
