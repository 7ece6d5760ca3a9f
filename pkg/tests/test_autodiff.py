"""Finite-difference checks for every tape operation."""

import numpy as np
import pytest

from guidedmix import autodiff as ad


def numeric_grad(fn, x, eps=1e-6):
    """Central finite differences of a scalar-valued fn at x."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g


def check_op(build, shape, seed=0, tol=1e-7):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=shape)
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = build(t)
    loss = out.sum() if out.data.size > 1 else out
    loss.backward()

    def scalar(v):
        o = build(ad.Tensor(v))
        return float(o.data.sum())

    num = numeric_grad(scalar, x.copy())
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


def test_add_mul_broadcast():
    rng = np.random.default_rng(1)
    c = rng.normal(size=(1, 3, 1, 1))
    check_op(lambda t: ad.mul(ad.add(t, c), t), (2, 3, 4, 4))


def test_relu_exp_log_sigmoid_square():
    check_op(lambda t: ad.relu(t), (3, 5))
    check_op(lambda t: ad.exp(t), (3, 5))
    check_op(lambda t: ad.log(ad.add(ad.square(t), 1.0)), (3, 5))
    check_op(lambda t: ad.sigmoid(t), (3, 5))


def test_reshape_transpose_concat():
    check_op(lambda t: ad.transpose(ad.reshape(t, (2, 6)), (1, 0)), (3, 4))
    check_op(lambda t: ad.concat([t, ad.mul(t, 2.0)], axis=1), (2, 3))


def test_sum_mean_axes():
    check_op(lambda t: t.sum(axis=1), (3, 4))
    check_op(lambda t: t.mean(axis=(1, 2), keepdims=True), (2, 3, 4))
    check_op(lambda t: t.mean(), (5,))


def test_matmul():
    rng = np.random.default_rng(2)
    b = ad.Tensor(rng.normal(size=(4, 3)))
    check_op(lambda t: ad.matmul(t, b), (2, 4))
    # batched
    bb = ad.Tensor(rng.normal(size=(2, 3, 5)))
    check_op(lambda t: ad.matmul(t, bb), (2, 4, 3))


def test_matmul_weight_grad():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    check_op(lambda t: ad.matmul(ad.Tensor(a), t), (4, 3))


def test_softmax_logsoftmax():
    check_op(lambda t: ad.softmax(t, axis=1), (3, 6), tol=1e-6)
    check_op(lambda t: ad.log_softmax(t, axis=1), (3, 6), tol=1e-6)
    # rows sum to one
    rng = np.random.default_rng(4)
    x = rng.normal(size=(7, 9)) * 10
    s = ad.softmax(ad.Tensor(x), axis=1)
    np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)


def test_bce_with_logits():
    rng = np.random.default_rng(5)
    t = (rng.random((4, 6)) > 0.5).astype(float)
    check_op(lambda x: ad.bce_with_logits(x, t), (4, 6))
    # zero logits -> ln 2 regardless of targets
    z = ad.bce_with_logits(ad.Tensor(np.zeros((3, 5))), t[:3, :5])
    assert abs(z.item() - np.log(2.0)) < 1e-12


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_grads(stride, pad):
    rng = np.random.default_rng(6)
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))

    check_op(lambda t: ad.conv2d(t, ad.Tensor(w), ad.Tensor(b), stride=stride, pad=pad),
             (2, 3, 6, 6), tol=1e-6)

    x = rng.normal(size=(2, 3, 6, 6))
    check_op(lambda t: ad.conv2d(ad.Tensor(x), t, ad.Tensor(b), stride=stride, pad=pad),
             (4, 3, 3, 3), tol=1e-6)
    check_op(lambda t: ad.conv2d(ad.Tensor(x), ad.Tensor(w), t, stride=stride, pad=pad),
             (4,), tol=1e-6)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expect = np.zeros_like(out)
    for co in range(3):
        for oy in range(out.shape[2]):
            for ox in range(out.shape[3]):
                patch = xp[0, :, oy * 2:oy * 2 + 3, ox * 2:ox * 2 + 3]
                expect[0, co, oy, ox] = (patch * w[co]).sum()
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_linear2d():
    rng = np.random.default_rng(8)
    rm = rng.normal(size=(3, 5))
    cm = rng.normal(size=(2, 4))
    check_op(lambda t: ad.linear2d(t, rm, cm), (2, 3, 5, 4))


def test_pixel_shuffle_grad_and_permutation():
    check_op(lambda t: ad.square(ad.pixel_shuffle(t, 2)), (1, 8, 3, 3))
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 8, 3, 3))
    y = ad.pixel_shuffle(ad.Tensor(x), 2).data
    assert sorted(y.ravel()) == sorted(x.ravel())


def test_no_grad_blocks_tape():
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        out = ad.mul(t, 2.0)
    assert out._parents == ()


def test_grad_accumulates_over_reuse():
    t = ad.Tensor(np.array([2.0]), requires_grad=True)
    out = ad.add(ad.mul(t, t), ad.mul(t, 3.0))  # x^2 + 3x -> 2x + 3 = 7
    out.backward(np.ones(1))
    np.testing.assert_allclose(t.grad, [7.0])
