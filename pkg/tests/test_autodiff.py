"""Gradient checks for every autodiff primitive against central differences."""

import numpy as np
import pytest

from duodepth import autodiff as ad

RNG = np.random.default_rng(12345)


def rt(*shape, lo=-1.0, hi=1.0):
    return ad.Tensor(RNG.uniform(lo, hi, size=shape), requires_grad=True)


def numeric_grad(f, t, eps=1e-6):
    g = np.zeros_like(t.data)
    flat, gflat = t.data.ravel(), g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f().item()
        flat[i] = old - eps
        fm = f().item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check(f, tensors, rtol=1e-5, atol=1e-7):
    out = f()
    for t in tensors:
        t.grad = None
    out.backward()
    for t in tensors:
        num = numeric_grad(f, t)
        assert t.grad is not None, "missing analytic gradient"
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=atol)


def scalarize(y):
    r = ad.Tensor(RNG.standard_normal(y.shape))
    return (y * r).sum()


# fixed random weighting per call site would break numeric re-evaluation,
# so build the weight once and close over it
def weighted(fn, *tensors):
    shape = fn(*tensors).shape
    r = RNG.standard_normal(shape)
    w = ad.Tensor(r)
    return lambda: (fn(*tensors) * w).sum()


def test_add_sub_mul_div_broadcast():
    a, b = rt(3, 4), rt(4)
    check(weighted(lambda x, y: x + y, a, b), [a, b])
    check(weighted(lambda x, y: x - y, a, b), [a, b])
    check(weighted(lambda x, y: x * y, a, b), [a, b])
    c = rt(3, 4, lo=0.5, hi=2.0)
    d = rt(4, lo=0.5, hi=2.0)
    check(weighted(lambda x, y: x / y, c, d), [c, d])


def test_scalar_ops_and_neg_pow():
    a = rt(5, lo=0.2, hi=2.0)
    check(weighted(lambda x: x * 3.0 + 1.5, a), [a])
    check(weighted(lambda x: -x, a), [a])
    check(weighted(lambda x: x**2, a), [a])
    check(weighted(lambda x: 2.0 - x, a), [a])
    check(weighted(lambda x: 1.0 / x, a), [a])


def test_exp_log_tanh_abs():
    a = rt(4, 3, lo=0.3, hi=1.5)
    check(weighted(ad.texp, a), [a])
    check(weighted(ad.tlog, a), [a])
    check(weighted(ad.ttanh, a), [a])
    b = rt(4, 3, lo=0.2, hi=1.0)  # away from the |.| kink
    check(weighted(ad.tabs, b), [b])


def test_relu_gelu_clamps():
    a = rt(6, 6)
    a.data[np.abs(a.data) < 1e-3] = 0.5  # avoid kink
    check(weighted(ad.relu, a), [a])
    check(weighted(ad.gelu, a), [a], rtol=1e-4)
    check(weighted(lambda x: ad.maximum_s(x, 0.25), a), [a])
    check(weighted(lambda x: ad.minimum_s(x, 0.25), a), [a])


def test_reshape_transpose_getitem_concat_pad_repeat():
    a = rt(2, 3, 4)
    check(weighted(lambda x: x.reshape(6, 4), a), [a])
    check(weighted(lambda x: x.transpose(2, 0, 1), a), [a])
    check(weighted(lambda x: x[:, 1:, ::2], a), [a])
    b = rt(2, 2, 4)
    check(weighted(lambda x, y: ad.concat([x, y], axis=1), a, b), [a, b])
    check(weighted(lambda x: ad.pad_axes(x, {1: (1, 2)}), a), [a])
    check(weighted(lambda x: ad.repeat_axis(x, 3, 1), a), [a])


def test_reductions():
    a = rt(3, 4, 2)
    check(weighted(lambda x: x.sum(), a), [a])
    check(weighted(lambda x: x.sum(axis=1), a), [a])
    check(weighted(lambda x: x.mean(axis=(0, 2), keepdims=True), a), [a])


def test_matmul_batched_and_2d():
    a, b = rt(2, 3, 4, 5), rt(2, 3, 5, 6)
    check(weighted(ad.matmul, a, b), [a, b])
    x, w = rt(7, 5), rt(5, 4)
    check(weighted(ad.matmul, x, w), [x, w])
    xb = rt(2, 3, 5)
    check(weighted(ad.matmul, xb, w), [xb, w])


def test_softmax_and_mask():
    a = rt(3, 5)
    check(weighted(lambda x: ad.softmax(x, axis=-1), a), [a])
    mask = np.zeros((3, 5))
    mask[:, -2:] = -1e9
    check(weighted(lambda x: ad.softmax(x, axis=-1, mask_add=mask), a), [a])
    check(weighted(lambda x: ad.log_softmax(x, axis=-1), a), [a])


def test_layer_instance_norm():
    a, g, b = rt(2, 3, 6), rt(6, lo=0.5, hi=1.5), rt(6)
    check(weighted(lambda x, gg, bb: ad.layer_norm(x, gg, bb), a, g, b), [a, g, b], rtol=1e-4)
    x = rt(2, 4, 5, 3)
    g2, b2 = rt(3, lo=0.5, hi=1.5), rt(3)
    check(weighted(lambda xx, gg, bb: ad.instance_norm2d(xx, gg, bb), x, g2, b2), [x, g2, b2], rtol=1e-4)


@pytest.mark.parametrize("stride,pad,mode", [(1, 1, "zero"), (2, 1, "zero"), (1, 1, "edge"), (2, 0, "zero")])
def test_conv2d(stride, pad, mode):
    x = rt(2, 6, 8, 3)
    w = rt(3, 3, 3, 4)
    b = rt(4)
    check(
        weighted(lambda xx, ww, bb: ad.conv2d(xx, ww, bb, stride=stride, padding=pad, pad_mode=mode), x, w, b),
        [x, w, b],
        rtol=1e-4,
    )


def test_bilinear_gather_grads():
    fmap = rt(2, 3, 7, 4)
    coords = ad.Tensor(RNG.uniform(-1.5, 7.5, size=(2, 3, 7, 2)), requires_grad=True)
    # keep away from integer kinks
    frac = coords.data - np.floor(coords.data)
    coords.data += np.where(frac < 0.1, 0.15, 0.0) - np.where(frac > 0.9, 0.15, 0.0)
    check(weighted(ad.bilinear_gather, fmap, coords), [fmap, coords], rtol=1e-4)


def test_corr_volume_grads():
    f1, f2 = rt(2, 3, 9, 4), rt(2, 3, 9, 4)
    check(weighted(lambda a, b: ad.corr_volume(a, b, 4, 0.5), f1, f2), [f1, f2], rtol=1e-4)


def test_median_pool_grads():
    x = ad.Tensor(RNG.permutation(64).reshape(1, 8, 8).astype(np.float64), requires_grad=True)
    check(weighted(lambda a: ad.median_pool2d(a, 4), x), [x])


def test_masked_median_grads():
    x = ad.Tensor(RNG.permutation(24).reshape(2, 12).astype(np.float64) * 0.37, requires_grad=True)
    mask = RNG.uniform(size=(2, 12)) > 0.3
    mask[:, 0] = True
    check(weighted(lambda a: ad.masked_median(a, mask), x), [x])


def test_gathers():
    table = rt(10, 4)
    idx = RNG.integers(0, 10, size=(3, 5))
    check(weighted(lambda t: ad.take_rows(t, idx), table), [table])
    a = rt(4, 6)
    gidx = np.stack([RNG.permutation(6)[:3] for _ in range(4)])
    check(weighted(lambda t: ad.gather_last(t, gidx), a), [a])


def test_attention_bias_op():
    q, k = rt(2, 3, 4, 2, 5), rt(2, 3, 6, 2, 5)
    rq, rk = rt(4, 6, 2, 5), rt(4, 6, 2, 5)
    check(weighted(ad.attention_bias, q, k, rq, rk), [q, k, rq, rk], rtol=1e-4)


def test_diamond_accumulation():
    a = rt(3, 3)
    check(weighted(lambda x: x * x + x * 2.0, a), [a])


def test_no_grad_and_stop_grad():
    a = rt(3)
    with ad.no_grad():
        y = a * 2.0
    assert y._backward is None and not y.requires_grad
    z = ad.stop_grad(a) * a
    z.sum().backward()
    np.testing.assert_allclose(a.grad, a.data)  # only the non-stopped path


def test_backward_requires_scalar():
    a = rt(3)
    with pytest.raises(Exception):
        (a * 2.0).backward()
