"""Numba and numpy kernel backends must agree on every kernel."""

import numpy as np
import pytest

from duodepth import kernels

RNG = np.random.default_rng(7)
nb = kernels.get_backend("numba")
npk = kernels.get_backend("numpy")


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_im2col_col2im_agree(dtype, tol):
    xp = RNG.standard_normal((2, 9, 11, 3)).astype(dtype)
    for stride in (1, 2):
        a = nb.im2col(xp, 3, 3, stride)
        b = npk.im2col(xp, 3, 3, stride)
        np.testing.assert_array_equal(a, b)
        d = RNG.standard_normal(a.shape).astype(dtype)
        ga = nb.col2im(d, 2, 9, 11, 3, 3, 3, stride)
        gb = npk.col2im(d, 2, 9, 11, 3, 3, 3, stride)
        np.testing.assert_allclose(ga, gb, atol=tol)


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-4)])
def test_bilinear_agree(dtype, tol):
    fmap = RNG.standard_normal((2, 4, 9, 5)).astype(dtype)
    coords = RNG.uniform(-2, 10, size=(2, 4, 9, 3)).astype(dtype)
    coords[0, 0, 0, 0] = 4.0  # exact integer tap
    a = nb.bilinear_gather(fmap, coords)
    b = npk.bilinear_gather(fmap, coords)
    np.testing.assert_allclose(a, b, atol=tol)
    d = RNG.standard_normal(a.shape).astype(dtype)
    ga = nb.bilinear_gather_bwd(fmap, coords, d)
    gb = npk.bilinear_gather_bwd(fmap, coords, d)
    np.testing.assert_allclose(ga[0], gb[0], atol=tol)
    np.testing.assert_allclose(ga[1], gb[1], atol=tol * 10)


def test_bilinear_integer_coord_is_exact():
    fmap = RNG.standard_normal((1, 2, 6, 3))
    coords = np.full((1, 2, 6, 1), 3.0)
    out = kernels.bilinear_gather(fmap, coords)
    np.testing.assert_array_equal(out[0, :, :, 0, :], np.broadcast_to(fmap[0, :, 3:4, :], (2, 6, 3)))


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-3)])
def test_corr_volume_agree(dtype, tol):
    f1 = RNG.standard_normal((2, 3, 12, 8)).astype(dtype)
    f2 = RNG.standard_normal((2, 3, 12, 8)).astype(dtype)
    a = nb.corr_volume(f1, f2, 5, 0.25)
    b = npk.corr_volume(f1, f2, 5, 0.25)
    np.testing.assert_allclose(a, b, atol=tol)
    d = RNG.standard_normal(a.shape).astype(dtype)
    ga = nb.corr_volume_bwd(f1, f2, d, 0.25)
    gb = npk.corr_volume_bwd(f1, f2, d, 0.25)
    np.testing.assert_allclose(ga[0], gb[0], atol=tol * 10)
    np.testing.assert_allclose(ga[1], gb[1], atol=tol * 10)


def test_median_pool_agree_unique_values():
    x = RNG.permutation(2 * 16 * 16).reshape(2, 16, 16).astype(np.float64)
    oa, sa = nb.median_pool(x, 4)
    ob, sb = npk.median_pool(x, 4)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(sa, sb)
    d = RNG.standard_normal(oa.shape)
    np.testing.assert_allclose(nb.median_pool_bwd(sa, d, 16, 16), npk.median_pool_bwd(sb, d, 16, 16))


def test_backend_selection_roundtrip():
    orig = kernels.backend_name()
    kernels.use_backend("numpy")
    assert kernels.backend_name() == "numpy"
    kernels.use_backend(orig)
    assert kernels.backend_name() == orig
