"""Pure-numpy reference implementations of the hot kernels.

Slower than the numba backend (notably the scatter-style backward passes,
which go through ``np.ufunc.at``) but dependency-free and used as the
ground truth the numba kernels are tested against.
"""

import numpy as np


def im2col(xp, kh, kw, stride):
    """Extract conv patches from a padded NHWC tensor.

    xp: (N, Hp, Wp, C) -> cols: (N*Ho*Wo, kh*kw*C), row-major over (N, Ho, Wo).
    """
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(windows).reshape(n * ho * wo, kh * kw * c)


def col2im(dcols, n, hp, wp, c, kh, kw, stride):
    """Fold patch gradients back onto the padded input (adjoint of im2col)."""
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    d = dcols.reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for a in range(kh):
        for b in range(kw):
            dxp[:, a : a + ho * stride : stride, b : b + wo * stride : stride, :] += d[:, :, :, a, b, :]
    return dxp


def bilinear_gather(fmap, coords):
    """Sample fmap along the horizontal axis at real-valued column positions.

    fmap: (B, H, W, C); coords: (B, H, W, K) -> out: (B, H, W, K, C).
    Taps falling outside [0, W-1] contribute zero.
    """
    b, h, w, c = fmap.shape
    j0 = np.floor(coords).astype(np.int64)
    t = (coords - j0).astype(fmap.dtype)
    j1 = j0 + 1
    in0 = (j0 >= 0) & (j0 < w)
    in1 = (j1 >= 0) & (j1 < w)
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j1, 0, w - 1)
    bi = np.arange(b)[:, None, None, None]
    ii = np.arange(h)[None, :, None, None]
    f0 = fmap[bi, ii, j0c] * in0[..., None].astype(fmap.dtype)
    f1 = fmap[bi, ii, j1c] * in1[..., None].astype(fmap.dtype)
    return f0 * (1.0 - t)[..., None] + f1 * t[..., None]


def bilinear_gather_bwd(fmap, coords, dout):
    """Gradients of bilinear_gather w.r.t. the feature map and the coordinates."""
    b, h, w, c = fmap.shape
    j0 = np.floor(coords).astype(np.int64)
    t = (coords - j0).astype(fmap.dtype)
    j1 = j0 + 1
    in0 = (j0 >= 0) & (j0 < w)
    in1 = (j1 >= 0) & (j1 < w)
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j1, 0, w - 1)
    bi = np.arange(b)[:, None, None, None]
    ii = np.arange(h)[None, :, None, None]

    dfmap = np.zeros_like(fmap)
    w0 = ((1.0 - t) * in0.astype(fmap.dtype))[..., None] * dout
    w1 = (t * in1.astype(fmap.dtype))[..., None] * dout
    np.add.at(dfmap, (np.broadcast_to(bi, j0.shape), np.broadcast_to(ii, j0.shape), j0c), w0)
    np.add.at(dfmap, (np.broadcast_to(bi, j1.shape), np.broadcast_to(ii, j1.shape), j1c), w1)

    f0 = fmap[bi, ii, j0c] * in0[..., None].astype(fmap.dtype)
    f1 = fmap[bi, ii, j1c] * in1[..., None].astype(fmap.dtype)
    dcoords = ((f1 - f0) * dout).sum(axis=-1)
    return dfmap, dcoords.astype(coords.dtype)


def corr_volume(f1, f2, d_max, scale):
    """Shifted inner products: vol[b,i,j,d] = scale * <f1[b,i,j], f2[b,i,j-d]>."""
    b, h, w, c = f1.shape
    vol = np.zeros((b, h, w, d_max), dtype=f1.dtype)
    for d in range(d_max):
        if d == 0:
            vol[:, :, :, 0] = (f1 * f2).sum(axis=-1)
        else:
            vol[:, :, d:, d] = (f1[:, :, d:] * f2[:, :, :-d]).sum(axis=-1)
    vol *= scale
    return vol


def corr_volume_bwd(f1, f2, dout, scale):
    df1 = np.zeros_like(f1)
    df2 = np.zeros_like(f2)
    d_max = dout.shape[-1]
    for d in range(d_max):
        g = dout[:, :, :, d] * scale
        if d == 0:
            df1 += g[..., None] * f2
            df2 += g[..., None] * f1
        else:
            df1[:, :, d:] += g[:, :, d:, None] * f2[:, :, :-d]
            df2[:, :, :-d] += g[:, :, d:, None] * f1[:, :, d:]
    return df1, df2


def median_pool(x, f):
    """Block median with the lower-of-two convention for even block sizes.

    x: (B, H, W) -> (out: (B, H/f, W/f), sel: flat in-sample argindices).
    """
    b, h, w = x.shape
    hf, wf = h // f, w // f
    blocks = x.reshape(b, hf, f, wf, f).transpose(0, 1, 3, 2, 4).reshape(b, hf, wf, f * f)
    k = (f * f - 1) // 2
    sel_local = np.argpartition(blocks, k, axis=-1)[..., k]
    out = np.take_along_axis(blocks, sel_local[..., None], axis=-1)[..., 0]
    a, bb = sel_local // f, sel_local % f
    ii = np.arange(hf)[None, :, None] * f + a
    jj = np.arange(wf)[None, None, :] * f + bb
    sel = (ii * w + jj).astype(np.int64)
    return out, sel


def median_pool_bwd(sel, dout, h, w):
    b = sel.shape[0]
    dx = np.zeros((b, h * w), dtype=dout.dtype)
    bi = np.broadcast_to(np.arange(b)[:, None, None], sel.shape)
    np.add.at(dx, (bi, sel), dout)
    return dx.reshape(b, h, w)
