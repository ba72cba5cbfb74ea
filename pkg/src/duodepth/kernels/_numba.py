"""Numba-compiled twins of the kernels in ``_numpy``.

Loops are written so every output element (or output row, for scatter
backward passes) is owned by one iteration; results match the numpy
backend to floating-point roundoff and are deterministic.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride):
    n, hp, wp, c = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n * ho * wo, kh * kw * c), dtype=xp.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                p = 0
                for a in range(kh):
                    for q in range(kw):
                        base = xp[b, i * stride + a, j * stride + q]
                        for ch in range(c):
                            cols[row, p] = base[ch]
                            p += 1
    return cols


@njit(cache=True)
def col2im(dcols, n, hp, wp, c, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    dxp = np.zeros((n, hp, wp, c), dtype=dcols.dtype)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                row = (b * ho + i) * wo + j
                p = 0
                for a in range(kh):
                    for q in range(kw):
                        for ch in range(c):
                            dxp[b, i * stride + a, j * stride + q, ch] += dcols[row, p]
                            p += 1
    return dxp


@njit(cache=True)
def bilinear_gather(fmap, coords):
    b, h, w, c = fmap.shape
    k = coords.shape[3]
    out = np.zeros((b, h, w, k, c), dtype=fmap.dtype)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for s in range(k):
                    pos = coords[n, i, j, s]
                    j0 = int(np.floor(pos))
                    t = pos - j0
                    if 0 <= j0 < w:
                        wt = 1.0 - t
                        for ch in range(c):
                            out[n, i, j, s, ch] += wt * fmap[n, i, j0, ch]
                    j1 = j0 + 1
                    if 0 <= j1 < w and t != 0.0:
                        for ch in range(c):
                            out[n, i, j, s, ch] += t * fmap[n, i, j1, ch]
    return out


@njit(cache=True)
def bilinear_gather_bwd(fmap, coords, dout):
    b, h, w, c = fmap.shape
    k = coords.shape[3]
    dfmap = np.zeros_like(fmap)
    dcoords = np.zeros_like(coords)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                for s in range(k):
                    pos = coords[n, i, j, s]
                    j0 = int(np.floor(pos))
                    t = pos - j0
                    j1 = j0 + 1
                    dc = 0.0
                    if 0 <= j0 < w:
                        wt = 1.0 - t
                        for ch in range(c):
                            g = dout[n, i, j, s, ch]
                            dfmap[n, i, j0, ch] += wt * g
                            dc -= fmap[n, i, j0, ch] * g
                    if 0 <= j1 < w:
                        for ch in range(c):
                            g = dout[n, i, j, s, ch]
                            dfmap[n, i, j1, ch] += t * g
                            dc += fmap[n, i, j1, ch] * g
                    dcoords[n, i, j, s] = dc
    return dfmap, dcoords


@njit(cache=True)
def corr_volume(f1, f2, d_max, scale):
    b, h, w, c = f1.shape
    vol = np.zeros((b, h, w, d_max), dtype=f1.dtype)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                dm = d_max if d_max <= j + 1 else j + 1
                for d in range(dm):
                    acc = 0.0
                    for ch in range(c):
                        acc += f1[n, i, j, ch] * f2[n, i, j - d, ch]
                    vol[n, i, j, d] = acc * scale
    return vol


@njit(cache=True)
def corr_volume_bwd(f1, f2, dout, scale):
    b, h, w, c = f1.shape
    d_max = dout.shape[3]
    df1 = np.zeros_like(f1)
    df2 = np.zeros_like(f2)
    for n in range(b):
        for i in range(h):
            for j in range(w):
                dm = d_max if d_max <= j + 1 else j + 1
                for d in range(dm):
                    g = dout[n, i, j, d] * scale
                    for ch in range(c):
                        df1[n, i, j, ch] += g * f2[n, i, j - d, ch]
                        df2[n, i, j - d, ch] += g * f1[n, i, j, ch]
    return df1, df2


@njit(cache=True)
def median_pool(x, f):
    b, h, w = x.shape
    hf, wf = h // f, w // f
    k = (f * f - 1) // 2
    out = np.empty((b, hf, wf), dtype=x.dtype)
    sel = np.empty((b, hf, wf), dtype=np.int64)
    vals = np.empty(f * f, dtype=x.dtype)
    idxs = np.empty(f * f, dtype=np.int64)
    for n in range(b):
        for i in range(hf):
            for j in range(wf):
                p = 0
                for a in range(f):
                    for q in range(f):
                        ii = i * f + a
                        jj = j * f + q
                        vals[p] = x[n, ii, jj]
                        idxs[p] = ii * w + jj
                        p += 1
                order = np.argsort(vals, kind="mergesort")
                out[n, i, j] = vals[order[k]]
                sel[n, i, j] = idxs[order[k]]
    return out, sel


@njit(cache=True)
def median_pool_bwd(sel, dout, h, w):
    b = sel.shape[0]
    dx = np.zeros((b, h * w), dtype=dout.dtype)
    for n in range(b):
        flat_sel = sel[n].ravel()
        flat_d = dout[n].ravel()
        for p in range(flat_sel.shape[0]):
            dx[n, flat_sel[p]] += flat_d[p]
    return dx.reshape(b, h, w)
