"""Bidirectional latent alignment: window-based cross-attention between
stereo hypothesis embeddings and monocular context features, interleaved
with neural-message-passing cost aggregation, iterated coarse-to-fine.

All attention sites share one mechanism: multi-head attention inside
non-overlapping windows with a content-adaptive positional bias
beta = <Q, R_k> + <K, R_q> looked up from a learnable dual-role table
indexed by the relative cell offset (measured in the query grid's units;
key cells of a coarser grid are mapped through the 2:1 scale factor).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .decoders import DisparityDecoder, RelativeDepthDecoder
from .embedding import EmbeddingVolume, HypothesisEmbedder
from .errors import ConfigError, ShapeError

NEG_MASK = -1e9


def median_pool(m: ad.Tensor, factor: int = 4) -> ad.Tensor:
    """Edge-preserving block median downsampling of (N, H, W) maps."""
    return ad.median_pool2d(m, factor)


# -- window plumbing ----------------------------------------------------------


@dataclass
class _WindowMeta:
    win: int
    nwh: int
    nww: int
    h: int
    w: int
    cell_mask: np.ndarray  # (nW, win*win) True where the cell is real


def _cell_mask(h, w, win, nwh, nww):
    ones = np.zeros((nwh * win, nww * win), dtype=bool)
    ones[:h, :w] = True
    m = ones.reshape(nwh, win, nww, win).transpose(0, 2, 1, 3).reshape(nwh * nww, win * win)
    return m


def partition_cells(x: ad.Tensor, win: int):
    """(N, h, w, C) -> (N, nW, win*win, C) tokens plus padding metadata."""
    n, h, w, c = x.shape
    nwh, nww = math.ceil(h / win), math.ceil(w / win)
    hp, wp = nwh * win, nww * win
    if (hp, wp) != (h, w):
        x = ad.pad_axes(x, {1: (0, hp - h), 2: (0, wp - w)})
    t = x.reshape(n, nwh, win, nww, win, c).transpose(0, 1, 3, 2, 4, 5)
    t = t.reshape(n, nwh * nww, win * win, c)
    return t, _WindowMeta(win, nwh, nww, h, w, _cell_mask(h, w, win, nwh, nww))


def unpartition_cells(t: ad.Tensor, meta: _WindowMeta) -> ad.Tensor:
    n, nw, tt, c = t.shape
    win = meta.win
    x = t.reshape(n, meta.nwh, meta.nww, win, win, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(n, meta.nwh * win, meta.nww * win, c)
    return x[:, : meta.h, : meta.w]


def relative_index_map(q_win: int, k_win: int, q_scale: int, k_scale: int, extent: int) -> np.ndarray:
    """Flat indices into a (2M-1)^2 bias table for every (query cell, key
    cell) pair of one window, offsets measured in the finer grid's units."""
    qi, qj = np.divmod(np.arange(q_win * q_win), q_win)
    ki, kj = np.divmod(np.arange(k_win * k_win), k_win)
    di = qi[:, None] * q_scale - ki[None, :] * k_scale
    dj = qj[:, None] * q_scale - kj[None, :] * k_scale
    if np.abs(di).max() > extent - 1 or np.abs(dj).max() > extent - 1:
        raise ConfigError(
            f"relative offsets exceed bias-table extent {extent} for windows {q_win}/{k_win}"
        )
    return (di + extent - 1) * (2 * extent - 1) + (dj + extent - 1)


def _tile_index_for_slots(idx: np.ndarray, kq: int, kk: int) -> np.ndarray:
    """Expand a cell-level index map to token level (cell-major slot order)."""
    return np.repeat(np.repeat(idx, kq, axis=0), kk, axis=1)


def _mask_add_from(key_mask: np.ndarray, dtype) -> np.ndarray | None:
    if key_mask.all():
        return None
    add = np.where(key_mask, 0.0, NEG_MASK).astype(dtype)
    return add[None, :, None, None, :]  # (1, nW, 1, 1, Tk)


# -- the shared attention site ------------------------------------------------


class WindowAttentionSite:
    """One multi-head attention site with LayerNormed inputs, dual-role
    positional bias, and a zero-initialized output projection."""

    def __init__(self, store: nn.ParamStore, name: str, c: int, heads: int, extent: int | None, self_attn: bool):
        if c % heads:
            raise ConfigError(f"channels {c} not divisible by heads {heads}")
        self.heads = heads
        self.ln_q = nn.LayerNorm(store, f"{name}.ln_q", c)
        self.ln_kv = self.ln_q if self_attn else nn.LayerNorm(store, f"{name}.ln_kv", c)
        self.wq = nn.Linear(store, f"{name}.wq", c, c)
        self.wk = nn.Linear(store, f"{name}.wk", c, c)
        self.wv = nn.Linear(store, f"{name}.wv", c, c)
        self.wo = nn.Linear(store, f"{name}.wo", c, c, init="zeros")
        self.table = None
        if extent is not None:
            r = (2 * extent - 1) ** 2
            self.table = store.param(f"{name}.table", (2, r, c), ("normal", 0.02))

    def attend(self, q_in: ad.Tensor, kv_in: ad.Tensor, idx: np.ndarray | None, key_mask: np.ndarray | None):
        """q_in: (N, nW, Tq, C) raw tokens; kv_in: (N, nW, Tk, C). Returns the
        residual delta for the queries (same shape as q_in)."""
        b, w, tq, c = q_in.shape
        tk = kv_in.shape[2]
        h = self.heads
        dh = c // h
        qn = self.ln_q(q_in)
        kn = self.ln_kv(kv_in)
        q = self.wq(qn).reshape(b, w, tq, h, dh)
        k = self.wk(kn).reshape(b, w, tk, h, dh)
        v = self.wv(kn).reshape(b, w, tk, h, dh)

        logits = ad.matmul(
            q.transpose(0, 1, 3, 2, 4) * (1.0 / math.sqrt(dh)),
            k.transpose(0, 1, 3, 4, 2),
        )  # (N, nW, H, Tq, Tk)
        if self.table is not None:
            if idx is None:
                raise ShapeError("bias table present but no relative index map given")
            rq = ad.take_rows(self.table[0], idx).reshape(tq, tk, h, dh)
            rk = ad.take_rows(self.table[1], idx).reshape(tq, tk, h, dh)
            logits = logits + ad.attention_bias(q, k, rq, rk)
        mask_add = None if key_mask is None else _mask_add_from(key_mask, logits.dtype)
        attn = ad.softmax(logits, axis=-1, mask_add=mask_add)
        out = ad.matmul(attn, v.transpose(0, 1, 3, 2, 4))  # (N, nW, H, Tq, dh)
        out = out.transpose(0, 1, 3, 2, 4).reshape(b, w, tq, c)
        return self.wo(out)


class _FFNBlock:
    def __init__(self, store, name, c):
        self.ln = nn.LayerNorm(store, f"{name}.ln", c)
        self.ffn = nn.FFN(store, f"{name}.ffn", c)

    def __call__(self, x):
        return x + self.ffn(self.ln(x))


# -- stage geometry -----------------------------------------------------------


@dataclass
class StageGeometry:
    """Window sizes and the cross-grid scale for one alignment stage."""

    stereo_win: int
    mono_win: int
    mono_scale: int  # one mono cell spans this many stereo cells per axis

    @classmethod
    def coarse(cls, window: int):
        return cls(stereo_win=window, mono_win=window, mono_scale=1)

    @classmethod
    def fine(cls, window: int):
        # stereo embeddings live at 1/4, monocular features stay at 1/8:
        # halving the monocular window keeps both windows on the same image
        # region, with a 2:1 cell correspondence
        return cls(stereo_win=window, mono_win=window // 2, mono_scale=2)


# -- the per-iteration block --------------------------------------------------


class AlignmentBlock:
    """One bidirectional alignment iteration: monocular readout, NMP cost
    aggregation (inter-pixel then intra-pixel), monocular update."""

    def __init__(self, store: nn.ParamStore, name: str, c: int, heads: int, geom: StageGeometry, k_slots: int):
        self.geom = geom
        self.k = k_slots
        ext = geom.stereo_win
        self.readout = WindowAttentionSite(store, f"{name}.readout", c, heads, ext, self_attn=False)
        self.readout_ffn = _FFNBlock(store, f"{name}.readout_ffn", c)
        self.inter = WindowAttentionSite(store, f"{name}.inter", c, heads, ext, self_attn=True)
        self.intra = WindowAttentionSite(store, f"{name}.intra", c, heads, None, self_attn=True)
        self.nmp_ffn = _FFNBlock(store, f"{name}.nmp_ffn", c)
        self.update = WindowAttentionSite(store, f"{name}.update", c, heads, ext, self_attn=False)
        self.update_ffn = _FFNBlock(store, f"{name}.update_ffn", c)

        g = self.geom
        idx_cells_ss = relative_index_map(g.stereo_win, g.stereo_win, 1, 1, ext)
        idx_cells_sm = relative_index_map(g.stereo_win, g.mono_win, 1, g.mono_scale, ext)
        idx_cells_ms = relative_index_map(g.mono_win, g.stereo_win, g.mono_scale, 1, ext)
        self.idx_inter = _tile_index_for_slots(idx_cells_ss, k_slots, k_slots)
        self.idx_readout = _tile_index_for_slots(idx_cells_sm, k_slots, 1)
        self.idx_update = _tile_index_for_slots(idx_cells_ms, 1, k_slots)

    def _partition_stereo(self, s: ad.Tensor):
        n, h, w, k, c = s.shape
        t, meta = partition_cells(s.reshape(n, h, w, k * c), self.geom.stereo_win)
        nw, tt = t.shape[1], t.shape[2]
        return t.reshape(n, nw, tt * k, c), meta

    def _unpartition_stereo(self, t: ad.Tensor, meta, shape):
        n, h, w, k, c = shape
        nw = t.shape[1]
        t = t.reshape(n, nw, t.shape[2] // k, k * c)
        return unpartition_cells(t, meta).reshape(n, h, w, k, c)

    def __call__(self, s: ad.Tensor, m: ad.Tensor, readout_on=True, update_on=True):
        n, hs, ws, k, c = s.shape
        if k != self.k:
            raise ShapeError(f"block built for K={self.k}, got K={k}")

        # monocular-readout: stereo hypothesis tokens query monocular cells
        if readout_on:
            s_tok, s_meta = self._partition_stereo(s)
            m_tok, m_meta = partition_cells(m, self.geom.mono_win)
            delta = self.readout.attend(s_tok, m_tok, self.idx_readout, m_meta.cell_mask)
            s = s + self._unpartition_stereo(delta, s_meta, s.shape)
            s = self.readout_ffn(s)

        # NMP cost aggregation: inter-pixel consensus then intra-pixel
        # hypothesis competition, then FFN
        s_tok, s_meta = self._partition_stereo(s)
        smask = np.repeat(s_meta.cell_mask, k, axis=1)
        delta = self.inter.attend(s_tok, s_tok, self.idx_inter, smask)
        s = s + self._unpartition_stereo(delta, s_meta, s.shape)

        cell_tok = s.reshape(n, hs * ws, k, c)
        delta = self.intra.attend(cell_tok, cell_tok, None, None)
        s = s + delta.reshape(n, hs, ws, k, c)
        s = self.nmp_ffn(s)

        # monocular-update: monocular cells query aggregated stereo tokens
        if update_on:
            m_tok, m_meta = partition_cells(m, self.geom.mono_win)
            s_tok, s_meta = self._partition_stereo(s)
            skey_mask = np.repeat(s_meta.cell_mask, k, axis=1)
            delta = self.update.attend(m_tok, s_tok, self.idx_update, skey_mask)
            m = m + unpartition_cells(delta, m_meta)
            m = self.update_ffn(m)

        return s, m


# spec-facing thin wrappers over the block's three phases


def monocular_readout(block: AlignmentBlock, s_vol: EmbeddingVolume, m: ad.Tensor) -> EmbeddingVolume:
    s_tok, s_meta = block._partition_stereo(s_vol.s)
    m_tok, m_meta = partition_cells(m, block.geom.mono_win)
    delta = block.readout.attend(s_tok, m_tok, block.idx_readout, m_meta.cell_mask)
    s = s_vol.s + block._unpartition_stereo(delta, s_meta, s_vol.s.shape)
    s = block.readout_ffn(s)
    return EmbeddingVolume(s=s, anchor=s_vol.anchor, stage=s_vol.stage)


def nmp_aggregate(block: AlignmentBlock, s_vol: EmbeddingVolume) -> EmbeddingVolume:
    n, hs, ws, k, c = s_vol.s.shape
    s = s_vol.s
    s_tok, s_meta = block._partition_stereo(s)
    smask = np.repeat(s_meta.cell_mask, k, axis=1)
    s = s + block._unpartition_stereo(block.inter.attend(s_tok, s_tok, block.idx_inter, smask), s_meta, s.shape)
    cell_tok = s.reshape(n, hs * ws, k, c)
    s = s + block.intra.attend(cell_tok, cell_tok, None, None).reshape(n, hs, ws, k, c)
    s = block.nmp_ffn(s)
    return EmbeddingVolume(s=s, anchor=s_vol.anchor, stage=s_vol.stage)


def monocular_update(block: AlignmentBlock, m: ad.Tensor, s_vol: EmbeddingVolume) -> ad.Tensor:
    k = s_vol.s.shape[3]
    m_tok, m_meta = partition_cells(m, block.geom.mono_win)
    s_tok, s_meta = block._partition_stereo(s_vol.s)
    skey_mask = np.repeat(s_meta.cell_mask, k, axis=1)
    delta = block.update.attend(m_tok, s_tok, block.idx_update, skey_mask)
    return block.update_ffn(m + unpartition_cells(delta, m_meta))


# -- the full loop ------------------------------------------------------------


@dataclass
class IterationTrace:
    disparities: list  # one (N, H, W) tensor per iteration
    relative_depths: list  # one (N, H, W) tensor per iteration

    def __len__(self):
        return len(self.disparities)


class AlignmentStack:
    """l coarse blocks at 1/8 (K slots) followed by l' fine blocks at 1/4
    (single slot), with median-pooled re-embedding in between."""

    def __init__(self, store: nn.ParamStore, cfg, fine_embedder: HypothesisEmbedder):
        c, heads = cfg.channels, cfg.heads
        self.cfg = cfg
        self.fine_embedder = fine_embedder
        geom_c = StageGeometry.coarse(cfg.window)
        geom_f = StageGeometry.fine(cfg.window)
        self.coarse_blocks = [
            AlignmentBlock(store, f"align.coarse{i}", c, heads, geom_c, cfg.hypotheses)
            for i in range(cfg.coarse_iters)
        ]
        self.fine_blocks = [
            AlignmentBlock(store, f"align.fine{i}", c, heads, geom_f, 1) for i in range(cfg.fine_iters)
        ]
        hidden = cfg.decoder_hidden
        self.decode_coarse = DisparityDecoder(store, "decode.stereo_coarse", c, 8, hidden)
        self.decode_fine = DisparityDecoder(store, "decode.stereo_fine", c, 4, hidden)
        self.decode_mono = RelativeDepthDecoder(store, "decode.mono", c, 8, hidden)

    def run_alignment(self, s_vol: EmbeddingVolume, m: ad.Tensor, f1_4, f2_4, readout_on=True, update_on=True):
        """Returns (IterationTrace, final EmbeddingVolume, final m)."""
        trace_d, trace_m = [], []
        for blk in self.coarse_blocks:
            s, m = blk(s_vol.s, m, readout_on=readout_on, update_on=update_on)
            s_vol = EmbeddingVolume(s=s, anchor=s_vol.anchor, stage="coarse")
            trace_d.append(self.decode_coarse(s_vol))
            trace_m.append(self.decode_mono(m))

        if self.fine_blocks:
            d_coarse = trace_d[-1]
            pooled = median_pool(d_coarse, 4)  # (N, H/4, W/4)
            anchor = pooled.reshape(pooled.shape[0], pooled.shape[1], pooled.shape[2], 1)
            s_vol = self.fine_embedder(f1_4, f2_4, anchor, stride=4, stage="fine")
            for blk in self.fine_blocks:
                s, m = blk(s_vol.s, m, readout_on=readout_on, update_on=update_on)
                s_vol = EmbeddingVolume(s=s, anchor=s_vol.anchor, stage="fine")
                trace_d.append(self.decode_fine(s_vol))
                trace_m.append(self.decode_mono(m))

        return IterationTrace(trace_d, trace_m), s_vol, m
