"""Disparity proposal: dense candidate distribution by feature
cross-correlation, top-K pruning, and windowed propagation with a bounded
sub-pixel offset head."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .alignment import WindowAttentionSite, _FFNBlock, partition_cells, relative_index_map, _tile_index_for_slots, unpartition_cells
from .errors import ConfigError

OFFSET_BOUND = 4.0  # px; propagation may shift a hypothesis by at most this


@dataclass
class HypothesisSet:
    d: ad.Tensor  # (N, h, w, K) disparities, full-resolution pixel units
    score: ad.Tensor  # (N, h, w, K), sorted descending within each pixel

    @property
    def k(self):
        return self.d.shape[3]


def candidate_distribution(f1_8: ad.Tensor, f2_8: ad.Tensor, n_candidates: int):
    """Probability over integer stride-8 disparity candidates per pixel.

    logit(i, j, d) = <f1(i, j), f2(i, j - d)> / sqrt(C), zero-padded left.
    Returns (probabilities, logits), both (N, h, w, D).
    """
    if f1_8.shape != f2_8.shape:
        raise ConfigError(f"feature shapes differ: {f1_8.shape} vs {f2_8.shape}")
    w8, c = f1_8.shape[2], f1_8.shape[3]
    if n_candidates > w8:
        raise ConfigError(f"{n_candidates} candidates exceed coarse width {w8}")
    logits = ad.corr_volume(f1_8, f2_8, n_candidates, 1.0 / math.sqrt(c))
    return ad.softmax(logits, axis=-1), logits


def select_topk(pvol: ad.Tensor, k: int, stride: int = 8) -> HypothesisSet:
    """Keep the K most probable candidates per pixel, ties resolved toward
    the smaller disparity, converted to full-resolution pixel units."""
    d_cands = pvol.shape[-1]
    if k > d_cands:
        raise ConfigError(f"K={k} exceeds D={d_cands}")
    order = np.argsort(-pvol.data, axis=-1, kind="stable")[..., :k]
    score = ad.gather_last(pvol, order)
    d = ad.Tensor((order * stride).astype(pvol.dtype))
    return HypothesisSet(d=d, score=score)


class DisparityPropagator:
    """Windowed self-attention over neighboring candidates, re-scoring each
    hypothesis and nudging it by a learned offset bounded to (-4, 4) px.

    With zero-initialized heads the disparities pass through unchanged and
    scores are merely renormalized over the K slots.
    """

    def __init__(self, store: nn.ParamStore, name: str, c: int, heads: int, window: int, max_disparity: float):
        self.window = window
        self.max_disparity = max_disparity
        self.proj = nn.Linear(store, f"{name}.proj", c + 2, c)
        self.attn = WindowAttentionSite(store, f"{name}.attn", c, heads, window, self_attn=True)
        self.ffn = _FFNBlock(store, f"{name}.ffn", c)
        self.off_head = nn.Linear(store, f"{name}.off_head", c, 1, init="zeros")
        self.score_head = nn.Linear(store, f"{name}.score_head", c, 1, init="zeros")
        self._idx_cells = relative_index_map(window, window, 1, 1, window)

    def __call__(self, hyp: HypothesisSet, f1_8: ad.Tensor) -> HypothesisSet:
        n, h, w, c = f1_8.shape
        k = hyp.k
        d_norm = hyp.d * (1.0 / max(self.max_disparity, 1.0))
        feats = ad.concat(
            [
                ad.repeat_axis(f1_8.reshape(n, h, w, 1, c), k, 3),
                d_norm.reshape(n, h, w, k, 1),
                hyp.score.reshape(n, h, w, k, 1),
            ],
            axis=4,
        )
        x = self.proj(feats)  # (N, h, w, K, C)

        tok, meta = partition_cells(x.reshape(n, h, w, k * c), self.window)
        nw, tt = tok.shape[1], tok.shape[2]
        tok = tok.reshape(n, nw, tt * k, c)
        idx = _tile_index_for_slots(self._idx_cells, k, k)
        mask = np.repeat(meta.cell_mask, k, axis=1)
        delta = self.attn.attend(tok, tok, idx, mask)
        x_tok = tok + delta
        x_tok = self.ffn(x_tok)
        x = unpartition_cells(x_tok.reshape(n, nw, tt, k * c), meta).reshape(n, h, w, k, c)

        offset = ad.ttanh(self.off_head(x)).reshape(n, h, w, k) * OFFSET_BOUND
        d_new = ad.minimum_s(ad.maximum_s(hyp.d + offset, 0.0), self.max_disparity - 1e-3)
        logit = self.score_head(x).reshape(n, h, w, k) + ad.tlog(hyp.score + 1e-12)
        score_new = ad.softmax(logit, axis=-1)

        order = np.argsort(-score_new.data, axis=-1, kind="stable")
        return HypothesisSet(d=ad.gather_last(d_new, order), score=ad.gather_last(score_new, order))
