"""Disparity-hypothesis embeddings: concatenated view features fused with
grouped feature correlation at the hypothesized match location."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError


@dataclass
class EmbeddingVolume:
    s: ad.Tensor  # (N, h, w, K, C)
    anchor: ad.Tensor  # (N, h, w, K) disparity each slot describes, full-res px
    stage: str  # "coarse" | "fine"

    @property
    def grid(self):
        return self.s.shape[1], self.s.shape[2]

    @property
    def slots(self):
        return self.s.shape[3]


def sample_subpixel(fmap: ad.Tensor, coords: ad.Tensor) -> ad.Tensor:
    """Bilinear lookup of an (N, h, w, C) map at real column positions
    (N, h, w, K); columns left of 0 (or beyond w-1) contribute zero."""
    return ad.bilinear_gather(fmap, coords)


class _NormalizerConv:
    """3x3 conv -> InstanceNorm -> ReLU -> 1x1 conv, shared across views."""

    def __init__(self, store: nn.ParamStore, name: str, c: int):
        self.conv3 = nn.Conv2d(store, f"{name}.conv3", 3, c, c)
        self.norm = nn.InstanceNorm2d(store, f"{name}.norm", c)
        self.conv1 = nn.Conv2d(store, f"{name}.conv1", 1, c, c, padding=0)

    def __call__(self, x):
        return self.conv1(ad.relu(self.norm(self.conv3(x))))


class HypothesisEmbedder:
    """Implements the hypothesis-embedding fusion for one stage.

    Given per-view features and K disparity hypotheses per pixel, emits a
    C-dim embedding per hypothesis from (a) concatenated normalized
    features of both views at the match and (b) G grouped correlations,
    mixed by a two-layer GELU MLP.
    """

    def __init__(self, store: nn.ParamStore, name: str, c: int, groups: int):
        if c % groups:
            raise ConfigError(f"channels {c} not divisible by correlation groups {groups}")
        self.c = c
        self.groups = groups
        self.delta1 = _NormalizerConv(store, f"{name}.delta1", c)
        self.delta2 = _NormalizerConv(store, f"{name}.delta2", c)
        self.fuse1 = nn.Linear(store, f"{name}.fuse1", 2 * c + groups, 2 * c)
        self.fuse2 = nn.Linear(store, f"{name}.fuse2", 2 * c, c)

    def __call__(self, f1: ad.Tensor, f2: ad.Tensor, d_px: ad.Tensor, stride: int, stage: str) -> EmbeddingVolume:
        n, h, w, c = f1.shape
        k = d_px.shape[3]
        a1 = self.delta1(f1)
        a2 = self.delta1(f2)
        b1 = self.delta2(f1)
        b2 = self.delta2(f2)
        jgrid = np.arange(w, dtype=a1.dtype).reshape(1, 1, w, 1)
        coords = ad.Tensor(np.broadcast_to(jgrid, (n, h, w, k)).copy()) - d_px * (1.0 / stride)
        a2s = sample_subpixel(a2, coords)
        b2s = sample_subpixel(b2, coords)

        a1k = ad.repeat_axis(a1.reshape(n, h, w, 1, c), k, 3)
        x_concat = ad.concat([a1k, a2s], axis=4)

        cg = c // self.groups
        b1g = b1.reshape(n, h, w, 1, self.groups, cg)
        b2g = b2s.reshape(n, h, w, k, self.groups, cg)
        x_corr = (b1g * b2g).sum(axis=5) * (self.groups / c)

        fused = ad.concat([x_concat, x_corr], axis=4)
        s = self.fuse2(ad.gelu(self.fuse1(fused)))
        return EmbeddingVolume(s=s, anchor=d_px, stage=stage)
