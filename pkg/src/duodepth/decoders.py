"""Output heads: metric disparity from hypothesis embeddings and relative
depth from monocular features, each a 3-layer ReLU MLP followed by pixel
unshuffle to full resolution."""

from __future__ import annotations

from . import autodiff as ad
from . import nn
from .embedding import EmbeddingVolume
from .errors import ShapeError


def pixel_unshuffle_expand(feat: ad.Tensor, r: int) -> ad.Tensor:
    """(N, h, w, r^2) -> (N, h*r, w*r); channel a*r + b lands on pixel
    (i*r + a, j*r + b). Bijective rearrangement."""
    n, h, w, c = feat.shape
    if c != r * r:
        raise ShapeError(f"pixel unshuffle needs r^2={r * r} channels, got {c}")
    x = feat.reshape(n, h, w, r, r)
    x = x.transpose(0, 1, 3, 2, 4)  # (N, h, a, w, b)
    return x.reshape(n, h * r, w * r)


def pixel_shuffle_collapse(img: ad.Tensor, r: int) -> ad.Tensor:
    """Inverse of pixel_unshuffle_expand."""
    n, hh, ww = img.shape
    if hh % r or ww % r:
        raise ShapeError(f"image {hh}x{ww} not divisible by r={r}")
    x = img.reshape(n, hh // r, r, ww // r, r)
    x = x.transpose(0, 1, 3, 2, 4)
    return x.reshape(n, hh // r, ww // r, r * r)


def nearest_upsample(m: ad.Tensor, r: int) -> ad.Tensor:
    """(N, h, w) -> (N, h*r, w*r) by repetition."""
    return ad.repeat_axis(ad.repeat_axis(m, r, 1), r, 2)


class DisparityDecoder:
    """Decodes an EmbeddingVolume into a full-resolution disparity map.

    The top-scoring hypothesis slot is selected, a 3-layer ReLU MLP emits
    r^2 channels which pixel-unshuffle to full resolution as a residual on
    the nearest-upsampled anchor disparity; the sum is clamped at 0.
    Negative pre-clamp predictions indicate under-training and are the
    caller's to log.
    """

    def __init__(self, store: nn.ParamStore, name: str, c: int, r: int, hidden: int):
        self.r = r
        self.mlp = nn.MLP3(store, f"{name}.mlp", c, hidden, r * r)

    def __call__(self, vol: EmbeddingVolume) -> ad.Tensor:
        s_top = vol.s[:, :, :, 0, :]  # slots are sorted by descending score
        anchor_top = vol.anchor[:, :, :, 0]
        resid = pixel_unshuffle_expand(self.mlp(s_top), self.r)
        up = nearest_upsample(anchor_top, self.r)
        return ad.maximum_s(up + resid, 0.0)


class RelativeDepthDecoder:
    """Decodes monocular context features into a full-resolution relative
    map (unitless, defined up to an affine transform)."""

    def __init__(self, store: nn.ParamStore, name: str, c: int, r: int, hidden: int):
        self.r = r
        self.mlp = nn.MLP3(store, f"{name}.mlp", c, hidden, r * r)

    def __call__(self, m: ad.Tensor) -> ad.Tensor:
        return pixel_unshuffle_expand(self.mlp(m), self.r)
