"""Feature extraction: a siamese residual encoder for the stereo pair and a
small context network producing the monocular feature at 1/8 resolution.

The context provider sits behind a registry so alternative backbones can
be plugged in; anything mapping an (N, H, W, 3) image to (N, H/8, W/8, C)
features satisfies the contract.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from . import nn
from .errors import ContractViolation, ShapeError


@dataclass
class FeaturePyramid:
    f4: ad.Tensor  # (N, H/4, W/4, C)
    f8: ad.Tensor  # (N, H/8, W/8, C)


def check_divisible(h: int, w: int, by: int = 8) -> None:
    if h % by:
        raise ShapeError(f"height {h} not divisible by {by}")
    if w % by:
        raise ShapeError(f"width {w} not divisible by {by}")


class ResBlock:
    def __init__(self, store, name, cin, cout, stride=1):
        self.conv1 = nn.Conv2d(store, f"{name}.conv1", 3, cin, cout, stride=stride)
        self.n1 = nn.InstanceNorm2d(store, f"{name}.n1", cout)
        self.conv2 = nn.Conv2d(store, f"{name}.conv2", 3, cout, cout)
        self.n2 = nn.InstanceNorm2d(store, f"{name}.n2", cout)
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = nn.Conv2d(store, f"{name}.proj", 1, cin, cout, stride=stride, padding=0)
            self.np_ = nn.InstanceNorm2d(store, f"{name}.npr", cout)

    def __call__(self, x):
        y = self.n2(self.conv2(ad.relu(self.n1(self.conv1(x)))))
        skip = x if self.proj is None else self.np_(self.proj(x))
        return ad.relu(y + skip)


class StereoEncoder:
    """Residual conv encoder emitting matching features at strides 4 and 8."""

    def __init__(self, store: nn.ParamStore, name: str, c: int):
        self.stem = nn.Conv2d(store, f"{name}.stem", 3, 3, 16, stride=2)
        self.stem_n = nn.InstanceNorm2d(store, f"{name}.stem_n", 16)
        self.res1 = ResBlock(store, f"{name}.res1", 16, 24, stride=2)
        self.res2 = ResBlock(store, f"{name}.res2", 24, 32, stride=2)
        self.head4 = nn.Conv2d(store, f"{name}.head4", 3, 24, c)
        self.head8 = nn.Conv2d(store, f"{name}.head8", 3, 32, c)

    def __call__(self, img: ad.Tensor) -> FeaturePyramid:
        x = ad.relu(self.stem_n(self.stem(img)))
        x4 = self.res1(x)
        x8 = self.res2(x4)
        return FeaturePyramid(f4=self.head4(x4), f8=self.head8(x8))


def extract_stereo_features(encoder: StereoEncoder, left: ad.Tensor, right: ad.Tensor):
    """Run both views through identical weights in one batched pass."""
    check_divisible(left.shape[1], left.shape[2])
    n = left.shape[0]
    both = encoder(ad.concat([left, right], axis=0))
    return (
        FeaturePyramid(f4=both.f4[:n], f8=both.f8[:n]),
        FeaturePyramid(f4=both.f4[n:], f8=both.f8[n:]),
    )


def _up2(x):
    return ad.repeat_axis(ad.repeat_axis(x, 2, 1), 2, 2)


class ToyContextNet:
    """Four-stage residual encoder with two top-down fusion levels; the fused
    1/2-resolution feature is brought to 1/8 by a stride-4 convolution.

    Stands in for a pretrained monocular encoder/decoder with the same
    output contract and is trained end-to-end with the rest of the model.
    """

    def __init__(self, store: nn.ParamStore, name: str, c: int):
        self.stem = nn.Conv2d(store, f"{name}.stem", 3, 3, 16, stride=2)
        self.stem_n = nn.InstanceNorm2d(store, f"{name}.stem_n", 16)
        self.s1 = ResBlock(store, f"{name}.s1", 16, 16)
        self.s2 = ResBlock(store, f"{name}.s2", 16, 24, stride=2)
        self.s3 = ResBlock(store, f"{name}.s3", 24, 32, stride=2)
        self.s4 = ResBlock(store, f"{name}.s4", 32, 32)
        self.fuse3 = nn.Conv2d(store, f"{name}.fuse3", 3, 24 + 32, 24)
        self.fuse3_n = nn.InstanceNorm2d(store, f"{name}.fuse3_n", 24)
        self.fuse2 = nn.Conv2d(store, f"{name}.fuse2", 3, 16 + 24, 16)
        self.fuse2_n = nn.InstanceNorm2d(store, f"{name}.fuse2_n", 16)
        self.down = nn.Conv2d(store, f"{name}.down", 4, 16, c, stride=4, padding=0)
        self.out = nn.Conv2d(store, f"{name}.out", 3, c, c)

    def __call__(self, img: ad.Tensor) -> ad.Tensor:
        e1 = self.s1(ad.relu(self.stem_n(self.stem(img))))  # 1/2
        e2 = self.s2(e1)  # 1/4
        e4 = self.s4(self.s3(e2))  # 1/8
        u3 = ad.relu(self.fuse3_n(self.fuse3(ad.concat([e2, _up2(e4)], axis=3))))  # 1/4
        u2 = ad.relu(self.fuse2_n(self.fuse2(ad.concat([e1, _up2(u3)], axis=3))))  # 1/2
        return self.out(self.down(u2))  # 1/8


CONTEXT_BACKBONES = {"toy": ToyContextNet}


def register_context_backbone(name: str, factory) -> None:
    """factory(store, prefix, channels) -> callable(image) -> (N,H/8,W/8,C)."""
    CONTEXT_BACKBONES[name] = factory


def build_context_backbone(name: str, store, prefix: str, c: int):
    if name not in CONTEXT_BACKBONES:
        raise ContractViolation(f"unknown context backbone {name!r}; registered: {sorted(CONTEXT_BACKBONES)}")
    return CONTEXT_BACKBONES[name](store, prefix, c)


def extract_context(provider, img: ad.Tensor, c_expected: int) -> ad.Tensor:
    """Run a context provider and enforce the output contract."""
    check_divisible(img.shape[1], img.shape[2])
    m = provider(img)
    want = (img.shape[0], img.shape[1] // 8, img.shape[2] // 8, c_expected)
    if tuple(m.shape) != want:
        raise ContractViolation(f"context provider returned {tuple(m.shape)}, contract requires {want}")
    return m
