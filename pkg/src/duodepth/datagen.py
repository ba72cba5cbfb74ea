"""Procedural rectified stereo pairs with dense ground-truth disparity.

Scenes are unions of slanted planes (disparity linear in the column
index). The right view is synthesized by closed-form inverse warping of
per-plane textures, so photometric consistency is exact up to bilinear
interpolation, injected noise, and deliberately view-inconsistent
specular highlights. Occlusions are resolved by a disparity z-buffer and
marked invalid in the left-referenced mask.

Plane shading carries a depth-correlated brightness cue (nearer planes
render brighter), giving the monocular branch a learnable signal the
way perspective cues do in real imagery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import SceneConfig
from .errors import ConfigError
from . import formats


@dataclass
class StereoSample:
    left: np.ndarray  # H x W x 3 in [0, 1]
    right: np.ndarray
    disparity_gt: np.ndarray  # H x W, pixels, left-referenced
    valid_mask: np.ndarray  # bool, False where out-of-frame or occluded
    aux: dict = field(default_factory=dict)  # inframe/specular/textureless masks

    @property
    def shape(self):
        return self.disparity_gt.shape


@dataclass
class _Plane:
    i0: int
    i1: int
    j0: int
    j1: int
    a: float  # d(j) = a * j + b
    b: float
    tex: np.ndarray  # H x W x 3, defined in left coordinates
    base: np.ndarray  # constant color used for textureless patches


def _box_blur_pass(x):
    y = x.copy()
    y[1:-1] = (x[:-2] + x[1:-1] + x[2:]) / 3.0
    z = y.copy()
    z[:, 1:-1] = (y[:, :-2] + y[:, 1:-1] + y[:, 2:]) / 3.0
    return z


def _plane_texture(rng, h, w, kind, depth_frac):
    brightness = 0.30 + 0.45 * depth_frac
    tint = rng.uniform(-0.12, 0.12, size=3)
    base = np.clip(brightness + tint, 0.05, 0.95).astype(np.float32)
    if kind == "random_dot":
        noise = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
        tex = np.clip(0.25 * base + 0.75 * noise, 0.0, 1.0)
    else:
        noise = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
        for _ in range(3):
            noise = _box_blur_pass(noise)
        tex = np.clip(base + 0.5 * (noise - 0.5), 0.0, 1.0)
    return tex.astype(np.float32), base


def _sample_rows(tex, js):
    """Bilinear sample of an H x W x 3 texture at real column positions js (H x W)."""
    h, w, _ = tex.shape
    j0 = np.floor(js).astype(np.int64)
    t = (js - j0).astype(np.float32)[..., None]
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j0 + 1, 0, w - 1)
    rows = np.arange(h)[:, None]
    return tex[rows, j0c] * (1.0 - t) + tex[rows, j1c] * t


def _disparity_range(cfg: SceneConfig):
    hi = max(0.0, cfg.max_disparity - 1.0)
    lo = min(cfg.min_disparity, hi)
    return lo, hi


def _make_planes(cfg: SceneConfig, rng) -> list[_Plane]:
    h, w = cfg.height, cfg.width
    lo, hi = _disparity_range(cfg)
    planes: list[_Plane] = []

    def add(i0, i1, j0, j1, d_left, d_right, kind):
        span = max(j1 - 1 - j0, 1)
        a = (d_right - d_left) / span
        b = d_left - a * j0
        depth_frac = 0.5 * (d_left + d_right) / max(cfg.max_disparity, 1.0)
        tex, base = _plane_texture(rng, h, w, kind, depth_frac)
        planes.append(_Plane(i0, i1, j0, j1, a, b, tex, base))

    if cfg.scene_kind == "random_dot":
        if cfg.fixed_disparity is not None:
            d = float(cfg.fixed_disparity)
        else:
            d = float(rng.integers(int(lo), max(int(lo), int(hi * 0.8)) + 1))
        add(0, h, 0, w, d, d, "random_dot")
    elif cfg.scene_kind == "layered_boxes":
        if cfg.layer_disparities is not None:
            levels = [float(v) for v in cfg.layer_disparities]
        else:
            levels = sorted(rng.uniform(lo, hi, size=cfg.n_layers).tolist())
        add(0, h, 0, w, levels[0], levels[0], "box")
        for d in levels[1:]:
            bh = int(rng.integers(h // 4, max(h // 4 + 1, (3 * h) // 4)))
            bw = int(rng.integers(w // 4, max(w // 4 + 1, (3 * w) // 4)))
            i0 = int(rng.integers(0, h - bh + 1))
            j0 = int(rng.integers(0, w - bw + 1))
            add(i0, i0 + bh, j0, j0 + bw, d, d, "box")
    else:  # slanted_planes
        d0 = rng.uniform(lo, lo + 0.3 * (hi - lo)) if hi > lo else lo
        d1 = d0 + rng.uniform(-0.15, 0.15) * w
        d1 = float(np.clip(d1, lo, hi))
        add(0, h, 0, w, d0, d1, "plane")
        for _ in range(int(rng.integers(1, 4))):
            bh = int(rng.integers(h // 3, max(h // 3 + 1, (3 * h) // 4)))
            bw = int(rng.integers(w // 4, max(w // 4 + 1, (2 * w) // 3)))
            i0 = int(rng.integers(0, h - bh + 1))
            j0 = int(rng.integers(0, w - bw + 1))
            mid = rng.uniform(lo + 0.4 * (hi - lo), hi) if hi > lo else lo
            tilt = rng.uniform(-0.2, 0.2) * min(bw, 60)
            dl = float(np.clip(mid - tilt / 2, lo, hi))
            dr = float(np.clip(mid + tilt / 2, lo, hi))
            add(i0, i0 + bh, j0, j0 + bw, dl, dr, "plane")
    return planes


def _paint_textureless(cfg: SceneConfig, rng, planes, mask):
    h, w = cfg.height, cfg.width
    target = cfg.textureless_fraction * h * w
    for _ in range(24):
        if mask.sum() >= target:
            break
        rh = int(rng.integers(h // 8 + 1, h // 2 + 1))
        rw = int(rng.integers(w // 8 + 1, w // 2 + 1))
        i0 = int(rng.integers(0, h - rh + 1))
        j0 = int(rng.integers(0, w - rw + 1))
        mask[i0 : i0 + rh, j0 : j0 + rw] = True
        for p in planes:
            p.tex[i0 : i0 + rh, j0 : j0 + rw] = p.base


def _cosine_bump(rh, rw):
    wi = 0.5 * (1 - np.cos(2 * np.pi * (np.arange(rh) + 0.5) / rh))
    wj = 0.5 * (1 - np.cos(2 * np.pi * (np.arange(rw) + 0.5) / rw))
    return np.outer(wi, wj).astype(np.float32)


def _apply_specular(cfg: SceneConfig, rng, left, right, disparity, mask):
    h, w = cfg.height, cfg.width
    target = cfg.specular_fraction * h * w
    for _ in range(24):
        if mask.sum() >= target:
            break
        rh = int(rng.integers(max(h // 8, 4), h // 2 + 1))
        rw = int(rng.integers(max(w // 8, 4), w // 2 + 1))
        i0 = int(rng.integers(0, h - rh + 1))
        j0 = int(rng.integers(0, w - rw + 1))
        mask[i0 : i0 + rh, j0 : j0 + rw] = True
        bump = _cosine_bump(rh, rw)
        amp_l = rng.uniform(0.45, 0.8)
        amp_r = rng.uniform(0.45, 0.8)
        sign_l = 1.0 if rng.random() < 0.7 else -1.0
        sign_r = 1.0 if rng.random() < 0.7 else -1.0
        left[i0 : i0 + rh, j0 : j0 + rw] += (sign_l * amp_l * bump)[..., None]
        shift = int(round(float(disparity[i0 : i0 + rh, j0 : j0 + rw].mean())))
        jr0 = max(0, j0 - shift)
        jr1 = min(w, j0 - shift + rw)
        if jr1 > jr0:
            right[i0 : i0 + rh, jr0:jr1] += (sign_r * amp_r * bump[:, : jr1 - jr0])[..., None]


def generate_scene(cfg: SceneConfig) -> StereoSample:
    """Generate one rectified pair with dense GT. Deterministic in cfg.seed."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    planes = _make_planes(cfg, rng)

    textureless = np.zeros((h, w), dtype=bool)
    if cfg.textureless_fraction > 0:
        _paint_textureless(cfg, rng, planes, textureless)

    jgrid = np.arange(w, dtype=np.float64)[None, :]

    # left composite: nearest plane (largest disparity) wins
    left = np.zeros((h, w, 3), dtype=np.float32)
    dbuf = np.full((h, w), -np.inf)
    owner = np.full((h, w), -1, dtype=np.int64)
    for pi, p in enumerate(planes):
        dvals = p.a * jgrid + p.b
        region = np.zeros((h, w), dtype=bool)
        region[p.i0 : p.i1, p.j0 : p.j1] = True
        sel = region & (np.broadcast_to(dvals, (h, w)) > dbuf)
        left[sel] = p.tex[sel]
        dbuf[sel] = np.broadcast_to(dvals, (h, w))[sel]
        owner[sel] = pi
    disparity = dbuf.astype(np.float32)

    # right composite via closed-form inverse warp of each plane
    right = rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)  # disocclusion fill
    rbuf = np.full((h, w), -np.inf)
    for p in planes:
        js = (jgrid + p.b) / (1.0 - p.a)
        inside = (js >= p.j0) & (js <= p.j1 - 1) & (js >= 0) & (js <= w - 1)
        d_at = p.a * js + p.b
        sel = np.broadcast_to(inside, (h, w)) & (np.broadcast_to(d_at, (h, w)) > rbuf)
        sel[: p.i0] = False
        sel[p.i1 :] = False
        sampled = _sample_rows(p.tex, np.broadcast_to(js, (h, w)))
        right[sel] = sampled[sel]
        rbuf[sel] = np.broadcast_to(d_at, (h, w))[sel]

    # left-referenced validity: in-frame and winner of the right z-buffer
    jr = jgrid - disparity
    inframe = jr >= 0.0
    occluded = np.zeros((h, w), dtype=bool)
    for qi, q in enumerate(planes):
        js_q = (jr + q.b) / (1.0 - q.a)
        cand = (js_q >= q.j0) & (js_q <= q.j1 - 1) & (js_q >= 0) & (js_q <= w - 1)
        cand[: q.i0] = False
        cand[q.i1 :] = False
        d_q = q.a * js_q + q.b
        occluded |= cand & (d_q > disparity + 1e-3) & (owner != qi)
    valid = inframe & ~occluded

    specular = np.zeros((h, w), dtype=bool)
    if cfg.specular_fraction > 0:
        _apply_specular(cfg, rng, left, right, disparity, specular)

    if cfg.noise_sigma > 0:
        left = left + rng.normal(0.0, cfg.noise_sigma, size=left.shape).astype(np.float32)
        right = right + rng.normal(0.0, cfg.noise_sigma, size=right.shape).astype(np.float32)

    left = np.clip(left, 0.0, 1.0)
    right = np.clip(right, 0.0, 1.0)
    return StereoSample(
        left=left,
        right=right,
        disparity_gt=disparity,
        valid_mask=valid,
        aux={"inframe": inframe, "specular": specular, "textureless": textureless},
    )


# -- augmentation -------------------------------------------------------------


def _resize_w_bilinear(img, w_new):
    h, w = img.shape[:2]
    src = (np.arange(w_new) + 0.5) * (w / w_new) - 0.5
    j0 = np.floor(src).astype(np.int64)
    t = (src - j0).astype(np.float32)
    j0c = np.clip(j0, 0, w - 1)
    j1c = np.clip(j0 + 1, 0, w - 1)
    out = img[:, j0c] * (1 - t)[None, :, None] + img[:, j1c] * t[None, :, None]
    return out.astype(img.dtype)


def _resize_w_nearest(arr, w_new):
    w = arr.shape[1]
    src = (np.arange(w_new) + 0.5) * (w / w_new) - 0.5
    idx = np.clip(np.round(src).astype(np.int64), 0, w - 1)
    return arr[:, idx]


def _jitter(img, rng):
    scale = rng.uniform(0.85, 1.15)
    shift = rng.uniform(-0.05, 0.05)
    gamma = rng.uniform(0.85, 1.2)
    out = np.clip(img * scale + shift, 0.0, 1.0) ** gamma
    return out.astype(np.float32)


def augment(sample: StereoSample, rng, crop_hw, stretch_prob=0.3, jitter_prob=0.5) -> StereoSample:
    """Random horizontal stretch, crop, and per-view photometric jitter.

    Stretching by a factor f rescales both views and multiplies disparity
    by f; masks are resampled nearest-neighbor.
    """
    ch, cw = crop_hw
    left, right = sample.left, sample.right
    disp, valid = sample.disparity_gt, sample.valid_mask
    aux = dict(sample.aux)

    if stretch_prob > 0 and rng.random() < stretch_prob:
        f = rng.uniform(0.9, 1.15)
        w_new = int(round(left.shape[1] * f))
        if w_new >= cw:
            f_real = w_new / left.shape[1]
            left = _resize_w_bilinear(left, w_new)
            right = _resize_w_bilinear(right, w_new)
            disp = (_resize_w_nearest(disp, w_new) * f_real).astype(np.float32)
            valid = _resize_w_nearest(valid, w_new)
            aux = {k: _resize_w_nearest(v, w_new) for k, v in aux.items()}

    h, w = disp.shape
    if h < ch or w < cw:
        raise ConfigError(f"sample {h}x{w} smaller than crop {ch}x{cw}")
    i0 = int(rng.integers(0, h - ch + 1))
    j0 = int(rng.integers(0, w - cw + 1))
    sl = (slice(i0, i0 + ch), slice(j0, j0 + cw))
    left, right = left[sl], right[sl]
    disp, valid = disp[sl], valid[sl]
    aux = {k: v[sl] for k, v in aux.items()}

    if jitter_prob > 0 and rng.random() < jitter_prob:
        left = _jitter(left, rng)
        right = _jitter(right, rng)

    return StereoSample(left=left, right=right, disparity_gt=disp, valid_mask=valid, aux=aux)


# -- datasets -----------------------------------------------------------------


class GeneratorDataset:
    """Deterministic virtual dataset: sample i is generated from seed_base + i.

    scene_kind may additionally be "mixed", alternating slanted_planes and
    random_dot samples.
    """

    def __init__(self, base: SceneConfig, count: int, seed_base: int = 0, mixed: bool = False):
        self.base = base
        self.count = count
        self.seed_base = seed_base
        self.mixed = mixed

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> StereoSample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        cfg = SceneConfig(**{**self.base.__dict__})
        cfg.seed = self.seed_base + i
        if self.mixed:
            cfg.scene_kind = "slanted_planes" if i % 2 == 0 else "random_dot"
        return generate_scene(cfg)


class ManifestDataset:
    """Dataset backed by a JSONL manifest written by the datagen CLI."""

    def __init__(self, path: str):
        self.records = formats.read_manifest(path)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i: int) -> StereoSample:
        import os

        rec = self.records[i]
        base = rec["_base"]

        def p(key):
            return os.path.join(base, rec[key])

        left = formats.load_image_png(p("left"))
        right = formats.load_image_png(p("right"))
        disp = formats.read_pfm(p("disparity"))
        valid = np.isfinite(disp)
        aux = {}
        for key in ("inframe", "specular", "textureless"):
            if key in rec:
                aux[key] = formats.load_mask_png(p(key))
        disp = np.nan_to_num(disp, nan=0.0)
        if "valid" in rec:
            valid = formats.load_mask_png(p("valid"))
        return StereoSample(left=left, right=right, disparity_gt=disp, valid_mask=valid, aux=aux)


def dataset_from_spec(spec, default_scene: SceneConfig | None = None):
    """Build a dataset from a TrainConfig.dataset value (path or dict)."""
    if isinstance(spec, str):
        return ManifestDataset(spec)
    if isinstance(spec, dict):
        d = dict(spec)
        count = int(d.pop("count", 500))
        seed_base = int(d.pop("seed_base", 1000))
        mixed = d.pop("scene_kind", None) == "mixed"
        if mixed:
            d["scene_kind"] = "slanted_planes"
        base = SceneConfig(**{**(default_scene.__dict__ if default_scene else {}), **d})
        base.validate()
        return GeneratorDataset(base, count, seed_base, mixed=mixed)
    raise ConfigError(f"dataset spec must be a manifest path or a table, got {type(spec)}")
