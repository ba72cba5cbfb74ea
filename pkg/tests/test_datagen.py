"""Generator invariants: determinism, warp consistency, occlusion marking."""

import numpy as np

from duodepth.config import SceneConfig
from duodepth.datagen import GeneratorDataset, augment, generate_scene


def warp_error(sample, mask):
    """Per-pixel |left - bilinear(right, j - d)| over mask (independent loop)."""
    h, w = sample.disparity_gt.shape
    errs = []
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            jr = j - float(sample.disparity_gt[i, j])
            if jr < 0 or jr > w - 1:
                continue
            j0 = int(np.floor(jr))
            t = jr - j0
            j1 = min(j0 + 1, w - 1)
            rec = sample.right[i, j0] * (1 - t) + sample.right[i, j1] * t
            errs.append(np.abs(sample.left[i, j] - rec).mean())
    return np.array(errs)


def test_zero_disparity_identity():
    cfg = SceneConfig(height=32, width=64, max_disparity=0, scene_kind="slanted_planes", seed=3)
    s = generate_scene(cfg)
    np.testing.assert_array_equal(s.left, s.right)
    np.testing.assert_array_equal(s.disparity_gt, np.zeros_like(s.disparity_gt))
    assert s.valid_mask.all()


def test_random_dot_integer_shift_warp_check():
    cfg = SceneConfig(
        height=64, width=128, max_disparity=32, scene_kind="random_dot",
        fixed_disparity=5.0, noise_sigma=0.02, seed=7,
    )
    s = generate_scene(cfg)
    assert (s.disparity_gt == 5.0).all()
    d = 5
    diff = np.abs(s.left[:, d:] - s.right[:, :-d]).mean(axis=-1)
    m = s.valid_mask[:, d:]
    assert diff[m].mean() < 3 * cfg.noise_sigma


def test_random_dot_noise_free_exact():
    cfg = SceneConfig(height=32, width=64, max_disparity=16, scene_kind="random_dot",
                      fixed_disparity=4.0, seed=1)
    s = generate_scene(cfg)
    np.testing.assert_array_equal(s.left[:, 4:], s.right[:, :-4])


def test_layered_boxes_histogram_modes():
    cfg = SceneConfig(height=48, width=96, max_disparity=32, scene_kind="layered_boxes",
                      layer_disparities=(8.0, 16.0), seed=11)
    s = generate_scene(cfg)
    assert set(np.unique(s.disparity_gt).tolist()) == {8.0, 16.0}


def test_determinism_bit_identical():
    cfg = SceneConfig(height=48, width=96, max_disparity=24, scene_kind="slanted_planes",
                      textureless_fraction=0.15, specular_fraction=0.1, noise_sigma=0.01, seed=5)
    a = generate_scene(cfg)
    b = generate_scene(cfg)
    for f in ("left", "right", "disparity_gt", "valid_mask"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_disparity_bounds_and_mask_convention():
    cfg = SceneConfig(height=48, width=96, max_disparity=40, scene_kind="slanted_planes", seed=9)
    s = generate_scene(cfg)
    assert (s.disparity_gt >= 0).all()
    assert (s.disparity_gt < cfg.width).all()
    jr = np.arange(96)[None, :] - s.disparity_gt
    assert not s.valid_mask[jr < 0].any()


def test_occlusion_against_plane_loop_oracle():
    cfg = SceneConfig(height=24, width=48, max_disparity=20, scene_kind="layered_boxes",
                      layer_disparities=(4.0, 10.0, 16.0), seed=13)
    s = generate_scene(cfg)
    # oracle: re-derive plane cards from the GT map (constant-disparity layers),
    # then per-pixel check whether any *other* card wins the right-image z-buffer
    levels = sorted(np.unique(s.disparity_gt).tolist())
    cards = []
    for d in levels:
        ys, xs = np.nonzero(s.disparity_gt == d)
        cards.append((d, ys.min(), ys.max(), xs.min(), xs.max()))
    # the topmost card's bounding box is its true extent; lower cards extend
    # underneath, so only check pixels where the oracle is exact: a pixel of
    # card p is occluded iff a strictly nearer card's box covers (i, j - d_p + d_q)
    h, w = s.disparity_gt.shape
    for i in range(h):
        for j in range(w):
            d_p = s.disparity_gt[i, j]
            jr = j - d_p
            if jr < 0:
                assert not s.valid_mask[i, j]
                continue
            occ = False
            for d_q, i0, i1, j0, j1 in cards:
                if d_q <= d_p:
                    continue
                js = jr + d_q
                if i0 <= i <= i1 and j0 <= js <= j1 and 0 <= js <= w - 1:
                    occ = True
            assert s.valid_mask[i, j] == (not occ), (i, j)


def test_warp_consistency_excluding_specular():
    cfg = SceneConfig(height=48, width=96, max_disparity=24, scene_kind="slanted_planes",
                      specular_fraction=0.2, noise_sigma=0.01, seed=21)
    s = generate_scene(cfg)
    clean = s.valid_mask & ~s.aux["specular"]
    errs = warp_error(s, clean)
    assert errs.mean() < max(3 * cfg.noise_sigma, 0.03)
    # specular areas are deliberately inconsistent
    spec = s.valid_mask & s.aux["specular"]
    if spec.sum() > 50:
        assert warp_error(s, spec).mean() > 2 * errs.mean()


def test_specular_keeps_geometry():
    base = dict(height=48, width=96, max_disparity=24, scene_kind="slanted_planes", seed=33)
    plain = generate_scene(SceneConfig(**base))
    spec = generate_scene(SceneConfig(**base, specular_fraction=0.25))
    np.testing.assert_array_equal(plain.disparity_gt, spec.disparity_gt)
    np.testing.assert_array_equal(plain.valid_mask, spec.valid_mask)
    assert spec.aux["specular"].mean() >= 0.2


def test_textureless_regions_are_constant():
    cfg = SceneConfig(height=48, width=96, max_disparity=24, scene_kind="layered_boxes",
                      layer_disparities=(6.0,), textureless_fraction=0.4, seed=17)
    s = generate_scene(cfg)
    m = s.aux["textureless"]
    assert m.mean() >= 0.35
    grad = np.abs(np.diff(s.left, axis=1)).sum(axis=-1)
    inner = m[:, 1:] & m[:, :-1]
    assert (grad[inner] == 0).all()


def test_augment_crop_and_stretch():
    cfg = SceneConfig(height=64, width=128, max_disparity=32, scene_kind="random_dot",
                      fixed_disparity=10.0, seed=2)
    s = generate_scene(cfg)
    rng = np.random.default_rng(0)
    out = augment(s, rng, (32, 64), stretch_prob=1.0, jitter_prob=1.0)
    assert out.left.shape == (32, 64, 3)
    assert out.disparity_gt.shape == (32, 64)
    f = np.unique(out.disparity_gt) / 10.0
    assert len(f) == 1 and 0.88 <= f[0] <= 1.17  # constant field scaled by the stretch


def test_augment_deterministic():
    cfg = SceneConfig(height=64, width=128, max_disparity=32, seed=4)
    s = generate_scene(cfg)
    a = augment(s, np.random.default_rng(9), (48, 96))
    b = augment(s, np.random.default_rng(9), (48, 96))
    np.testing.assert_array_equal(a.left, b.left)
    np.testing.assert_array_equal(a.disparity_gt, b.disparity_gt)


def test_generator_dataset_mixed_deterministic():
    base = SceneConfig(height=32, width=64, max_disparity=16)
    ds = GeneratorDataset(base, count=4, seed_base=50, mixed=True)
    assert len(ds) == 4
    s0a, s0b = ds[0], ds[0]
    np.testing.assert_array_equal(s0a.left, s0b.left)
    assert not np.array_equal(ds[0].left, ds[1].left)
