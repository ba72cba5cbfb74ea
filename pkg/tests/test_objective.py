"""Loss definitions against longhand oracles, affine invariance, weights."""

import numpy as np
import pytest

from duodepth import autodiff as ad
from duodepth import objective as obj
from duodepth.errors import TrainingAbort

RNG = np.random.default_rng(314)


def loop_stereo(traces, gt, valid, weights):
    total = 0.0
    for w, d in zip(weights, traces):
        acc, n = 0.0, 0
        for i in range(gt.shape[0]):
            for j in range(gt.shape[1]):
                if valid[i, j]:
                    acc += abs(d[i, j] - gt[i, j])
                    n += 1
        total += w * acc / n
    return total


def loop_rho(m, gt, valid):
    def norm(x):
        v = np.sort(x[valid], kind="stable")
        med = v[(v.size - 1) // 2]
        mad = max(np.abs(x[valid] - med).mean(), 1e-6)
        return (x - med) / mad

    mh, gh = norm(m), norm(gt)
    acc, n = 0.0, 0
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            if valid[i, j]:
                acc += abs(mh[i, j] - gh[i, j])
                n += 1
    return acc / n


def test_stereo_zero_when_exact():
    gt = RNG.uniform(0, 20, size=(6, 8))
    valid = np.ones_like(gt, dtype=bool)
    traces = [ad.Tensor(gt.copy()) for _ in range(3)]
    loss, per_iter, _ = obj.stereo_loss(traces, gt, valid, obj.iteration_weights(3, 0.8))
    assert loss.item() == 0.0
    assert per_iter == [0.0, 0.0, 0.0]


def test_stereo_constant_error_single_iteration():
    gt = RNG.uniform(0, 20, size=(5, 7))
    valid = RNG.uniform(size=gt.shape) > 0.3
    trace = [ad.Tensor(gt + 1.0)]
    loss, _, _ = obj.stereo_loss(trace, gt, valid, [0.8])
    assert loss.item() == pytest.approx(0.8, abs=1e-7)


def test_stereo_matches_loop_oracle():
    for _ in range(10):
        gt = RNG.uniform(0, 30, size=(6, 9))
        valid = RNG.uniform(size=gt.shape) > 0.25
        valid[0, 0] = True
        traces_np = [RNG.uniform(0, 30, size=gt.shape) for _ in range(3)]
        w = obj.iteration_weights(3, 0.8)
        loss, _, _ = obj.stereo_loss([ad.Tensor(t) for t in traces_np], gt, valid, w)
        assert loss.item() == pytest.approx(loop_stereo(traces_np, gt, valid, w), abs=1e-6)


def test_mono_affine_invariance_nine_combos():
    gt = RNG.uniform(1, 30, size=(8, 10))
    valid = RNG.uniform(size=gt.shape) > 0.2
    m = RNG.uniform(0, 5, size=(1,) + gt.shape)
    base, _ = obj.affine_invariant_loss(ad.Tensor(m), gt[None], valid[None])
    for a in (0.5, 2.0, 10.0):
        for b in (-3.0, 0.0, 7.0):
            scaled, _ = obj.affine_invariant_loss(ad.Tensor(a * m + b), gt[None], valid[None])
            assert abs(scaled.item() - base.item()) < 1e-6


def test_mono_perfect_affine_prediction_is_zero():
    gt = RNG.uniform(1, 30, size=(1, 8, 10))
    valid = np.ones_like(gt, dtype=bool)
    rho, _ = obj.affine_invariant_loss(ad.Tensor(3.0 * gt + 2.0), gt, valid)
    assert rho.item() < 1e-6


def test_mono_weights_two_iterations():
    assert obj.iteration_weights(2, 0.8) == pytest.approx([0.64, 0.8])


def test_mono_weights_strictly_increasing():
    w = obj.iteration_weights(6, 0.8)
    assert all(b > a for a, b in zip(w, w[1:]))


def test_mono_matches_longhand_oracle():
    for _ in range(5):
        gt = RNG.uniform(1, 30, size=(6, 9))
        valid = RNG.uniform(size=gt.shape) > 0.25
        valid[0, 0] = True
        monos_np = [RNG.uniform(-3, 3, size=gt.shape) for _ in range(2)]
        loss, _, _ = obj.mono_loss([ad.Tensor(m[None]) for m in monos_np], gt[None], valid[None], gamma=0.8)
        expect = 0.64 * loop_rho(monos_np[0], gt, valid) + 0.8 * loop_rho(monos_np[1], gt, valid)
        assert loss.item() == pytest.approx(expect, abs=1e-6)


def test_total_combination_and_invariant():
    gt = RNG.uniform(1, 20, size=(1, 6, 8))
    valid = np.ones_like(gt, dtype=bool)
    disps = [ad.Tensor(RNG.uniform(0, 20, size=gt.shape)) for _ in range(2)]
    monos = [ad.Tensor(RNG.uniform(0, 5, size=gt.shape)) for _ in range(2)]
    bd = obj.total_loss(disps, monos, gt, valid, gamma=0.8, lam_mono=0.5, lam_prop=0.0)
    assert bd.total_value == pytest.approx(bd.stereo + 0.5 * bd.mono, abs=1e-6)
    assert len(bd.per_iteration) == 2


def test_lam_mono_zero_blocks_gradient():
    gt = RNG.uniform(1, 20, size=(1, 4, 6))
    valid = np.ones_like(gt, dtype=bool)
    mono_param = ad.Tensor(RNG.uniform(0, 5, size=gt.shape), requires_grad=True)
    disp_param = ad.Tensor(RNG.uniform(0, 20, size=gt.shape), requires_grad=True)
    bd = obj.total_loss([disp_param], [mono_param], gt, valid, lam_mono=0.0, lam_prop=0.0)
    bd.total.backward()
    assert mono_param.grad is None
    assert disp_param.grad is not None and np.abs(disp_param.grad).sum() > 0


def test_nan_component_aborts_naming_it():
    gt = np.ones((1, 4, 4))
    valid = np.ones_like(gt, dtype=bool)
    bad = ad.Tensor(np.full((1, 4, 4), np.nan))
    with pytest.raises(TrainingAbort) as e:
        obj.total_loss([bad], [ad.Tensor(gt)], gt, valid, lam_mono=0.0, lam_prop=0.0)
    assert e.value.component == "stereo"


def test_all_invalid_mask_zero_with_flag():
    gt = np.ones((1, 4, 4))
    valid = np.zeros_like(gt, dtype=bool)
    bd = obj.total_loss([ad.Tensor(gt + 1)], [ad.Tensor(gt)], gt, valid, lam_prop=0.0)
    assert bd.total_value == 0.0
    assert any("all-invalid" in f for f in bd.flags)


def test_mad_floor_flag_for_constant_map():
    gt = RNG.uniform(1, 10, size=(1, 4, 4))
    valid = np.ones_like(gt, dtype=bool)
    rho, flags = obj.affine_invariant_loss(ad.Tensor(np.ones_like(gt) * 5.0), gt, valid)
    assert np.isfinite(rho.item())
    assert any("floored" in f for f in flags)


def test_proposal_loss_cross_entropy():
    logits = RNG.standard_normal((1, 3, 4, 6))
    lp = ad.log_softmax(ad.Tensor(logits), axis=-1)
    targets = RNG.integers(0, 6, size=(1, 3, 4))
    valid = np.ones((1, 3, 4), dtype=bool)
    loss = obj.proposal_loss(lp, targets, valid)
    # longhand
    z = logits - logits.max(-1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(-1, keepdims=True)
    expect = -np.log(np.take_along_axis(p, targets[..., None], -1)).mean()
    assert loss.item() == pytest.approx(expect, abs=1e-6)


def test_loss_gradients_match_finite_differences():
    gt = RNG.uniform(1, 20, size=(1, 4, 6))
    valid = RNG.uniform(size=gt.shape) > 0.2
    valid[0, 0, 0] = True
    d_np = RNG.uniform(0, 20, size=gt.shape)
    m_np = RNG.uniform(-2, 2, size=gt.shape)

    def f():
        d = ad.Tensor(d_np, requires_grad=True)
        m = ad.Tensor(m_np, requires_grad=True)
        bd = obj.total_loss([d], [m], gt, valid, lam_prop=0.0)
        return d, m, bd.total

    d, m, loss = f()
    loss.backward()
    eps = 1e-6
    for arr, grad in ((d_np, d.grad), (m_np, m.grad)):
        flat = arr.ravel()
        idxs = RNG.choice(flat.size, size=8, replace=False)
        for i in idxs:
            old = flat[i]
            flat[i] = old + eps
            fp = f()[2].item()
            flat[i] = old - eps
            fm = f()[2].item()
            flat[i] = old
            num = (fp - fm) / (2 * eps)
            assert grad.ravel()[i] == pytest.approx(num, rel=1e-4, abs=1e-8)
