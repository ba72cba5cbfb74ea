"""Metric definitions against naive scalar-loop oracles and spec examples."""

import numpy as np
import pytest

from duodepth import evalkit
from duodepth.errors import DegenerateInputError

RNG = np.random.default_rng(99)


def loop_metrics(pred, gt, valid, thresholds=(1.0, 2.0, 3.0)):
    errs = []
    bp = {t: 0 for t in thresholds}
    d1 = 0
    n = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if not valid[i, j]:
                continue
            n += 1
            e = abs(pred[i, j] - gt[i, j])
            errs.append(e)
            for t in thresholds:
                bp[t] += 1 if e > t else 0
            if e > 3.0 and e > 0.05 * gt[i, j]:
                d1 += 1
    return sum(errs) / n, {t: 100.0 * bp[t] / n for t in thresholds}, 100.0 * d1 / n, n


def test_epe_bp_arithmetic_example():
    pred = np.array([[1.0, 2.0, 3.0]])
    gt = np.array([[1.0, 2.0, 4.0]])
    valid = np.ones((1, 3), dtype=bool)
    r = evalkit.compute_disparity_metrics(pred, gt, valid)
    assert abs(r.epe - 1.0 / 3.0) < 1e-12
    assert r.bp[1.0] == 0.0
    assert r.n_valid == 3


def test_d1_definitional_boundary():
    gt = np.array([[100.0, 10.0]])
    pred = gt + 4.0
    valid = np.ones((1, 2), dtype=bool)
    r = evalkit.compute_disparity_metrics(pred, gt, valid)
    # err 4 <= 5%*100 -> inlier; err 4 > 5%*10 -> outlier
    assert r.d1 == 50.0


def test_metrics_match_loop_oracle():
    for _ in range(20):
        pred = RNG.uniform(0, 60, size=(16, 16))
        gt = RNG.uniform(0.5, 60, size=(16, 16))
        valid = RNG.uniform(size=(16, 16)) > 0.2
        valid[0, 0] = True
        r = evalkit.compute_disparity_metrics(pred, gt, valid)
        epe, bp, d1, n = loop_metrics(pred, gt, valid)
        assert r.epe == pytest.approx(epe, abs=1e-12)
        for t in bp:
            assert r.bp[t] == pytest.approx(bp[t], abs=1e-12)
        assert r.d1 == pytest.approx(d1, abs=1e-12)
        assert r.n_valid == n


def test_bp_monotone_and_d1_bound():
    for _ in range(20):
        pred = RNG.uniform(0, 60, size=(24, 24))
        gt = RNG.uniform(0.5, 60, size=(24, 24))
        valid = RNG.uniform(size=(24, 24)) > 0.1
        r = evalkit.compute_disparity_metrics(pred, gt, valid)
        assert r.bp[1.0] >= r.bp[2.0] >= r.bp[3.0]
        assert r.d1 <= r.bp[3.0] + 1e-12


def test_empty_mask_errors():
    with pytest.raises(DegenerateInputError):
        evalkit.compute_disparity_metrics(np.ones((2, 2)), np.ones((2, 2)), np.zeros((2, 2), dtype=bool))


def test_align_exact_affine():
    gt = RNG.uniform(1, 30, size=(10, 10))
    pred = 2.0 * gt + 3.0
    valid = np.ones_like(gt, dtype=bool)
    a, b, aligned = evalkit.align_scale_shift(pred, gt, valid)
    np.testing.assert_allclose(aligned, gt, atol=1e-6)
    assert a == pytest.approx(0.5) and b == pytest.approx(-1.5)


def test_align_identity():
    gt = RNG.uniform(1, 30, size=(8, 8))
    a, b, _ = evalkit.align_scale_shift(gt, gt, np.ones_like(gt, dtype=bool))
    assert a == pytest.approx(1.0) and b == pytest.approx(0.0, abs=1e-9)


def test_align_noisy_residual_bound():
    sigma = 0.01
    gt = RNG.uniform(1, 30, size=(32, 32))
    pred = 0.25 * gt - 2.0 + RNG.normal(0, sigma, size=gt.shape)
    valid = np.ones_like(gt, dtype=bool)
    # pred = 0.25 gt - 2 + e -> alignment scales noise by 1/0.25 = 4
    _, _, aligned = evalkit.align_scale_shift(pred, gt, valid)
    rms = np.sqrt(((aligned - gt) ** 2).mean())
    assert rms <= 2 * sigma * 4


def test_align_residual_orthogonality():
    gt = RNG.uniform(1, 30, size=(16, 16))
    pred = RNG.uniform(0, 5, size=(16, 16))
    valid = RNG.uniform(size=gt.shape) > 0.3
    _, _, aligned = evalkit.align_scale_shift(pred, gt, valid)
    res = (gt - aligned)[valid]
    assert abs((res * pred[valid]).mean()) < 1e-8
    assert abs(res.mean()) < 1e-8


def test_align_degenerate_errors():
    gt = RNG.uniform(1, 5, size=(4, 4))
    with pytest.raises(DegenerateInputError):
        evalkit.align_scale_shift(np.ones_like(gt), gt, np.ones_like(gt, dtype=bool))


def test_depth_metric_examples():
    gt = RNG.uniform(1, 20, size=(8, 8))
    valid = np.ones_like(gt, dtype=bool)
    assert evalkit.compute_depth_metrics(gt, gt, valid) == (0.0, 1.0)
    abs_rel, delta = evalkit.compute_depth_metrics(1.2 * gt, gt, valid)
    assert abs_rel == pytest.approx(0.2)
    assert delta == 1.0
    _, delta = evalkit.compute_depth_metrics(1.3 * gt, gt, valid)
    assert delta == 0.0


def test_csv_rows_and_roundtrip(tmp_path):
    reports = []
    for i in range(2):
        pred = RNG.uniform(0, 30, size=(12, 12))
        gt = RNG.uniform(1, 30, size=(12, 12))
        valid = RNG.uniform(size=(12, 12)) > 0.2
        r = evalkit.compute_disparity_metrics(pred, gt, valid, sample_id=f"s{i}")
        r.abs_rel, r.delta_125 = evalkit.compute_depth_metrics(np.abs(pred) + 0.1, gt, valid)
        reports.append(r)
    agg = evalkit.aggregate_reports(reports)
    # aggregate EPE is the valid-pixel-weighted mean
    w = np.array([r.n_valid for r in reports], dtype=float)
    expect = (np.array([r.epe for r in reports]) * w).sum() / w.sum()
    assert agg.epe == pytest.approx(expect)

    path = tmp_path / "report.csv"
    evalkit.emit_report(reports + [agg], "csv", path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 4  # header + 2 samples + aggregate
    back = evalkit.parse_report_csv(path)
    assert len(back) == 3
    for orig, parsed in zip(reports + [agg], back):
        assert parsed.epe == pytest.approx(orig.epe, abs=1e-6)
        assert parsed.n_valid == orig.n_valid
        assert parsed.sample_id == orig.sample_id


def test_text_report_and_png(tmp_path):
    gt = RNG.uniform(1, 30, size=(12, 12))
    r = evalkit.compute_disparity_metrics(gt + 0.5, gt, np.ones_like(gt, dtype=bool), sample_id="x")
    txt = evalkit.emit_report([r], "text", tmp_path / "r.txt")
    assert "sample_id" in txt and "x" in txt
    evalkit.save_comparison_png(gt + 0.5, gt, np.ones_like(gt, dtype=bool), tmp_path / "v.png")
    assert (tmp_path / "v.png").stat().st_size > 0
