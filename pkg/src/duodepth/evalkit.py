"""Disparity and depth metrics, scale-shift alignment, and report output."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, ShapeError

CSV_COLUMNS = ["sample_id", "region", "epe", "bp1", "bp2", "bp3", "d1", "abs_rel", "delta125", "n_valid"]
ERROR_HEATMAP_RANGE = (0.0, 5.0)  # px, fixed color scale for error maps


@dataclass
class MetricsReport:
    epe: float
    bp: dict = field(default_factory=dict)  # threshold (px) -> percent
    d1: float = 0.0
    abs_rel: float | None = None
    delta_125: float | None = None
    n_valid: int = 0
    region: str = "all"
    sample_id: str = ""


def compute_disparity_metrics(pred, gt, valid_mask, thresholds=(1.0, 2.0, 3.0), region="all", sample_id=""):
    """EPE, BP-X and D1 over the masked pixels.

    D1 marks a pixel as an outlier only when its error exceeds both 3 px
    and 5% of the ground-truth disparity.
    """
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ShapeError(f"metric inputs disagree: {pred.shape} vs {gt.shape} vs {valid.shape}")
    n = int(valid.sum())
    if n == 0:
        raise DegenerateInputError("empty valid mask: refusing to report metrics over zero pixels")
    err = np.abs(pred[valid] - gt[valid])
    epe = float(err.mean())
    bp = {float(x): float((err > x).mean() * 100.0) for x in thresholds}
    d1 = float(((err > 3.0) & (err > 0.05 * gt[valid])).mean() * 100.0)
    return MetricsReport(epe=epe, bp=bp, d1=d1, n_valid=n, region=region, sample_id=sample_id)


def align_scale_shift(pred, gt, valid_mask):
    """Closed-form least-squares (a, b) minimizing ||a*pred + b - gt||^2 on the mask."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.sum() < 2:
        raise DegenerateInputError("scale-shift alignment needs at least 2 valid pixels")
    p, g = pred[valid], gt[valid]
    var_p = p.var()
    if var_p < 1e-12:
        raise DegenerateInputError("prediction is constant over the mask; scale is unidentifiable")
    a = float(((p - p.mean()) * (g - g.mean())).sum() / ((p - p.mean()) ** 2).sum())
    b = float(g.mean() - a * p.mean())
    return a, b, (a * pred + b)


def compute_depth_metrics(aligned_pred, gt, valid_mask):
    """(Abs Rel, delta < 1.25) over the masked pixels; requires gt > 0 there."""
    pred, gt = np.asarray(aligned_pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if valid.sum() == 0:
        raise DegenerateInputError("empty valid mask")
    g = gt[valid]
    if np.any(g <= 0):
        raise DegenerateInputError("depth metrics need positive ground truth inside the mask")
    p = pred[valid]
    abs_rel = float((np.abs(p - g) / g).mean())
    ratio = np.maximum(p / g, g / p)
    delta = float((ratio < 1.25).mean())
    return abs_rel, delta


def aggregate_reports(reports: list[MetricsReport], region="all") -> MetricsReport:
    """Valid-pixel-weighted mean of per-sample reports."""
    if not reports:
        raise DegenerateInputError("no reports to aggregate")
    wts = np.array([r.n_valid for r in reports], dtype=np.float64)
    wts = wts / wts.sum()

    def wmean(vals):
        vals = [v for v in vals]
        if any(v is None for v in vals):
            return None
        return float((np.array(vals) * wts).sum())

    thresholds = reports[0].bp.keys()
    return MetricsReport(
        epe=wmean([r.epe for r in reports]),
        bp={t: wmean([r.bp[t] for r in reports]) for t in thresholds},
        d1=wmean([r.d1 for r in reports]),
        abs_rel=wmean([r.abs_rel for r in reports]),
        delta_125=wmean([r.delta_125 for r in reports]),
        n_valid=int(sum(r.n_valid for r in reports)),
        region=region,
        sample_id="aggregate",
    )


def report_row(r: MetricsReport) -> dict:
    return {
        "sample_id": r.sample_id,
        "region": r.region,
        "epe": f"{r.epe:.6f}",
        "bp1": f"{r.bp.get(1.0, float('nan')):.6f}",
        "bp2": f"{r.bp.get(2.0, float('nan')):.6f}",
        "bp3": f"{r.bp.get(3.0, float('nan')):.6f}",
        "d1": f"{r.d1:.6f}",
        "abs_rel": "" if r.abs_rel is None else f"{r.abs_rel:.6f}",
        "delta125": "" if r.delta_125 is None else f"{r.delta_125:.6f}",
        "n_valid": str(r.n_valid),
    }


def emit_report(reports: list[MetricsReport], fmt: str, path=None) -> str:
    """Render reports as 'csv' or 'text'. Writes to path when given."""
    rows = [report_row(r) for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        out = buf.getvalue()
    elif fmt == "text":
        widths = {c: max(len(c), *(len(row[c]) for row in rows)) for c in CSV_COLUMNS}
        lines = ["  ".join(c.ljust(widths[c]) for c in CSV_COLUMNS)]
        for row in rows:
            lines.append("  ".join(row[c].ljust(widths[c]) for c in CSV_COLUMNS))
        out = "\n".join(lines) + "\n"
    else:
        raise ValueError(f"unknown report format {fmt!r} (want 'csv' or 'text')")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(out)
    return out


def parse_report_csv(path) -> list[MetricsReport]:
    reports = []
    with open(path, encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            reports.append(
                MetricsReport(
                    epe=float(row["epe"]),
                    bp={1.0: float(row["bp1"]), 2.0: float(row["bp2"]), 3.0: float(row["bp3"])},
                    d1=float(row["d1"]),
                    abs_rel=float(row["abs_rel"]) if row["abs_rel"] else None,
                    delta_125=float(row["delta125"]) if row["delta125"] else None,
                    n_valid=int(row["n_valid"]),
                    region=row["region"],
                    sample_id=row["sample_id"],
                )
            )
    return reports


def save_comparison_png(pred, gt, valid_mask, path, title=""):
    """Side-by-side prediction / GT / error-heatmap image. Error colormap is
    fixed to ERROR_HEATMAP_RANGE so panels are comparable across samples."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    err = np.abs(pred - gt)
    err[~np.asarray(valid_mask, dtype=bool)] = np.nan
    vmax = max(float(np.nanmax(gt)), 1e-6)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    for ax, data, name, kw in (
        (axes[0], pred, "prediction", dict(vmin=0, vmax=vmax, cmap="turbo")),
        (axes[1], gt, "ground truth", dict(vmin=0, vmax=vmax, cmap="turbo")),
        (axes[2], err, "abs error (px)", dict(vmin=ERROR_HEATMAP_RANGE[0], vmax=ERROR_HEATMAP_RANGE[1], cmap="inferno")),
    ):
        im = ax.imshow(data, **kw)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.04)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
