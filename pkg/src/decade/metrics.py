"""Image-quality and quantification metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, stats

REPORT_VERSION = 1
REPORT_COLUMNS = ("frame", "ssim", "psnr_db", "nmse", "data_range")


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    return pred, ref


def nmse(pred, ref) -> float:
    """||pred - ref||^2 / ||ref||^2."""
    pred, ref = _pair(pred, ref)
    denom = float(np.sum(ref ** 2))
    if denom == 0:
        raise ValueError("reference is all zero")
    return float(np.sum((pred - ref) ** 2) / denom)


def psnr(pred, ref, data_range: float | None = None) -> float:
    """10 log10(range^2 / MSE) with range = max(ref) unless given; inf when equal."""
    pred, ref = _pair(pred, ref)
    rng = float(ref.max()) if data_range is None else float(data_range)
    mse = float(np.mean((pred - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(rng ** 2 / mse)


def _ssim_2d(a, b, data_range, sigma, truncate, k1, k2):
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(x):
        return ndimage.gaussian_filter(x, sigma, truncate=truncate, mode="reflect")

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a ** 2
    sbb = filt(b * b) - mu_b ** 2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    pad = int(truncate * sigma + 0.5)
    s = num / den
    return s[pad:-pad, pad:-pad].mean()


def ssim(
    pred,
    ref,
    data_range: float | None = None,
    sigma: float = 1.5,
    win: int = 11,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Gaussian-window SSIM; 3D volumes are averaged over axis-0 slices.

    ``data_range`` defaults to max(ref) - min(ref).
    """
    pred, ref = _pair(pred, ref)
    if pred.ndim not in (2, 3):
        raise ValueError("ssim expects a 2D image or 3D volume")
    if any(s < win for s in pred.shape[-2:]):
        raise ValueError(f"in-plane size {pred.shape[-2:]} is smaller than the {win}-wide window")
    rng = float(ref.max() - ref.min()) if data_range is None else float(data_range)
    if rng <= 0:
        rng = 1.0
    truncate = ((win - 1) / 2) / sigma
    if pred.ndim == 2:
        return float(_ssim_2d(pred, ref, rng, sigma, truncate, k1, k2))
    return float(np.mean([_ssim_2d(p, r, rng, sigma, truncate, k1, k2) for p, r in zip(pred, ref)]))


def nstd(volume, roi_mask) -> float:
    """Population std / mean inside the ROI."""
    vals = np.asarray(volume, dtype=np.float64)[np.asarray(roi_mask, bool)]
    if vals.size == 0:
        raise ValueError("empty ROI")
    mean = vals.mean()
    if mean == 0:
        raise ValueError("ROI mean is zero")
    return float(vals.std() / mean)


def percentage_error(pred_value, true_value) -> float:
    if true_value <= 0:
        raise ValueError("true value must be positive")
    return float(abs(pred_value - true_value) / true_value * 100.0)


def myo_blood_ratio(static_volume, myo_mask, lv_mask) -> float:
    v = np.asarray(static_volume, dtype=np.float64)
    myo, lv = np.asarray(myo_mask, bool), np.asarray(lv_mask, bool)
    if not myo.any() or not lv.any():
        raise ValueError("empty mask")
    blood = v[lv].mean()
    if blood <= 0:
        raise ValueError("blood-pool mean must be positive")
    return float(v[myo].mean() / blood)


def paired_ttest(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on per-frame metrics; returns (t, p)."""
    res = stats.ttest_rel(np.asarray(a, float), np.asarray(b, float))
    return float(res.statistic), float(res.pvalue)


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    reference: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def frame_rows(self) -> list[dict]:
        return [r for r in self.rows if r["frame"] != "aggregate"]

    @property
    def aggregate(self) -> dict:
        return next(r for r in self.rows if r["frame"] == "aggregate")

    def write_csv(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(f"# metric_report_version={REPORT_VERSION} reference={self.reference}\n")
            wr = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
            wr.writeheader()
            for r in self.rows:
                wr.writerow({k: r[k] for k in REPORT_COLUMNS})
        return path


def read_report_csv(path: Path | str) -> list[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def evaluate_frames(pred_frames, ref_frames, reference: str = "", skip_empty: bool = True) -> MetricReport:
    """Per-frame SSIM/PSNR/NMSE plus an aggregate (mean over frames) row.

    Frames whose reference is all zero are skipped when ``skip_empty``.
    """
    pred_frames = np.asarray(pred_frames, dtype=np.float64)
    ref_frames = np.asarray(ref_frames, dtype=np.float64)
    if pred_frames.shape != ref_frames.shape:
        raise ValueError("prediction and reference studies differ in shape")
    report = MetricReport(reference=reference)
    for f, (p, r) in enumerate(zip(pred_frames, ref_frames)):
        if skip_empty and not np.any(r):
            continue
        report.rows.append(
            {"frame": f, "ssim": ssim(p, r), "psnr_db": psnr(p, r), "nmse": nmse(p, r), "data_range": float(r.max())}
        )
    if report.rows:
        agg = {k: float(np.mean([row[k] for row in report.rows])) for k in ("ssim", "psnr_db", "nmse", "data_range")}
    else:
        agg = {k: math.nan for k in ("ssim", "psnr_db", "nmse", "data_range")}
    report.rows.append({"frame": "aggregate", **agg})
    return report
