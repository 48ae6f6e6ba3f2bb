"""One-tissue compartment parametric imaging by the basis function method."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .phantom import DynamicStudy, FrameSchedule, counts_to_activity, fine_grid, frame_average, tissue_tac

RENKIN_CRONE_A = 0.77
RENKIN_CRONE_B = 0.63


@dataclass
class IDIF:
    times_s: np.ndarray
    values: np.ndarray
    source: str = "lv_mask"
    schedule: FrameSchedule | None = None

    def __post_init__(self):
        self.times_s = np.asarray(self.times_s, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.times_s) <= 0):
            raise ValueError("IDIF times must be strictly increasing")


@dataclass
class BasisSet:
    k2_grid: np.ndarray  # 1/min
    curves: np.ndarray  # [J, F] frame-averaged C_b conv exp(-k2 t), per-minute rate units
    cb: np.ndarray  # [F] frame-averaged input function
    schedule: FrameSchedule


@dataclass
class KineticMaps:
    K1: np.ndarray
    k2: np.ndarray
    Vb: np.ndarray
    MBF: np.ndarray
    residual: np.ndarray
    roi_summary: list[dict] = field(default_factory=list)
    n_failed: int = 0

    def write_roi_csv(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = ["roi", "K1", "k2", "Vb", "MBF", "n_voxels", "residual"]
        with open(path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=cols)
            wr.writeheader()
            for row in self.roi_summary:
                wr.writerow({k: row[k] for k in cols})
        return path


def default_k2_grid(n: int = 64, lo: float = 0.01, hi: float = 3.0) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def extract_idif(study: DynamicStudy, lv_mask: np.ndarray) -> IDIF:
    """Mean decay-corrected activity inside ``lv_mask`` for every frame."""
    lv_mask = np.asarray(lv_mask, dtype=bool)
    if lv_mask.shape != study.spatial_shape:
        raise ValueError(f"mask shape {lv_mask.shape} != study shape {study.spatial_shape}")
    if not lv_mask.any():
        raise ValueError("empty input-function mask")
    act = counts_to_activity(study) if study.units == "counts" else study
    vals = act.frames[:, lv_mask].mean(axis=1)
    return IDIF(act.schedule.midpoints, np.maximum(vals, 0.0), "lv_mask", act.schedule)


def input_on_grid(idif: IDIF, schedule: FrameSchedule, dt: float = 0.1, mode: str = "step"):
    """Fine-grid input function from frame values.

    ``step`` holds each frame's average over the frame, so frame integrals are
    preserved exactly; ``linear`` interpolates between frame midpoints.
    """
    t = fine_grid(schedule.end_s, dt)
    if mode == "step":
        idx = np.searchsorted(schedule.ends, t, side="right")
        return t, idif.values[np.minimum(idx, len(schedule) - 1)]
    if mode == "linear":
        return t, np.interp(t, np.concatenate([[0.0], idif.times_s]), np.concatenate([[0.0], idif.values]))
    raise ValueError(f"unknown interpolation {mode!r}")


def build_basis(
    idif: IDIF,
    k2_grid,
    schedule: FrameSchedule,
    dt: float = 0.1,
    mode: str = "step",
    fine_input: tuple[np.ndarray, np.ndarray] | None = None,
) -> BasisSet:
    """Frame-averaged C_b conv exp(-k2 t) for every k2 on the grid.

    ``fine_input`` = (t, C_b) bypasses interpolation of the frame values.
    """
    k2_grid = np.asarray(k2_grid, dtype=float)
    if k2_grid.size == 0:
        raise ValueError("empty k2 grid")
    if np.any(np.diff(k2_grid) <= 0) or np.any(k2_grid < 0):
        raise ValueError("k2 grid must be non-negative and strictly increasing")
    if len(idif.values) != len(schedule):
        raise ValueError("IDIF and schedule lengths differ")
    t, cb = fine_input if fine_input is not None else input_on_grid(idif, schedule, dt, mode)
    curves = np.stack(
        [frame_average(tissue_tac(1.0, k2, 0.0, cb, t), t, schedule) for k2 in k2_grid]
    )
    return BasisSet(k2_grid, curves, np.asarray(idif.values, dtype=float), schedule)


def frame_weights(schedule: FrameSchedule) -> np.ndarray:
    d = schedule.durations
    return d / d.mean()


def _fit_many(tacs: np.ndarray, basis: BasisSet, weights: np.ndarray):
    """Box-constrained (K1 >= 0, 0 <= Vb <= 1) weighted fits for rows of ``tacs``.

    The problem is a convex 2-variable QP for each k2, so the optimum is the
    best feasible KKT candidate: the free solution, each edge with the other
    variable free, or a corner.
    """
    n = tacs.shape[0]
    cb = basis.cb
    sw = np.sqrt(weights)
    y = tacs * sw
    c = cb * sw
    best = np.full(n, np.inf)
    out_k1 = np.zeros(n)
    out_vb = np.zeros(n)
    out_j = np.zeros(n, dtype=int)
    cc = c @ c
    # einsum keeps each row's reduction independent of batch layout, so chunking is bit-exact
    yc = np.einsum("ij,j->i", y, c)
    for j, bj in enumerate(basis.curves):
        b = bj * sw
        bb, bc = b @ b, b @ c
        yb = np.einsum("ij,j->i", y, b)
        cands = []
        det = bb * cc - bc * bc
        if det > 1e-12 * bb * cc:
            cands.append(((cc * yb - bc * yc) / det, (bb * yc - bc * yb) / det))
        k1_only = yb / bb if bb > 0 else np.zeros(n)
        cands.append((k1_only, np.zeros(n)))
        cands.append(((yb - bc) / bb if bb > 0 else np.zeros(n), np.ones(n)))
        vb_only = yc / cc if cc > 0 else np.zeros(n)
        cands.append((np.zeros(n), vb_only))
        cands.append((np.zeros(n), np.zeros(n)))
        cands.append((np.zeros(n), np.ones(n)))
        for k1, vb in cands:
            k1 = np.broadcast_to(k1, (n,))
            vb = np.broadcast_to(vb, (n,))
            ok = (k1 >= 0) & (vb >= 0) & (vb <= 1)
            r = y - k1[:, None] * b[None] - vb[:, None] * c[None]
            res = np.einsum("ij,ij->i", r, r)
            better = ok & (res < best)
            best = np.where(better, res, best)
            out_k1 = np.where(better, k1, out_k1)
            out_vb = np.where(better, vb, out_vb)
            out_j = np.where(better, j, out_j)
    return out_k1, basis.k2_grid[out_j], out_vb, best


def fit_voxel(tac, basis: BasisSet, idif: IDIF | None = None, weighted: bool = True):
    """Fit one curve; returns (K1, k2, Vb, duration-weighted squared residual)."""
    tac = np.asarray(tac, dtype=float)
    if tac.shape != (len(basis.schedule),):
        raise ValueError("curve length must equal the number of frames")
    if idif is not None and not np.allclose(idif.values, basis.cb):
        raise ValueError("IDIF does not match the basis set")
    w = frame_weights(basis.schedule) if weighted else np.ones(len(tac))
    k1, k2, vb, res = _fit_many(tac[None], basis, w)
    return float(k1[0]), float(k2[0]), float(vb[0]), float(res[0])


def fit_volume(
    study: DynamicStudy,
    idif: IDIF,
    k2_grid=None,
    roi_masks: dict[str, np.ndarray] | None = None,
    mask: np.ndarray | None = None,
    chunk: int = 4096,
    basis: BasisSet | None = None,
    renkin_crone: tuple[float, float] = (RENKIN_CRONE_A, RENKIN_CRONE_B),
) -> KineticMaps:
    """Voxelwise fit of every voxel (or those inside ``mask``)."""
    act = counts_to_activity(study) if study.units == "counts" else study
    if basis is None:
        k2_grid = default_k2_grid() if k2_grid is None else k2_grid
        basis = build_basis(idif, k2_grid, act.schedule)
    shape = act.spatial_shape
    mask = np.ones(shape, bool) if mask is None else np.asarray(mask, bool)
    tacs = act.frames[:, mask].T
    finite = np.all(np.isfinite(tacs), axis=1)
    w = frame_weights(act.schedule)
    n = tacs.shape[0]
    K1 = np.full(n, np.nan)
    k2 = np.full(n, np.nan)
    Vb = np.full(n, np.nan)
    res = np.full(n, np.nan)
    good = np.flatnonzero(finite)
    for s in range(0, len(good), chunk):
        idx = good[s:s + chunk]
        K1[idx], k2[idx], Vb[idx], res[idx] = _fit_many(tacs[idx], basis, w)

    def vol(v):
        out = np.full(shape, np.nan)
        out[mask] = v
        return out

    maps = KineticMaps(vol(K1), vol(k2), vol(Vb), vol(np.full(n, np.nan)), vol(res), n_failed=int((~finite).sum()))
    ok = np.isfinite(maps.K1)
    maps.MBF[ok] = mbf_from_k1(maps.K1[ok], *renkin_crone)
    for name, m in (roi_masks or {}).items():
        maps.roi_summary.append(roi_summary(maps, m, name))
    return maps


def roi_summary(maps: KineticMaps, roi: np.ndarray, name: str = "roi") -> dict:
    roi = np.asarray(roi, bool) & np.isfinite(maps.K1)
    if not roi.any():
        raise ValueError(f"ROI {name!r} is empty")
    return {
        "roi": name,
        "K1": float(maps.K1[roi].mean()),
        "k2": float(maps.k2[roi].mean()),
        "Vb": float(maps.Vb[roi].mean()),
        "MBF": float(maps.MBF[roi].mean()),
        "n_voxels": int(roi.sum()),
        "residual": float(maps.residual[roi].mean()),
    }


def k1_from_mbf(mbf, a: float = RENKIN_CRONE_A, b: float = RENKIN_CRONE_B):
    """Generalised Renkin-Crone extraction: K1 = MBF (1 - a exp(-b / MBF))."""
    mbf = np.asarray(mbf, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        k1 = mbf * (1.0 - a * np.exp(-b / mbf))
    return np.where(mbf > 0, k1, 0.0)


def check_renkin_crone_monotone(a: float = RENKIN_CRONE_A, b: float = RENKIN_CRONE_B) -> None:
    grid = np.linspace(1e-3, 10.0, 20001)
    if not np.all(np.diff(k1_from_mbf(grid, a, b)) > 0):
        raise ValueError(f"Renkin-Crone map is not increasing for a={a}, b={b}")


def mbf_from_k1(K1, a: float = RENKIN_CRONE_A, b: float = RENKIN_CRONE_B, tol: float = 1e-10):
    """Invert the Renkin-Crone map by bisection (elementwise)."""
    check_renkin_crone_monotone(a, b)
    K1 = np.asarray(K1, dtype=float)
    if np.any(K1 < 0):
        raise ValueError("K1 must be >= 0")
    lo = np.zeros_like(K1)
    # MBF (1 - a e^{-b/MBF}) >= MBF (1 - a), so this bracket always holds the root
    hi = K1 / (1.0 - a) + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        above = k1_from_mbf(mid, a, b) > K1
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
        if np.all(hi - lo < tol):
            break
    out = 0.5 * (lo + hi)
    out = np.where(K1 == 0, 0.0, out)
    return float(out) if out.ndim == 0 else out


def mfr(stress_mbf, rest_mbf):
    rest = np.asarray(rest_mbf, dtype=float)
    if np.any(rest <= 0):
        raise ValueError("rest MBF must be positive")
    ratio = np.asarray(stress_mbf, dtype=float) / rest
    return float(ratio) if ratio.ndim == 0 else ratio


def myocardial_k1_error(pred_maps: KineticMaps, true_k1: np.ndarray, roi: np.ndarray) -> float:
    """Percentage error of the ROI-mean K1 against the ROI-mean truth."""
    roi = np.asarray(roi, bool)
    truth = float(true_k1[roi].mean())
    return abs(float(np.nanmean(pred_maps.K1[roi])) - truth) / truth * 100.0
