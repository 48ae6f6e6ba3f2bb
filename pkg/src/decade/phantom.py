"""Synthetic dynamic cardiac PET phantoms with known one-tissue kinetics.

Activity is in kBq/mL, time in seconds, K1 in ml/min/g and k2 in 1/min
(tissue density taken as 1 g/mL).  Frames of a counts study carry decayed
counts; activity studies are decay corrected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage, signal

RB82_HALF_LIFE_S = 76.4
RB82_DECAY_PER_S = math.log(2.0) / RB82_HALF_LIFE_S

UNITS = ("counts", "kBq_per_mL")

# tissue labels
AIR, BACKGROUND, MYOCARDIUM, LV_CAVITY, RV_CAVITY, DEFECT = range(6)
LABEL_NAMES = {
    AIR: "air",
    BACKGROUND: "background",
    MYOCARDIUM: "myocardium",
    LV_CAVITY: "lv_cavity",
    RV_CAVITY: "rv_cavity",
    DEFECT: "defect",
}


@dataclass(frozen=True)
class FrameSchedule:
    starts_s: tuple[float, ...]
    durations_s: tuple[float, ...]

    def __post_init__(self):
        starts = tuple(float(s) for s in self.starts_s)
        durs = tuple(float(d) for d in self.durations_s)
        object.__setattr__(self, "starts_s", starts)
        object.__setattr__(self, "durations_s", durs)
        if len(starts) != len(durs) or not starts:
            raise ValueError("starts and durations must be non-empty and of equal length")
        if any(d <= 0 for d in durs):
            raise ValueError("frame durations must be positive")
        for i in range(len(starts) - 1):
            if not math.isclose(starts[i + 1], starts[i] + durs[i], abs_tol=1e-9):
                raise ValueError(f"frames {i} and {i + 1} are not contiguous")

    @classmethod
    def from_durations(cls, durations, start: float = 0.0) -> "FrameSchedule":
        durations = [float(d) for d in durations]
        starts = start + np.concatenate([[0.0], np.cumsum(durations)[:-1]])
        return cls(tuple(starts.tolist()), tuple(durations))

    @classmethod
    def protocol(cls) -> "FrameSchedule":
        """The 30-frame Rb-82 rest/stress protocol, 420 s in total."""
        return cls.from_durations([5] * 14 + [10] * 7 + [20] * 4 + [30] * 4 + [80])

    def __len__(self) -> int:
        return len(self.starts_s)

    @property
    def starts(self) -> np.ndarray:
        return np.asarray(self.starts_s)

    @property
    def durations(self) -> np.ndarray:
        return np.asarray(self.durations_s)

    @property
    def ends(self) -> np.ndarray:
        return self.starts + self.durations

    @property
    def midpoints(self) -> np.ndarray:
        return self.starts + 0.5 * self.durations

    @property
    def end_s(self) -> float:
        return float(self.ends[-1])

    def subset(self, index) -> "FrameSchedule":
        idx = np.arange(len(self))[index]
        return FrameSchedule(tuple(self.starts[idx]), tuple(self.durations[idx]))


@dataclass(frozen=True)
class AIFParams:
    """Gamma-variate bolus: A * ((t - t0)/tau)**alpha * exp(-(t - t0)/tau)."""

    amplitude: float = 100.0
    t0_s: float = 10.0
    alpha: float = 3.0
    tau_s: float = 6.0

    def __post_init__(self):
        vals = (self.amplitude, self.t0_s, self.alpha, self.tau_s)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("AIF parameters must be finite")
        if self.amplitude <= 0 or self.alpha <= 0 or self.tau_s <= 0:
            raise ValueError("AIF amplitude, alpha and tau must be positive")

    @property
    def peak_time_s(self) -> float:
        return self.t0_s + self.alpha * self.tau_s


@dataclass(frozen=True)
class Kinetics:
    K1: float  # ml/min/g
    k2: float  # 1/min
    Vb: float

    def __post_init__(self):
        _check_kinetics(self.K1, self.k2, self.Vb)


def _check_kinetics(K1, k2, Vb):
    K1, k2, Vb = (np.asarray(v, dtype=float) for v in (K1, k2, Vb))
    if not (np.all(np.isfinite(K1)) and np.all(np.isfinite(k2)) and np.all(np.isfinite(Vb))):
        raise ValueError("kinetic parameters must be finite")
    if np.any(K1 < 0):
        raise ValueError("K1 must be >= 0")
    if np.any(k2 < 0):
        raise ValueError("k2 must be >= 0")
    if np.any((Vb < 0) | (Vb > 1)):
        raise ValueError("Vb must lie in [0, 1]")


def _default_tissues() -> dict[int, Kinetics]:
    return {
        BACKGROUND: Kinetics(0.10, 0.30, 0.05),
        MYOCARDIUM: Kinetics(0.60, 0.15, 0.30),
        LV_CAVITY: Kinetics(0.0, 0.0, 1.0),
        RV_CAVITY: Kinetics(0.0, 0.0, 1.0),
        DEFECT: Kinetics(0.25, 0.15, 0.30),
    }


@dataclass(frozen=True)
class Geometry:
    """Heart geometry in mm, relative to the grid centre (z, y, x order)."""

    center_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    lv_semi_axes_mm: tuple[float, float] = (26.0, 14.0)  # long axis, short axis (cavity)
    wall_mm: float = 9.0
    tilt_deg: float = 0.0  # rotation of the long axis in the z-x plane
    rv_offset_mm: float = 24.0  # along -x from LV centre
    rv_radius_mm: float = 9.0
    body_radius_mm: float = 44.0
    base_cut_mm: float = 16.0  # myocardium is removed beyond this distance towards the base
    defect_start_deg: float | None = None
    defect_extent_deg: float = 60.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (24, 24, 24)
    voxel_mm: float = 4.0
    geometry: Geometry = field(default_factory=Geometry)
    tissues: dict = field(default_factory=_default_tissues)
    aif: AIFParams = field(default_factory=AIFParams)
    sensitivity: float = 0.5  # expected counts per (kBq/mL * s) per voxel
    decay_per_s: float = RB82_DECAY_PER_S
    seed: int = 0
    phantom_id: str = "phantom-0"

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 8 for d in self.dims):
            raise ValueError("dims must be three axes of at least 8 voxels")
        if self.sensitivity <= 0:
            raise ValueError("sensitivity must be positive")
        if self.voxel_mm <= 0 or self.decay_per_s < 0:
            raise ValueError("voxel size must be positive and decay non-negative")
        for kin in self.tissues.values():
            _check_kinetics(kin.K1, kin.k2, kin.Vb)


@dataclass
class DynamicStudy:
    frames: np.ndarray  # [F, Z, Y, X]
    schedule: FrameSchedule
    units: str = "kBq_per_mL"
    count_fraction: float = 1.0
    voxel_mm: float = 4.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.units not in UNITS:
            raise ValueError(f"units must be one of {UNITS}")
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[0] != len(self.schedule):
            raise ValueError(
                f"frames shape {self.frames.shape} does not match {len(self.schedule)} frames"
            )
        if self.units == "counts" and np.any(self.frames < 0):
            raise ValueError("counts must be non-negative")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.frames.shape[1:])

    def replace(self, **changes) -> "DynamicStudy":
        changes.setdefault("metadata", dict(self.metadata))
        return replace(self, **changes)


@dataclass
class PhantomTruth:
    labels: np.ndarray  # uint8 [Z, Y, X]
    K1: np.ndarray
    k2: np.ndarray
    Vb: np.ndarray
    clean: DynamicStudy  # noiseless, decay-corrected activity
    idif: np.ndarray  # AIF frame averages on clean.schedule
    spec: PhantomSpec
    t_fine: np.ndarray
    cb_fine: np.ndarray

    def mask(self, *labels: int) -> np.ndarray:
        return np.isin(self.labels, labels)

    @property
    def myocardium_mask(self) -> np.ndarray:
        return self.mask(MYOCARDIUM, DEFECT)

    @property
    def lv_mask(self) -> np.ndarray:
        return self.mask(LV_CAVITY)


def arterial_input(t, aif: AIFParams) -> np.ndarray:
    """Gamma-variate arterial activity (kBq/mL) at times ``t`` (s)."""
    t = np.asarray(t, dtype=float)
    s = (t - aif.t0_s) / aif.tau_s
    out = np.zeros_like(t)
    pos = s > 0
    out[pos] = aif.amplitude * s[pos] ** aif.alpha * np.exp(-s[pos])
    return out


def fine_grid(t_end: float, dt: float = 0.1) -> np.ndarray:
    n = int(round(t_end / dt))
    if not math.isclose(n * dt, t_end, rel_tol=0, abs_tol=1e-9):
        raise ValueError("t_end must be a multiple of dt")
    return np.arange(n + 1) * dt


def exp_convolve(cb: np.ndarray, rate_per_s: float, dt: float) -> np.ndarray:
    """Trapezoidal rule for int_0^t cb(s) exp(-rate (t - s)) ds on a uniform grid.

    The recursion I_n = e I_{n-1} + dt/2 (cb_n + e cb_{n-1}) reproduces the
    composite trapezoid sum exactly.
    """
    e = math.exp(-rate_per_s * dt)
    # I_n - e I_{n-1} = dt/2 cb_n + dt/2 e cb_{n-1}
    x = np.asarray(cb, dtype=float)
    out = signal.lfilter([0.5 * dt, 0.5 * dt * e], [1.0, -e], x)
    # trapezoid integral over [0, t_0] is zero
    return out - out[0] * e ** np.arange(len(x))


def tissue_tac(K1, k2, Vb, aif, t_grid, rate_unit_s: float = 60.0) -> np.ndarray:
    """One-tissue compartment curve on a uniform fine grid.

    ``aif`` is either :class:`AIFParams` or the input curve sampled on
    ``t_grid``.  Rates K1 and k2 are per ``rate_unit_s`` seconds (minutes by
    default).
    """
    _check_kinetics(K1, k2, Vb)
    t_grid = np.asarray(t_grid, dtype=float)
    steps = np.diff(t_grid)
    dt = float(steps[0]) if len(steps) else 0.1
    if len(steps) and (not np.allclose(steps, dt, rtol=1e-9, atol=1e-12) or dt > 0.1 + 1e-12):
        raise ValueError("t_grid must be uniform with step <= 0.1 s")
    cb = arterial_input(t_grid, aif) if isinstance(aif, AIFParams) else np.asarray(aif, float)
    if cb.shape != t_grid.shape:
        raise ValueError("input curve must be sampled on t_grid")
    conv = exp_convolve(cb, float(k2) / rate_unit_s, dt) if K1 else np.zeros_like(cb)
    return float(K1) / rate_unit_s * conv + float(Vb) * cb


def frame_average(curve: np.ndarray, t_grid: np.ndarray, schedule: FrameSchedule) -> np.ndarray:
    """Duration-averaged value of ``curve`` over each frame (trapezoid rule).

    ``curve`` may carry extra leading axes; time is the last axis.
    """
    if schedule.end_s > t_grid[-1] + 1e-9 or schedule.starts_s[0] < t_grid[0] - 1e-9:
        raise ValueError("schedule extends past the simulated time")
    dt = t_grid[1] - t_grid[0]
    cum = np.concatenate(
        [np.zeros(curve.shape[:-1] + (1,)), np.cumsum(0.5 * dt * (curve[..., 1:] + curve[..., :-1]), axis=-1)],
        axis=-1,
    )
    i0 = np.rint((schedule.starts - t_grid[0]) / dt).astype(int)
    i1 = np.rint((schedule.ends - t_grid[0]) / dt).astype(int)
    for i, edge in zip((i0, i1), (schedule.starts, schedule.ends)):
        if not np.allclose(t_grid[i], edge, atol=1e-6):
            raise ValueError("frame edges must lie on the fine grid")
    return (cum[..., i1] - cum[..., i0]) / schedule.durations


def _rotation(tilt_deg: float) -> np.ndarray:
    a = math.radians(tilt_deg)
    # rotate in the (z, x) plane
    return np.array([[math.cos(a), 0.0, -math.sin(a)], [0.0, 1.0, 0.0], [math.sin(a), 0.0, math.cos(a)]])


def make_labels(spec: PhantomSpec) -> np.ndarray:
    """Tissue label volume for the ellipsoidal heart geometry."""
    g = spec.geometry
    Z, Y, X = spec.dims
    coords = np.stack(
        np.meshgrid(
            (np.arange(Z) - (Z - 1) / 2) * spec.voxel_mm,
            (np.arange(Y) - (Y - 1) / 2) * spec.voxel_mm,
            (np.arange(X) - (X - 1) / 2) * spec.voxel_mm,
            indexing="ij",
        ),
        axis=-1,
    )
    labels = np.full(spec.dims, AIR, dtype=np.uint8)
    r_body = np.hypot(coords[..., 1], coords[..., 2])
    labels[r_body <= g.body_radius_mm] = BACKGROUND

    local = (coords - np.asarray(g.center_mm)) @ _rotation(g.tilt_deg)
    zl, yl, xl = local[..., 0], local[..., 1], local[..., 2]
    a, b = g.lv_semi_axes_mm
    inner = (zl / a) ** 2 + (yl / b) ** 2 + (xl / b) ** 2 <= 1.0
    outer = (zl / (a + g.wall_mm)) ** 2 + ((yl ** 2 + xl ** 2) / (b + g.wall_mm) ** 2) <= 1.0
    base = zl <= g.base_cut_mm

    rv = ((yl ** 2 + (xl + g.rv_offset_mm) ** 2) <= g.rv_radius_mm ** 2) & (np.abs(zl) <= a)
    labels[rv & ~outer] = RV_CAVITY
    labels[outer & ~inner & base] = MYOCARDIUM
    labels[inner] = LV_CAVITY
    if g.defect_start_deg is not None:
        ang = np.degrees(np.arctan2(yl, xl)) % 360.0
        rel = (ang - g.defect_start_deg) % 360.0
        labels[(labels == MYOCARDIUM) & (rel <= g.defect_extent_deg)] = DEFECT
    return labels


def make_phantom(
    spec: PhantomSpec,
    schedule: FrameSchedule | None = None,
    dt: float = 0.1,
    blur_fwhm_mm: float = 0.0,
) -> PhantomTruth:
    """Noiseless phantom with voxelwise kinetic truth and decay-corrected frames."""
    schedule = schedule or FrameSchedule.protocol()
    labels = make_labels(spec)
    t = fine_grid(schedule.end_s, dt)
    cb = arterial_input(t, spec.aif)

    K1 = np.zeros(spec.dims)
    k2 = np.zeros(spec.dims)
    Vb = np.zeros(spec.dims)
    frames = np.zeros((len(schedule),) + tuple(spec.dims))
    for lab, kin in spec.tissues.items():
        m = labels == lab
        if not m.any():
            continue
        K1[m], k2[m], Vb[m] = kin.K1, kin.k2, kin.Vb
        tac = frame_average(tissue_tac(kin.K1, kin.k2, kin.Vb, cb, t), t, schedule)
        frames[:, m] = tac[:, None]
    if blur_fwhm_mm > 0:
        sigma = blur_fwhm_mm / (2 * math.sqrt(2 * math.log(2))) / spec.voxel_mm
        frames = np.stack([ndimage.gaussian_filter(f, sigma, mode="nearest") for f in frames])
    clean = DynamicStudy(
        frames=frames,
        schedule=schedule,
        units="kBq_per_mL",
        voxel_mm=spec.voxel_mm,
        metadata=_study_meta(spec),
    )
    return PhantomTruth(
        labels=labels,
        K1=K1,
        k2=k2,
        Vb=Vb,
        clean=clean,
        idif=frame_average(cb, t, schedule),
        spec=spec,
        t_fine=t,
        cb_fine=cb,
    )


def _study_meta(spec: PhantomSpec) -> dict:
    return {
        "seed": int(spec.seed),
        "phantom_id": spec.phantom_id,
        "sensitivity": float(spec.sensitivity),
        "decay_per_s": float(spec.decay_per_s),
    }


def frame_rng(seed: int, frame: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one (study, frame, purpose) triple."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream), int(frame)])))


def decay_factors(schedule: FrameSchedule, decay_per_s: float) -> np.ndarray:
    return np.exp(-decay_per_s * schedule.midpoints)


def expected_counts(
    activity: np.ndarray, schedule: FrameSchedule, decay_per_s: float, sensitivity: float
) -> np.ndarray:
    scale = schedule.durations * sensitivity * decay_factors(schedule, decay_per_s)
    return activity * scale.reshape(-1, *([1] * (activity.ndim - 1)))


def render_frames(
    truth: PhantomTruth,
    schedule: FrameSchedule | None = None,
    decay_per_s: float | None = None,
    sensitivity: float | None = None,
    seed: int | None = None,
) -> tuple[DynamicStudy, DynamicStudy]:
    """Clean activity study and its Poisson-noisy counts realisation."""
    spec = truth.spec
    decay_per_s = spec.decay_per_s if decay_per_s is None else decay_per_s
    sensitivity = spec.sensitivity if sensitivity is None else sensitivity
    seed = spec.seed if seed is None else seed
    if sensitivity <= 0:
        raise ValueError("sensitivity must be positive")
    if schedule is None or schedule == truth.clean.schedule:
        schedule = truth.clean.schedule
        clean_frames = truth.clean.frames
    else:
        if schedule.end_s > truth.t_fine[-1] + 1e-9:
            raise ValueError("schedule extends past the simulated time")
        clean_frames = _rerender(truth, schedule)

    lam = expected_counts(clean_frames, schedule, decay_per_s, sensitivity)
    noisy = np.empty_like(lam)
    for f in range(len(schedule)):
        noisy[f] = frame_rng(seed, f, stream=1).poisson(lam[f])
    meta = _study_meta(spec)
    meta.update(seed=int(seed), sensitivity=float(sensitivity), decay_per_s=float(decay_per_s))
    clean = DynamicStudy(clean_frames, schedule, "kBq_per_mL", 1.0, spec.voxel_mm, dict(meta))
    counts = DynamicStudy(noisy, schedule, "counts", 1.0, spec.voxel_mm, dict(meta))
    return clean, counts


def _rerender(truth: PhantomTruth, schedule: FrameSchedule) -> np.ndarray:
    t, cb = truth.t_fine, truth.cb_fine
    frames = np.zeros((len(schedule),) + truth.labels.shape)
    for lab, kin in truth.spec.tissues.items():
        m = truth.labels == lab
        if m.any():
            tac = frame_average(tissue_tac(kin.K1, kin.k2, kin.Vb, cb, t), t, schedule)
            frames[:, m] = tac[:, None]
    return frames


def downsample_counts(noisy: DynamicStudy, fraction: float, seed: int) -> DynamicStudy:
    """Binomial thinning: keep each recorded count with probability ``fraction``."""
    if noisy.units != "counts":
        raise ValueError("thinning requires a counts study")
    if not (0.0 < fraction <= 1.0):
        raise ValueError("fraction must lie in (0, 1]")
    frames = noisy.frames
    if np.any(frames != np.round(frames)):
        raise ValueError("counts must be integer valued")
    if fraction == 1.0:
        out = frames.copy()
    else:
        n = frames.astype(np.int64)
        out = np.stack(
            [frame_rng(seed, f, stream=2).binomial(n[f], fraction) for f in range(len(n))]
        ).astype(frames.dtype)
    return noisy.replace(frames=out, count_fraction=noisy.count_fraction * fraction)


def counts_to_activity(study: DynamicStudy) -> DynamicStudy:
    """Decay-corrected activity estimate from a counts study."""
    if study.units != "counts":
        raise ValueError("expected a counts study")
    sens = study.metadata["sensitivity"] * study.count_fraction
    scale = expected_counts(
        np.ones((len(study.schedule), 1, 1, 1)), study.schedule, study.metadata["decay_per_s"], sens
    )
    return study.replace(frames=study.frames / scale, units="kBq_per_mL")


def mean_static(study: DynamicStudy, t_start: float = 120.0, t_end: float = 420.0) -> np.ndarray:
    """Duration-weighted mean of the frames whose midpoints fall in [t_start, t_end]."""
    sched = study.schedule
    if t_start < sched.starts[0] - 1e-9 or t_end > sched.end_s + 1e-9:
        raise ValueError("window is not covered by the schedule")
    mids = sched.midpoints
    sel = (mids >= t_start) & (mids <= t_end)
    if not sel.any():
        raise ValueError("no frames in the static window")
    w = sched.durations[sel]
    return np.tensordot(w / w.sum(), study.frames[sel], axes=1)


def static_window_frames(schedule: FrameSchedule, t_start: float = 120.0, t_end: float = 420.0) -> np.ndarray:
    mids = schedule.midpoints
    return np.flatnonzero((mids >= t_start) & (mids <= t_end))


def random_spec(rng: np.random.Generator, base: PhantomSpec | None = None, index: int = 0) -> PhantomSpec:
    """Draw a phantom with perturbed geometry, kinetics and input function."""
    base = base or PhantomSpec()
    g = base.geometry
    scale = base.voxel_mm * min(base.dims) / 96.0
    geom = replace(
        g,
        center_mm=tuple(float(v) for v in rng.uniform(-4, 4, size=3) * scale),
        lv_semi_axes_mm=(
            float(g.lv_semi_axes_mm[0] * rng.uniform(0.85, 1.15) * scale),
            float(g.lv_semi_axes_mm[1] * rng.uniform(0.8, 1.2) * scale),
        ),
        wall_mm=float(g.wall_mm * rng.uniform(0.85, 1.2) * scale),
        tilt_deg=float(rng.uniform(-25, 25)),
        rv_offset_mm=float(g.rv_offset_mm * rng.uniform(0.9, 1.1) * scale),
        rv_radius_mm=float(g.rv_radius_mm * rng.uniform(0.8, 1.2) * scale),
        body_radius_mm=float(g.body_radius_mm * scale),
        base_cut_mm=float(g.base_cut_mm * scale),
        defect_start_deg=float(rng.uniform(0, 360)) if rng.random() < 0.4 else None,
        defect_extent_deg=float(rng.uniform(40, 100)),
    )
    stress = rng.random() < 0.5
    mbf_scale = rng.uniform(1.3, 1.7) if stress else 1.0
    myo_k1 = float(rng.uniform(0.45, 0.75) * mbf_scale ** 0.5)
    tissues = {
        BACKGROUND: Kinetics(float(rng.uniform(0.05, 0.15)), float(rng.uniform(0.2, 0.5)), float(rng.uniform(0.02, 0.08))),
        MYOCARDIUM: Kinetics(myo_k1, float(rng.uniform(0.08, 0.25)), float(rng.uniform(0.15, 0.4))),
        LV_CAVITY: Kinetics(0.0, 0.0, 1.0),
        RV_CAVITY: Kinetics(0.0, 0.0, 1.0),
    }
    tissues[DEFECT] = Kinetics(myo_k1 * float(rng.uniform(0.3, 0.6)), tissues[MYOCARDIUM].k2, tissues[MYOCARDIUM].Vb)
    aif = AIFParams(
        amplitude=float(rng.uniform(70, 140)),
        t0_s=float(rng.uniform(5, 15)),
        alpha=float(rng.uniform(2.0, 4.0)),
        tau_s=float(rng.uniform(4.0, 8.0)),
    )
    seed = int(rng.integers(0, 2**31 - 1))
    return replace(base, geometry=geom, tissues=tissues, aif=aif, seed=seed, phantom_id=f"phantom-{index}")
