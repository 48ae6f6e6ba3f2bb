"""Synthetic training and evaluation sets built from random phantoms."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .diffusion import intensity_scale, smooth
from .phantom import (
    DynamicStudy,
    FrameSchedule,
    PhantomSpec,
    PhantomTruth,
    counts_to_activity,
    downsample_counts,
    expected_counts,
    frame_rng,
    make_phantom,
    mean_static,
    random_spec,
    render_frames,
    static_window_frames,
)
from .training import PhaseBData

PHASE_B_TARGETS = ("mean_static", "frame_at_static_counts")


@dataclass
class StudySet:
    truth: PhantomTruth | None
    clean: DynamicStudy
    full: DynamicStudy  # counts
    low: DynamicStudy  # thinned counts

    @property
    def static(self) -> np.ndarray:
        """Pseudo-clean 2-7 min mean static from the full-count data."""
        return mean_static(counts_to_activity(self.full))


def simulate(
    spec: PhantomSpec,
    schedule: FrameSchedule | None = None,
    count_fraction: float = 0.15,
    blur_fwhm_mm: float = 0.0,
) -> StudySet:
    truth = make_phantom(spec, schedule, blur_fwhm_mm=blur_fwhm_mm)
    clean, full = render_frames(truth)
    low = downsample_counts(full, count_fraction, seed=spec.seed + 1)
    return StudySet(truth, clean, full, low)


def phantom_specs(n: int, seed: int, base: PhantomSpec | None = None, offset: int = 0) -> list[PhantomSpec]:
    rng = np.random.default_rng(seed)
    return [random_spec(rng, base, index=offset + i) for i in range(n)]


def phase_a_volumes(sets: list[StudySet]) -> np.ndarray:
    """Mean statics, each scaled by its 99.5th percentile."""
    out = []
    for s in sets:
        v = s.static
        out.append(v / intensity_scale(v))
    return np.stack(out)


def frame_at_static_counts(s: StudySet, seed: int) -> np.ndarray:
    """Each frame re-drawn with the total counts of the mean static image.

    This gives a low-noise image with the frame's own contrast, at the noise
    level of the pseudo-clean static data.
    """
    full = s.full
    sched = full.schedule
    sens, lam = full.metadata["sensitivity"], full.metadata["decay_per_s"]
    expected = expected_counts(s.clean.frames, sched, lam, sens)
    window = static_window_frames(sched)
    static_total = expected[window].sum()
    out = np.zeros_like(s.clean.frames)
    for f in range(len(sched)):
        total = expected[f].sum()
        if total <= 0:
            continue
        k = static_total / total
        counts = frame_rng(seed, f, stream=3).poisson(expected[f] * k)
        out[f] = counts / (k * expected[f].sum() / s.clean.frames[f].sum())
    return out


def phase_b_data(sets: list[StudySet], target: str = "frame_at_static_counts", cond_sigma: float = 1.0) -> PhaseBData:
    """Condition sources are the thinned (deployment-level) noisy frames."""
    if target not in PHASE_B_TARGETS:
        raise ValueError(f"target must be one of {PHASE_B_TARGETS}")
    conds, targets, scales = [], [], []
    for s in sets:
        act = counts_to_activity(s.low).frames
        sc = np.array([intensity_scale(f) for f in act])
        conds.append(np.stack([smooth(f, cond_sigma) for f in act]).astype(np.float32))
        scales.append(sc)
        if target == "mean_static":
            # the study's static, brought to each frame's intensity convention
            st = s.static
            st = st / intensity_scale(st)
            targets.append((st[None] * sc.reshape(-1, *([1] * st.ndim))).astype(np.float32))
        else:
            targets.append(frame_at_static_counts(s, int(s.full.metadata["seed"]) + 17).astype(np.float32))
    return PhaseBData(np.stack(conds), np.stack(targets), np.stack(scales), cond_sigma)


def phase_a_slices(volumes: np.ndarray) -> np.ndarray:
    """[N, Z, Y, X] volumes as [N * Z, Y, X] slices, dropping empty slices."""
    sl = volumes.reshape(-1, *volumes.shape[2:])
    return sl[np.any(sl != 0, axis=(1, 2))]


def with_seed(spec: PhantomSpec, seed: int) -> PhantomSpec:
    return replace(spec, seed=seed)
