"""Ancestral DDPM sampling with measurement guidance and the base-to-control switch."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .denoiser import BaseModel, ControlBranch, predict_eps, predict_eps_conditional
from .diffusion import DiffusionSchedule, build_condition, intensity_scale
from .phantom import DynamicStudy, counts_to_activity

log = logging.getLogger(__name__)

GRAD_MODES = ("exact_vjp", "jacobian_identity_approx")
ALPHA_BAR_FLOOR = 1e-12


class SamplingError(RuntimeError):
    def __init__(self, message: str, trace: "SamplerTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 500.0
    t_c: int = 950
    T: int = 1000
    decay_rate: float = 0.05
    grad_mode: str = "exact_vjp"
    seed: int = 0
    residual_floor: float = 1e-12
    # below this decay factor the guidance term is skipped (0 keeps every step)
    min_decay: float = 0.0
    divergence_factor: float | None = 10.0
    divergence_window: int = 100

    def __post_init__(self):
        if not 0 <= self.t_c <= self.T:
            raise ValueError("t_c must lie in [0, T]")
        if self.w < 0:
            raise ValueError("w must be >= 0")
        if self.decay_rate <= 0:
            raise ValueError("decay rate must be positive")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")


@dataclass
class SamplerTrace:
    """Per-step diagnostics for a batch of B frames (arrays are [steps, B])."""

    t: list[int] = field(default_factory=list)
    model: list[str] = field(default_factory=list)
    residual2: list[np.ndarray] = field(default_factory=list)
    rho: list[np.ndarray] = field(default_factory=list)
    grad_norm: list[np.ndarray] = field(default_factory=list)

    def record(self, t, model, residual2, rho, grad_norm):
        self.t.append(int(t))
        self.model.append(model)
        self.residual2.append(np.asarray(residual2, dtype=np.float64))
        self.rho.append(np.asarray(rho, dtype=np.float64))
        self.grad_norm.append(np.asarray(grad_norm, dtype=np.float64))

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "t": np.asarray(self.t),
            "residual2": np.stack(self.residual2),
            "rho": np.stack(self.rho),
            "grad_norm": np.stack(self.grad_norm),
        }

    def write_csv(self, path: Path | str, index: int = 0) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "residual2", "rho", "grad_norm", "model"])
            for k, t in enumerate(self.t):
                wr.writerow(
                    [t, repr(float(self.residual2[k][index])), repr(float(self.rho[k][index])),
                     repr(float(self.grad_norm[k][index])), self.model[k]]
                )
        return path


def read_trace_csv(path: Path | str) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {k: np.array([float(r[k]) for r in rows]) for k in ("t", "residual2", "rho", "grad_norm")}
    out["model"] = np.array([r["model"] for r in rows])
    return out


def estimate_x0(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """Invert the forward process: (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)."""
    ab = sched.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(max(ab, ALPHA_BAR_FLOOR))


def ancestral_step(
    x_t: torch.Tensor, t: int, x0_hat: torch.Tensor, z: torch.Tensor | None, sched: DiffusionSchedule
) -> torch.Tensor:
    """Posterior mean given x0_hat plus sigma_t z; no noise at t = 1."""
    c0, ct = sched.posterior_coefficients(t)
    x = c0 * x0_hat + ct * x_t
    if z is not None and t > 1:
        x = x + sched.sigma(t) * z
    return x


def step_weight(t: int, w: float, residual2, T: int = 1000, rate: float = 0.05, floor: float = 1e-12):
    """exp(-rate (T - t)) * w / max(residual2, floor)."""
    r2 = np.maximum(np.asarray(residual2, dtype=np.float64), floor)
    return math.exp(-rate * (T - t)) * w / r2


def _residual2(y: torch.Tensor, x0_hat: torch.Tensor) -> torch.Tensor:
    return ((y - x0_hat) ** 2).flatten(1).sum(dim=1)


def guidance_gradient(y, x_t, t, eps_fn, sched: DiffusionSchedule, mode: str = "exact_vjp"):
    """Gradient of ||y - x0_hat(x_t)||^2 with respect to x_t, per batch element.

    Returns ``(grad, x0_hat, residual2)`` with ``x0_hat`` detached.
    ``eps_fn(x, t)`` gives the noise estimate.
    """
    if y.shape != x_t.shape:
        raise ValueError(f"measurement shape {tuple(y.shape)} != state shape {tuple(x_t.shape)}")
    if mode == "exact_vjp":
        with torch.enable_grad():
            x = x_t.detach().requires_grad_(True)
            x0_hat = estimate_x0(x, t, eps_fn(x, t), sched)
            r2 = _residual2(y, x0_hat)
            (grad,) = torch.autograd.grad(r2.sum(), x)
        return grad, x0_hat.detach(), r2.detach()
    if mode == "jacobian_identity_approx":
        with torch.no_grad():
            x0_hat = estimate_x0(x_t, t, eps_fn(x_t, t), sched)
            r2 = _residual2(y, x0_hat)
            d = 1.0 / math.sqrt(max(sched.alpha_bar(t), ALPHA_BAR_FLOOR))
            grad = -2.0 * d * (y - x0_hat)
        return grad, x0_hat, r2
    raise ValueError(f"unknown gradient mode {mode!r}")


def _noise(shape, generator, dtype):
    return torch.randn(shape, generator=generator, dtype=dtype)


def ancestral_sample(base: BaseModel, shape, sched: DiffusionSchedule, seed: int = 0, dtype=torch.float32):
    """Plain unconditional DDPM sampling sharing the DECADE random stream."""
    g = torch.Generator().manual_seed(int(seed))
    x = _noise(shape, g, dtype)
    with torch.no_grad():
        for t in range(sched.T, 0, -1):
            x0_hat = estimate_x0(x, t, predict_eps(base, x, t), sched)
            z = _noise(shape, g, dtype) if t > 1 else None
            x = ancestral_step(x, t, x0_hat, z, sched)
    return x


def decade_sample(
    y: torch.Tensor,
    cond: torch.Tensor | None,
    base: BaseModel,
    ctrl: ControlBranch | None,
    gcfg: GuidanceConfig,
    sched: DiffusionSchedule,
) -> tuple[torch.Tensor, SamplerTrace]:
    """Guided reverse diffusion for a batch of noisy frames ``y`` ([B, 1, ...]).

    Steps t > t_c use the base model, t <= t_c the control branch with
    condition ``cond`` ([B, 3, ...]).
    """
    if gcfg.T != sched.T:
        raise ValueError(f"guidance T={gcfg.T} does not match schedule T={sched.T}")
    if gcfg.t_c > 0 and (ctrl is None or cond is None):
        raise ValueError("a control branch and condition stack are required when t_c > 0")
    g = torch.Generator().manual_seed(int(gcfg.seed))
    shape, dtype = tuple(y.shape), y.dtype
    y = y.detach()
    hint = None
    if gcfg.t_c > 0:
        with torch.no_grad():
            hint = ctrl.embed_condition(cond.to(dtype))

    def eps_base(x, t):
        return predict_eps(base, x, t)

    def eps_ctrl(x, t):
        return predict_eps_conditional(base, ctrl, x, t, hint=hint)

    trace = SamplerTrace()
    x = _noise(shape, g, dtype)
    nan = np.full(shape[0], np.nan)
    for t in range(gcfg.T, 0, -1):
        use_ctrl = t <= gcfg.t_c
        eps_fn = eps_ctrl if use_ctrl else eps_base
        decay = math.exp(-gcfg.decay_rate * (gcfg.T - t))
        guided = gcfg.w > 0 and decay >= gcfg.min_decay
        if guided:
            grad, x0_hat, r2 = guidance_gradient(y, x, t, eps_fn, sched, gcfg.grad_mode)
        else:
            with torch.no_grad():
                x0_hat = estimate_x0(x, t, eps_fn(x, t), sched)
                r2 = _residual2(y, x0_hat)
        r2 = r2.double().numpy()
        z = _noise(shape, g, dtype) if t > 1 else None
        with torch.no_grad():
            x_next = ancestral_step(x, t, x0_hat, z, sched)
        if guided:
            rho = step_weight(t, gcfg.w, r2, gcfg.T, gcfg.decay_rate, gcfg.residual_floor)
            gnorm = grad.double().flatten(1).norm(dim=1).numpy()
            if not np.all(np.isfinite(gnorm)):
                trace.record(t, "ctrl" if use_ctrl else "base", r2, rho, gnorm)
                raise SamplingError(f"non-finite guidance gradient at t={t}", trace)
            step = torch.as_tensor(rho, dtype=dtype).view(-1, *([1] * (x.ndim - 1)))
            x_next = x_next - step * grad
        else:
            rho = np.zeros(shape[0]) if gcfg.w == 0 else step_weight(
                t, gcfg.w, r2, gcfg.T, gcfg.decay_rate, gcfg.residual_floor
            )
            gnorm = nan
        trace.record(t, "ctrl" if use_ctrl else "base", r2, rho, gnorm)
        _check_divergence(trace, gcfg)
        x = x_next.detach()
    return x, trace


def _check_divergence(trace: SamplerTrace, gcfg: GuidanceConfig) -> None:
    if not np.all(np.isfinite(trace.residual2[-1])):
        raise SamplingError(f"non-finite residual at t={trace.t[-1]}", trace)
    k = gcfg.divergence_window
    if gcfg.divergence_factor is None or len(trace.residual2) <= k:
        return
    now, then = trace.residual2[-1], trace.residual2[-1 - k]
    if np.any(now > gcfg.divergence_factor * np.maximum(then, gcfg.residual_floor)):
        raise SamplingError(
            f"residual grew more than {gcfg.divergence_factor}x over {k} steps at t={trace.t[-1]}",
            trace,
        )


@dataclass
class DenoiseResult:
    study: DynamicStudy
    traces: list[SamplerTrace]
    frame_index: list[np.ndarray]
    failures: dict[int, str]
    scales: np.ndarray
    slice_mode: bool = False


def batch_seed(seed: int, start: int) -> int:
    """Seed for the frame batch beginning at ``start``, so batches draw independent noise."""
    return int(np.random.SeedSequence([int(seed), int(start)]).generate_state(1)[0])


def prepare_frames(study: DynamicStudy, cond_sigma: float = 1.0):
    """Activity frames, per-frame scales and normalised condition stacks."""
    act = counts_to_activity(study) if study.units == "counts" else study
    frames = act.frames
    scales = np.array([intensity_scale(f) for f in frames])
    conds = np.stack([build_condition(frames, f, cond_sigma).data / scales[f] for f in range(len(frames))])
    y = frames / scales.reshape(-1, 1, 1, 1)
    return act, y, conds, scales


def denoise_study(
    study: DynamicStudy,
    base: BaseModel,
    ctrl: ControlBranch | None,
    gcfg: GuidanceConfig,
    sched: DiffusionSchedule,
    cond_sigma: float = 1.0,
    batch_frames: int | None = None,
    dtype=torch.float32,
) -> DenoiseResult:
    """Denoise every frame; returns a decay-corrected activity study.

    With a 2D network each frame is sampled as a batch of its axial slices
    (conditions are smoothed in 3D first), so guidance acts per slice.
    """
    act, y, conds, scales = prepare_frames(study, cond_sigma)
    n = len(y)
    slice_mode = base.config.spatial_dims == 2
    if slice_mode:
        batch_frames = batch_frames or 1
    batch_frames = batch_frames or n
    out = np.full_like(y, np.nan)
    traces, index, failures = [], [], {}
    base.eval()
    if ctrl is not None:
        ctrl.eval()
    for start in range(0, n, batch_frames):
        sel = np.arange(start, min(start + batch_frames, n))
        yb, cb = y[sel, None], conds[sel]
        if slice_mode:
            # [k, 1, Z, Y, X] -> [k * Z, 1, Y, X]
            yb = yb.transpose(0, 2, 1, 3, 4).reshape(-1, 1, *y.shape[2:])
            cb = cb.transpose(0, 2, 1, 3, 4).reshape(-1, 3, *y.shape[2:])
        yb = torch.as_tensor(np.ascontiguousarray(yb), dtype=dtype)
        cb = torch.as_tensor(np.ascontiguousarray(cb), dtype=dtype)
        members = np.repeat(sel, y.shape[1]) if slice_mode else sel
        try:
            x0, trace = decade_sample(yb, cb, base, ctrl, replace(gcfg, seed=batch_seed(gcfg.seed, start)), sched)
        except SamplingError as exc:
            log.error("frames %s failed: %s", sel.tolist(), exc)
            for f in sel:
                failures[int(f)] = str(exc)
            if exc.trace is not None:
                traces.append(exc.trace)
                index.append(members)
            continue
        x0 = x0[:, 0].double().numpy()
        if slice_mode:
            x0 = x0.reshape(len(sel), *y.shape[1:])
        out[sel] = x0
        traces.append(trace)
        index.append(members)
    frames = out * scales.reshape(-1, 1, 1, 1)
    meta = dict(act.metadata)
    meta.update(denoised=True, failed_frames=sorted(failures), guidance=vars(gcfg))
    result = act.replace(frames=frames, units="kBq_per_mL", metadata=meta)
    return DenoiseResult(result, traces, index, failures, scales, slice_mode)


def frame_traces(result: DenoiseResult) -> dict[int, tuple[SamplerTrace, int]]:
    """Map frame index to (batch trace, batch position).

    In slice mode a frame owns several batch positions; the central slice
    represents it.
    """
    out = {}
    for trace, members in zip(result.traces, result.frame_index):
        for f in np.unique(members):
            pos = np.flatnonzero(members == f)
            out[int(f)] = (trace, int(pos[len(pos) // 2]))
    return out
