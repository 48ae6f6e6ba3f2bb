"""DDPM schedule, forward noising, posterior coefficients and training losses."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .denoiser import BaseModel, ControlBranch, predict_eps, predict_eps_conditional


class NonFiniteLoss(FloatingPointError):
    pass


class FrozenBaseViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step tables indexed by t - 1 for t = 1..T (float64)."""

    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 2:
            raise ValueError("schedule needs at least 2 steps")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alpha_bars_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    @property
    def posterior_variance(self) -> np.ndarray:
        return (1.0 - self.alpha_bars_prev) / (1.0 - self.alpha_bars) * self.betas

    def check_t(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.T:
            raise ValueError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_t(t) - 1])

    def posterior_coefficients(self, t: int) -> tuple[float, float]:
        """Weights of (x0, x_t) in the mean of q(x_{t-1} | x_t, x0)."""
        i = self.check_t(t) - 1
        ab, ab_prev, beta = self.alpha_bars[i], self.alpha_bars_prev[i], self.betas[i]
        c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        ct = math.sqrt(self.alphas[i]) * (1.0 - ab_prev) / (1.0 - ab)
        return float(c0), float(ct)

    def sigma(self, t: int) -> float:
        return float(math.sqrt(self.posterior_variance[self.check_t(t) - 1]))

    def params(self) -> dict:
        return {"T": self.T, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    """Linear beta ramp."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _per_sample(table: np.ndarray, t, like: torch.Tensor) -> torch.Tensor:
    """Gather table[t - 1] and broadcast over the non-batch axes of ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        vals = torch.as_tensor(table, dtype=torch.float64)[t.long().cpu() - 1]
        return vals.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(float(table[int(t) - 1]), dtype=like.dtype)


def _check_steps(t, sched: DiffusionSchedule, lo: int = 1) -> None:
    ts = t.flatten().tolist() if isinstance(t, torch.Tensor) else [t]
    for v in ts:
        sched.check_t(v, lo)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_steps(t, sched)
    ab = sched.alpha_bars
    return _per_sample(np.sqrt(ab), t, x0) * x0 + _per_sample(np.sqrt(1.0 - ab), t, x0) * eps


def q_posterior(x0: torch.Tensor, x_t: torch.Tensor, t, sched: DiffusionSchedule):
    """Mean and variance of q(x_{t-1} | x_t, x0); at t = 1 the variance is 0."""
    _check_steps(t, sched)
    ab, abp, beta = sched.alpha_bars, sched.alpha_bars_prev, sched.betas
    c0 = np.sqrt(abp) * beta / (1.0 - ab)
    ct = np.sqrt(sched.alphas) * (1.0 - abp) / (1.0 - ab)
    mean = _per_sample(c0, t, x0) * x0 + _per_sample(ct, t, x_t) * x_t
    return mean, _per_sample(sched.posterior_variance, t, x_t)


def sample_training_noise(x0: torch.Tensor, sched: DiffusionSchedule, generator: torch.Generator):
    t = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return t, eps


def loss_base(model, x0: torch.Tensor, sched: DiffusionSchedule, generator: torch.Generator) -> torch.Tensor:
    """Mean squared error between the drawn noise and ``model(x_t, t)``.

    ``model`` is a :class:`BaseModel` or any callable ``(x_t, t) -> eps_hat``.
    """
    t, eps = sample_training_noise(x0, sched, generator)
    x_t = q_sample(x0, t, eps, sched)
    pred = predict_eps(model, x_t, t) if isinstance(model, BaseModel) else model(x_t, t)
    loss = torch.mean((eps - pred) ** 2)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite base loss {loss.item()}")
    return loss


def loss_control(
    base: BaseModel,
    ctrl: ControlBranch,
    x0: torch.Tensor,
    cond: torch.Tensor,
    sched: DiffusionSchedule,
    generator: torch.Generator,
) -> torch.Tensor:
    """Same objective as :func:`loss_base` with the control branch attached."""
    if any(p.requires_grad for p in base.parameters()):
        raise FrozenBaseViolation("base model parameters must be frozen for control training")
    t, eps = sample_training_noise(x0, sched, generator)
    x_t = q_sample(x0, t, eps, sched)
    pred = predict_eps_conditional(base, ctrl, x_t, t, cond)
    loss = torch.mean((eps - pred) ** 2)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite control loss {loss.item()}")
    return loss


def assert_base_untouched(base: BaseModel) -> None:
    for name, p in base.named_parameters():
        if p.grad is not None and torch.any(p.grad != 0):
            raise FrozenBaseViolation(f"gradient reached frozen base parameter {name}")


@dataclass(frozen=True)
class ConditionStack:
    data: np.ndarray  # [3, *spatial]
    sigma: float
    frame: int

    def __post_init__(self):
        if self.data.shape[0] != 3:
            raise ValueError("condition stack must have 3 channels")
        if self.sigma < 0:
            raise ValueError("smoothing sigma must be >= 0")


def smooth(volume: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with edge replication; sigma 0 is the identity."""
    if sigma <= 0:
        return np.array(volume, dtype=np.float64)
    return ndimage.gaussian_filter(np.asarray(volume, dtype=np.float64), sigma, mode="nearest")


def build_condition(frames: np.ndarray, f: int, sigma: float = 1.0) -> ConditionStack:
    """Smoothed frames (f-1, f, f+1) with indices clamped to the study."""
    frames = getattr(frames, "frames", frames)
    n = frames.shape[0]
    if not 0 <= f < n:
        raise IndexError(f"frame {f} outside [0, {n})")
    idx = [min(max(i, 0), n - 1) for i in (f - 1, f, f + 1)]
    return ConditionStack(np.stack([smooth(frames[i], sigma) for i in idx]), float(sigma), int(f))


def intensity_scale(volume: np.ndarray, q: float = 99.5) -> float:
    """Percentile used to bring a volume to roughly [0, 1].

    Falls back to the maximum for sparse volumes and to 1 for empty ones.
    """
    v = np.asarray(volume, dtype=np.float64)
    s = float(np.percentile(v, q))
    if s <= 0:
        s = float(v.max())
    return s if s > 0 else 1.0


@dataclass(frozen=True)
class TrainingConfig:
    lr: float = 1e-4
    batch_size: int = 4
    steps: int = 20000
    ema_decay: float | None = None
    checkpoint_every: int = 1000
    seed: int = 0
    grad_clip: float | None = 1.0
    warmup_steps: int = 100

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
