"""Run configuration: strict nested schema, YAML loading and a stable hash."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .denoiser import NetworkConfig
from .diffusion import TrainingConfig, make_schedule
from .sampler import GuidanceConfig


class ConfigError(ValueError):
    """Configuration failed validation; the message names the offending path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhantomSection(_Section):
    dims: tuple[int, int, int] = (24, 24, 24)
    voxel_mm: float = Field(4.0, gt=0)
    sensitivity: float = Field(0.5, gt=0)
    count_fraction: float = Field(0.15, gt=0, le=1)
    blur_fwhm_mm: float = Field(0.0, ge=0)
    n_studies: int = Field(200, ge=1)
    n_heldout: int = Field(10, ge=0)
    static_window_s: tuple[float, float] = (120.0, 420.0)

    @field_validator("dims")
    @classmethod
    def _dims(cls, v):
        if any(d < 8 for d in v):
            raise ValueError("every axis needs at least 8 voxels")
        return v


class ScheduleSection(_Section):
    T: int = Field(1000, ge=2)
    beta_start: float = Field(1e-4, gt=0, lt=1)
    beta_end: float = Field(0.02, gt=0, lt=1)

    @model_validator(mode="after")
    def _order(self):
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class NetworkSection(_Section):
    base_channels: int = Field(8, ge=1)
    channel_mult: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = Field(64, ge=2)
    attention: tuple[bool, ...] = (False, False, False)
    mode: Literal["3d", "2d"] = "3d"
    groups: int = Field(2, ge=1)
    cond_hidden: int = Field(16, ge=1)

    @model_validator(mode="after")
    def _levels(self):
        if len(self.attention) != len(self.channel_mult):
            raise ValueError("attention needs one flag per level")
        return self


class TrainingSection(_Section):
    lr: float = Field(1e-4, gt=0)
    batch_size: int = Field(4, ge=1)
    steps: int = Field(20000, ge=0)
    ema_decay: float | None = Field(0.999, gt=0, lt=1)
    checkpoint_every: int = Field(1000, ge=1)
    grad_clip: float | None = 1.0
    warmup_steps: int = Field(100, ge=0)
    augment: bool = True


class ControlTrainingSection(TrainingSection):
    lr: float = Field(5e-5, gt=0)
    steps: int = Field(8000, ge=0)
    checkpoint_every: int = Field(500, ge=1)
    target: Literal["frame_at_static_counts", "mean_static"] = "frame_at_static_counts"
    cond_sigma: float = Field(1.0, gt=0)
    control_seed: int = 1


class GuidanceSection(_Section):
    w: float = Field(500.0, ge=0)
    t_c: int = Field(950, ge=0)
    decay_rate: float = Field(0.05, gt=0)
    grad_mode: Literal["exact_vjp", "jacobian_identity_approx"] = "exact_vjp"
    residual_floor: float = Field(1e-12, gt=0)
    min_decay: float = Field(0.0, ge=0)
    divergence_factor: float | None = 10.0
    divergence_window: int = Field(100, ge=1)
    batch_frames: int | None = None


class KineticsSection(_Section):
    k2_n: int = Field(64, ge=1)
    k2_min_per_min: float = Field(0.01, ge=0)
    k2_max_per_min: float = Field(3.0, gt=0)
    dt_s: float = Field(0.1, gt=0)
    interpolation: Literal["step", "linear"] = "step"
    renkin_crone_a: float = 0.77
    renkin_crone_b: float = 0.63


class MetricsSection(_Section):
    ssim_sigma: float = Field(1.5, gt=0)
    ssim_win: int = Field(11, ge=3)
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03


class IOSection(_Section):
    figures: bool = True
    montage_frames: tuple[int, ...] = (0, 5, 10, 15, 20, 29)


class RunConfig(_Section):
    seed: int = 0
    phantom: PhantomSection = PhantomSection()
    schedule: ScheduleSection = ScheduleSection()
    network: NetworkSection = NetworkSection()
    training_a: TrainingSection = TrainingSection()
    training_b: ControlTrainingSection = ControlTrainingSection()
    guidance: GuidanceSection = GuidanceSection()
    kinetics: KineticsSection = KineticsSection()
    metrics: MetricsSection = MetricsSection()
    io: IOSection = IOSection()

    @model_validator(mode="after")
    def _guidance_within_schedule(self):
        if self.guidance.t_c > self.schedule.T:
            raise ValueError(f"guidance.t_c={self.guidance.t_c} exceeds schedule.T={self.schedule.T}")
        return self

    # -- conversions to the library's runtime types --

    def diffusion_schedule(self):
        s = self.schedule
        return make_schedule(s.T, s.beta_start, s.beta_end)

    def network_config(self) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            base_channels=n.base_channels,
            channel_mult=tuple(n.channel_mult),
            time_embed_dim=n.time_embed_dim,
            attention=tuple(n.attention),
            spatial_dims=3 if n.mode == "3d" else 2,
            groups=n.groups,
            cond_hidden=n.cond_hidden,
        )

    def training_config(self, phase: Literal["a", "b"]) -> TrainingConfig:
        sec = self.training_a if phase == "a" else self.training_b
        return TrainingConfig(
            lr=sec.lr,
            batch_size=sec.batch_size,
            steps=sec.steps,
            ema_decay=sec.ema_decay,
            checkpoint_every=sec.checkpoint_every,
            seed=self.seed + (0 if phase == "a" else 1),
            grad_clip=sec.grad_clip,
            warmup_steps=sec.warmup_steps,
        )

    def guidance_config(self, seed: int | None = None) -> GuidanceConfig:
        g = self.guidance
        return GuidanceConfig(
            w=g.w,
            t_c=g.t_c,
            T=self.schedule.T,
            decay_rate=g.decay_rate,
            grad_mode=g.grad_mode,
            seed=self.seed if seed is None else seed,
            residual_floor=g.residual_floor,
            min_decay=g.min_decay,
            divergence_factor=g.divergence_factor,
            divergence_window=g.divergence_window,
        )

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def hash(self) -> str:
        return config_hash(self)

    def updated(self, changes: dict) -> "RunConfig":
        """Deep-merge ``changes`` and re-validate."""
        return parse_config(_merge(self.to_dict(), changes))


def _merge(base: dict, changes: dict) -> dict:
    out = dict(base)
    for k, v in changes.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: Path | str | None) -> RunConfig:
    """YAML (or JSON, which is YAML) file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def dump_config(cfg: RunConfig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


def config_hash(cfg: RunConfig) -> str:
    """SHA-256 of the canonical JSON form; independent of key order in the source file."""
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def json_schema() -> dict:
    return RunConfig.model_json_schema()
