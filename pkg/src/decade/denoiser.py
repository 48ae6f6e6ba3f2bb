"""Time-conditioned noise-prediction U-Net and its zero-gated control branch.

The same classes serve 2D slices and 3D volumes; ``NetworkConfig.spatial_dims``
selects the convolution type.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 16
    channel_mult: tuple[int, ...] = (1, 2, 4)
    time_embed_dim: int = 64
    attention: tuple[bool, ...] = (False, False, False)
    spatial_dims: int = 3
    groups: int = 8
    cond_channels: int = 3
    cond_hidden: int = 16

    def __post_init__(self):
        object.__setattr__(self, "channel_mult", tuple(int(m) for m in self.channel_mult))
        object.__setattr__(self, "attention", tuple(bool(a) for a in self.attention))
        if self.levels < 2:
            raise ValueError("network needs at least 2 levels")
        if len(self.attention) != self.levels:
            raise ValueError(
                f"attention flags ({len(self.attention)}) must match levels ({self.levels})"
            )
        if self.spatial_dims not in (2, 3):
            raise ValueError("spatial_dims must be 2 or 3")
        if self.base_channels < 1 or self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("base_channels >= 1 and an even time_embed_dim are required")

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]

    def check_input(self, shape: tuple[int, ...]) -> None:
        spatial = shape[-self.spatial_dims:]
        k = 2 ** (self.levels - 1)
        if any(s % k for s in spatial):
            raise ValueError(f"spatial dims {tuple(spatial)} must be divisible by {k}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention"] = list(self.attention)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        d["channel_mult"] = tuple(d["channel_mult"])
        d["attention"] = tuple(d["attention"])
        return cls(**d)


def _conv(dims: int, *args, **kwargs) -> nn.Module:
    return (nn.Conv2d if dims == 2 else nn.Conv3d)(*args, **kwargs)


def _norm(groups: int, channels: int) -> nn.GroupNorm:
    g = math.gcd(groups, channels)
    return nn.GroupNorm(g, channels)


def _zero_(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer steps ``t`` (shape [B]) into [B, dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, dims: int, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = _norm(groups, cin)
        self.conv1 = _conv(dims, cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = _norm(groups, cout)
        self.conv2 = _conv(dims, cout, cout, 3, padding=1)
        self.skip = _conv(dims, cin, cout, 1) if cin != cout else nn.Identity()
        self.dims = dims

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        tb = self.temb(F.silu(temb))
        h = h + tb.view(*tb.shape, *([1] * self.dims))
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = _norm(groups, channels)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        b, c = x.shape[:2]
        h = self.norm(x).reshape(b, c, -1).transpose(1, 2)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        h = F.scaled_dot_product_attention(q, k, v)
        h = self.proj(h).transpose(1, 2).reshape(x.shape)
        return x + h


class Level(nn.Module):
    """One resolution level: residual block plus optional attention."""

    def __init__(self, dims, cin, cout, temb_dim, groups, attention):
        super().__init__()
        self.res = ResBlock(dims, cin, cout, temb_dim, groups)
        self.attn = SelfAttention(cout, groups) if attention else None

    def forward(self, x, temb):
        h = self.res(x, temb)
        if self.attn is not None:
            h = self.attn(h)
        return h


class Encoder(nn.Module):
    """Input conv, per-level blocks with downsampling, and the middle block.

    This is the part the control branch copies.
    """

    def __init__(self, cfg: NetworkConfig, in_channels: int = 1):
        super().__init__()
        d, ch, te, g = cfg.spatial_dims, cfg.channels, cfg.time_embed_dim, cfg.groups
        self.time_mlp = nn.Sequential(nn.Linear(te, 4 * te), nn.SiLU(), nn.Linear(4 * te, 4 * te))
        self.inp = _conv(d, in_channels, ch[0], 3, padding=1)
        self.levels = nn.ModuleList()
        self.downs = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.levels.append(Level(d, prev, c, 4 * te, g, cfg.attention[i]))
            prev = c
            if i < len(ch) - 1:
                self.downs.append(_conv(d, c, c, 3, stride=2, padding=1))
        self.mid1 = ResBlock(d, prev, prev, 4 * te, g)
        self.mid_attn = SelfAttention(prev, g) if cfg.attention[-1] else None
        self.mid2 = ResBlock(d, prev, prev, 4 * te, g)
        self.time_embed_dim = te

    def embed_time(self, t: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.time_embed_dim).to(dtype))

    def forward(self, x, temb, hint=None):
        """Return per-level skip features and the middle-block output."""
        h = self.inp(x)
        if hint is not None:
            h = h + hint
        skips = []
        for i, level in enumerate(self.levels):
            h = level(h, temb)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        h = self.mid1(h, temb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid2(h, temb)
        return skips, h


class BaseModel(nn.Module):
    """Encoder-decoder noise predictor eps_theta(x_t, t)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        d, ch, te, g = cfg.spatial_dims, cfg.channels, cfg.time_embed_dim, cfg.groups
        self.encoder = Encoder(cfg)
        self.dec_levels = nn.ModuleList()
        self.ups = nn.ModuleList()
        prev = ch[-1]
        for i in reversed(range(cfg.levels)):
            self.dec_levels.append(Level(d, prev + ch[i], ch[i], 4 * te, g, cfg.attention[i]))
            prev = ch[i]
            if i > 0:
                self.ups.append(_conv(d, ch[i], ch[i - 1], 3, padding=1))
                prev = ch[i - 1]
        self.out_norm = _norm(g, ch[0])
        self.out = _zero_(_conv(d, ch[0], 1, 3, padding=1))

    def forward(self, x, t, control=None):
        """Predict noise. ``control`` holds residuals (per skip, then middle)."""
        self.config.check_input(tuple(x.shape))
        temb = self.encoder.embed_time(t, x.dtype)
        skips, h = self.encoder(x, temb)
        if control is not None:
            *ctrl_skips, ctrl_mid = control
            skips = [s + c for s, c in zip(skips, ctrl_skips)]
            h = h + ctrl_mid
        n = len(self.dec_levels)
        for j, level in enumerate(self.dec_levels):
            h = level(torch.cat([h, skips[n - 1 - j]], dim=1), temb)
            if j < len(self.ups):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[j](h)
        return self.out(F.silu(self.out_norm(h)))


class ControlBranch(nn.Module):
    """Trainable encoder copy fed by a condition embedding, gated by zero convs."""

    def __init__(self, base: BaseModel, seed: int = 0):
        super().__init__()
        cfg = base.config
        self.config = cfg
        self.seed = seed
        d, ch = cfg.spatial_dims, cfg.channels
        self.encoder = copy.deepcopy(base.encoder)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.cond_embed = nn.Sequential(
                _conv(d, cfg.cond_channels, cfg.cond_hidden, 3, padding=1),
                nn.SiLU(),
                _conv(d, cfg.cond_hidden, cfg.cond_hidden, 3, padding=1),
                nn.SiLU(),
                _zero_(_conv(d, cfg.cond_hidden, ch[0], 3, padding=1)),
            )
            self.zero_skips = nn.ModuleList(_zero_(_conv(d, c, c, 1)) for c in ch)
            self.zero_mid = _zero_(_conv(d, ch[-1], ch[-1], 1))
        self.encoder.requires_grad_(True)

    def fusion_parameters(self):
        yield from self.zero_skips.parameters()
        yield from self.zero_mid.parameters()
        yield from self.cond_embed[-1].parameters()

    def embed_condition(self, cond: torch.Tensor) -> torch.Tensor:
        return self.cond_embed(cond)

    def forward(self, x, t, cond=None, hint=None):
        """Control residuals; pass ``hint`` to reuse a cached condition embedding."""
        if hint is None:
            hint = self.cond_embed(cond)
        temb = self.encoder.embed_time(t, x.dtype)
        skips, mid = self.encoder(x, temb, hint=hint)
        out = [z(s) for z, s in zip(self.zero_skips, skips)]
        out.append(self.zero_mid(mid))
        return out


def _timesteps(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(device=device, dtype=torch.long)
        return t.expand(batch) if t.ndim == 0 else t
    return torch.full((batch,), int(t), dtype=torch.long, device=device)


def predict_eps(base: BaseModel, x_t: torch.Tensor, t) -> torch.Tensor:
    """Unconditional noise estimate; ``x_t`` is [B, 1, *spatial]."""
    _check_shape(base.config, x_t)
    return base(x_t, _timesteps(t, x_t.shape[0], x_t.device))


def predict_eps_conditional(
    base: BaseModel, ctrl: ControlBranch, x_t: torch.Tensor, t, cond: torch.Tensor | None = None,
    hint: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise estimate with control residuals from the condition stack ``cond``."""
    _check_shape(base.config, x_t)
    if hint is None:
        if cond is None:
            raise ValueError("either a condition stack or its embedding is required")
        if cond.shape[0] != x_t.shape[0] or cond.shape[2:] != x_t.shape[2:]:
            raise ValueError(f"condition shape {tuple(cond.shape)} does not match {tuple(x_t.shape)}")
    ts = _timesteps(t, x_t.shape[0], x_t.device)
    return base(x_t, ts, control=ctrl(x_t, ts, cond, hint=hint))


def _check_shape(cfg: NetworkConfig, x: torch.Tensor) -> None:
    if x.ndim != cfg.spatial_dims + 2 or x.shape[1] != 1:
        raise ValueError(
            f"expected [B, 1, {'Z, ' if cfg.spatial_dims == 3 else ''}Y, X], got {tuple(x.shape)}"
        )
    cfg.check_input(tuple(x.shape))


def init_control(base: BaseModel, config: NetworkConfig | None = None, seed: int = 0) -> ControlBranch:
    if config is not None and config != base.config:
        raise ValueError("control config does not match the base model config")
    return ControlBranch(base, seed=seed)


def state_hash(module: nn.Module) -> str:
    """SHA-256 over parameter bytes in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelCard:
    config: dict
    parameters: int
    kind: str = "base"
    extra: dict = field(default_factory=dict)
