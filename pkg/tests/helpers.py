"""Small shared builders for the unit tests."""

import torch

from decade.denoiser import BaseModel, NetworkConfig, init_control

TINY = NetworkConfig(base_channels=8, channel_mult=(1, 2), time_embed_dim=16, attention=(False, False),
                     groups=4, cond_hidden=4)
TINY_2D = NetworkConfig(base_channels=8, channel_mult=(1, 2), time_embed_dim=16, attention=(False, False),
                        groups=4, cond_hidden=4, spatial_dims=2)


def jitter_(module: torch.nn.Module, scale: float = 0.05, seed: int = 0) -> torch.nn.Module:
    """Add seeded noise to every parameter, standing in for a trained state."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def tiny_models(cfg: NetworkConfig = TINY, trained: bool = True, dtype=torch.float32, seed: int = 0):
    torch.manual_seed(seed)
    base = BaseModel(cfg)
    if trained:
        jitter_(base, seed=seed)
    ctrl = init_control(base, seed=seed + 1)
    if trained:
        jitter_(ctrl, seed=seed + 2)
    return base.to(dtype).eval(), ctrl.to(dtype).eval()
