"""Phase A (base) and Phase B (control branch) training loops and checkpoints."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .denoiser import BaseModel, ControlBranch, NetworkConfig, init_control, parameter_count, state_hash
from .diffusion import (
    DiffusionSchedule,
    FrozenBaseViolation,
    NonFiniteLoss,
    TrainingConfig,
    assert_base_untouched,
    loss_base,
    loss_control,
    make_schedule,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1


@dataclass
class PhaseBData:
    """Smoothed noisy frames with their pseudo-clean targets.

    ``cond_frames`` and ``targets`` are [N, F, *spatial]; ``cond_frames`` are
    already Gaussian smoothed and ``scales`` [N, F] are the per-frame
    normalisers taken from the unsmoothed noisy frames.
    """

    cond_frames: np.ndarray
    targets: np.ndarray
    scales: np.ndarray
    cond_sigma: float = 1.0

    def __post_init__(self):
        if self.cond_frames.shape != self.targets.shape:
            raise ValueError("condition frames and targets differ in shape")
        if self.scales.shape != self.cond_frames.shape[:2]:
            raise ValueError("scales must be [N, F]")

    def to_slices(self) -> "PhaseBData":
        """Axial slices as independent 2D samples: [N * Z, F, Y, X]."""
        if self.cond_frames.ndim != 5:
            raise ValueError("slice mode needs 3D frames")
        n, f, z = self.cond_frames.shape[:3]

        def cut(a):
            return np.ascontiguousarray(a.transpose(0, 2, 1, 3, 4).reshape(n * z, f, *a.shape[3:]))

        return PhaseBData(cut(self.cond_frames), cut(self.targets), np.repeat(self.scales, z, axis=0), self.cond_sigma)


def _flip(x: torch.Tensor, flips: torch.Tensor, spatial_dims: int) -> torch.Tensor:
    for axis in range(spatial_dims):
        if flips[axis]:
            x = torch.flip(x, dims=(x.ndim - spatial_dims + axis,))
    return x


def _lr_at(step: int, tcfg: TrainingConfig) -> float:
    """Linear warmup then cosine decay to 10% of the peak rate."""
    if step < tcfg.warmup_steps:
        return tcfg.lr * (step + 1) / tcfg.warmup_steps
    span = max(tcfg.steps - tcfg.warmup_steps, 1)
    frac = min((step - tcfg.warmup_steps) / span, 1.0)
    return tcfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))


class _EMA:
    def __init__(self, module: torch.nn.Module, decay: float):
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}

    @torch.no_grad()
    def update(self, module: torch.nn.Module) -> None:
        for k, v in module.state_dict().items():
            if v.dtype.is_floating_point:
                self.shadow[k].mul_(self.decay).add_(v.detach(), alpha=1 - self.decay)
            else:
                self.shadow[k].copy_(v)


def save_checkpoint(
    path: Path | str,
    model: torch.nn.Module,
    kind: str,
    step: int,
    sched: DiffusionSchedule,
    config_hash: str = "",
    optimizer: torch.optim.Optimizer | None = None,
    ema: _EMA | None = None,
    extra: dict | None = None,
) -> tuple[Path, Path]:
    """Parameter blob ``<path>.pt`` plus JSON manifest ``<path>.json``."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {"model": model.state_dict(), "step": step}
    if optimizer is not None:
        blob["optimizer"] = optimizer.state_dict()
    if ema is not None:
        blob["ema"] = ema.shadow
    tmp = path.with_suffix(".pt.tmp")
    torch.save(blob, tmp)
    tmp.replace(path.with_suffix(".pt"))
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "kind": kind,
        "step": step,
        "config_hash": config_hash,
        "schedule": sched.params(),
        "network": model.config.to_dict(),
        "parameters": parameter_count(model),
        "param_hash": state_hash(model),
    }
    if isinstance(model, ControlBranch):
        manifest["control_seed"] = model.seed
    manifest.update(extra or {})
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path.with_suffix(".pt"), path.with_suffix(".json")


def load_manifest(path: Path | str) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_base(path: Path | str, use_ema: bool = True) -> tuple[BaseModel, dict]:
    manifest = load_manifest(path)
    if manifest["kind"] != "base":
        raise ValueError(f"{path} is not a base checkpoint")
    model = BaseModel(NetworkConfig.from_dict(manifest["network"]))
    blob = torch.load(Path(path).with_suffix(".pt"), weights_only=True)
    model.load_state_dict(blob["ema"] if use_ema and "ema" in blob else blob["model"])
    return model, manifest


def load_control(path: Path | str, base: BaseModel, use_ema: bool = True) -> tuple[ControlBranch, dict]:
    manifest = load_manifest(path)
    if manifest["kind"] != "control":
        raise ValueError(f"{path} is not a control checkpoint")
    cfg = NetworkConfig.from_dict(manifest["network"])
    ctrl = init_control(base, cfg, seed=manifest.get("control_seed", 0))
    blob = torch.load(Path(path).with_suffix(".pt"), weights_only=True)
    ctrl.load_state_dict(blob["ema"] if use_ema and "ema" in blob else blob["model"])
    return ctrl, manifest


class _LossLog:
    def __init__(self, path: Path | None, append: bool):
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            new = not (append and path.exists())
            self.fh = open(path, "a" if not new else "w", newline="")
            self.wr = csv.writer(self.fh)
            if new:
                self.wr.writerow(["step", "loss", "lr", "wall_s"])

    def write(self, step, loss, lr, wall):
        if self.path is not None:
            self.wr.writerow([step, f"{loss:.8g}", f"{lr:.8g}", f"{wall:.3f}"])

    def close(self):
        if self.path is not None:
            self.fh.close()


def _resume(path, model, optimizer, ema):
    blob = torch.load(Path(path).with_suffix(".pt"), weights_only=True)
    model.load_state_dict(blob["model"])
    if "optimizer" in blob:
        optimizer.load_state_dict(blob["optimizer"])
    if ema is not None and "ema" in blob:
        ema.shadow = blob["ema"]
    return int(blob["step"])


def train_base(
    base: BaseModel,
    volumes: np.ndarray,
    sched: DiffusionSchedule,
    tcfg: TrainingConfig,
    ckpt_path: Path | str | None = None,
    log_path: Path | str | None = None,
    resume: bool = False,
    augment: bool = True,
    config_hash: str = "",
) -> dict:
    """Fit eps_theta on normalised pseudo-clean volumes [N, *spatial]."""
    data = torch.as_tensor(np.asarray(volumes, dtype=np.float32)).unsqueeze(1)
    nd = base.config.spatial_dims
    opt = torch.optim.Adam(base.parameters(), lr=tcfg.lr)
    ema = _EMA(base, tcfg.ema_decay) if tcfg.ema_decay else None
    start = 0
    if resume and ckpt_path is not None and Path(ckpt_path).with_suffix(".pt").exists():
        start = _resume(ckpt_path, base, opt, ema)
    gen = torch.Generator().manual_seed(tcfg.seed + 7919 * start)

    def batch_fn():
        idx = torch.randint(0, data.shape[0], (tcfg.batch_size,), generator=gen)
        x0 = data[idx]
        if augment:
            x0 = _flip(x0, torch.randint(0, 2, (nd,), generator=gen), nd)
        return (x0,)

    def loss_fn(x0):
        return loss_base(base, x0, sched, gen)

    return _loop(base, base.parameters(), opt, ema, batch_fn, loss_fn, tcfg, start, sched,
                 ckpt_path, log_path, resume, "base", config_hash)


def train_control(
    base: BaseModel,
    ctrl: ControlBranch,
    data: PhaseBData,
    sched: DiffusionSchedule,
    tcfg: TrainingConfig,
    ckpt_path: Path | str | None = None,
    log_path: Path | str | None = None,
    resume: bool = False,
    augment: bool = True,
    config_hash: str = "",
) -> dict:
    """Fine-tune the control branch with the base frozen; verifies the base hash."""
    base.requires_grad_(False)
    base.eval()
    for p in base.parameters():
        p.grad = None
    before = state_hash(base)
    nd = base.config.spatial_dims
    opt = torch.optim.Adam(ctrl.parameters(), lr=tcfg.lr)
    ema = _EMA(ctrl, tcfg.ema_decay) if tcfg.ema_decay else None
    start = 0
    if resume and ckpt_path is not None and Path(ckpt_path).with_suffix(".pt").exists():
        start = _resume(ckpt_path, ctrl, opt, ema)
    gen = torch.Generator().manual_seed(tcfg.seed + 7919 * start)
    n_studies, n_frames = data.scales.shape

    def batch_fn():
        si = torch.randint(0, n_studies, (tcfg.batch_size,), generator=gen).tolist()
        fi = torch.randint(0, n_frames, (tcfg.batch_size,), generator=gen).tolist()
        conds, targets = [], []
        for i, f in zip(si, fi):
            idx = [min(max(k, 0), n_frames - 1) for k in (f - 1, f, f + 1)]
            s = data.scales[i, f]
            conds.append(data.cond_frames[i, idx] / s)
            targets.append(data.targets[i, f] / s)
        c = torch.as_tensor(np.stack(conds), dtype=torch.float32)
        x0 = torch.as_tensor(np.stack(targets), dtype=torch.float32).unsqueeze(1)
        if augment:
            flips = torch.randint(0, 2, (nd,), generator=gen)
            c, x0 = _flip(c, flips, nd), _flip(x0, flips, nd)
        return x0, c

    def loss_fn(x0, c):
        return loss_control(base, ctrl, x0, c, sched, gen)

    hist = _loop(ctrl, ctrl.parameters(), opt, ema, batch_fn, loss_fn, tcfg, start, sched,
                 ckpt_path, log_path, resume, "control", config_hash,
                 after_backward=lambda: assert_base_untouched(base),
                 extra={"base_hash": before})
    if state_hash(base) != before:
        raise FrozenBaseViolation("base parameters changed during control training")
    hist["base_hash"] = before
    return hist


def _loop(model, params, opt, ema, batch_fn, loss_fn, tcfg, start, sched, ckpt_path, log_path,
          resume, kind, config_hash, after_backward=None, extra=None):
    params = list(params)
    model.train()
    logger = _LossLog(Path(log_path) if log_path else None, append=resume)
    t0 = time.perf_counter()
    losses = []
    step = start
    try:
        while step < tcfg.steps:
            lr = _lr_at(step, tcfg)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = batch_fn()
            opt.zero_grad(set_to_none=True)
            try:
                loss = loss_fn(*batch)
            except NonFiniteLoss:
                log.error("non-finite loss at step %d; keeping last checkpoint", step)
                raise
            loss.backward()
            if after_backward is not None:
                after_backward()
            if tcfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, tcfg.grad_clip)
            opt.step()
            if ema is not None:
                ema.update(model)
            step += 1
            losses.append(loss.item())
            logger.write(step, losses[-1], lr, time.perf_counter() - t0)
            if ckpt_path is not None and (step % tcfg.checkpoint_every == 0 or step == tcfg.steps):
                save_checkpoint(ckpt_path, model, kind, step, sched, config_hash, opt, ema, extra)
    finally:
        logger.close()
    if ema is not None:
        model.load_state_dict(ema.shadow)
    model.eval()
    return {"losses": losses, "step": step, "wall_s": time.perf_counter() - t0}


def make_models(cfg: NetworkConfig, seed: int = 0) -> BaseModel:
    torch.manual_seed(seed)
    return BaseModel(cfg)


def default_schedule(T: int = 1000) -> DiffusionSchedule:
    return make_schedule(T)


def training_config_dict(tcfg: TrainingConfig) -> dict:
    return asdict(tcfg)


def clone_frozen(base: BaseModel) -> BaseModel:
    out = copy.deepcopy(base)
    out.requires_grad_(False)
    return out.eval()
