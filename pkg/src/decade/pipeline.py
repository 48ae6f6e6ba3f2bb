"""End-to-end stages shared by the command line and the acceptance runs.

Each stage reads and writes files under an output directory. Expensive
stages (training, denoising) can reuse results from a content-keyed cache
directory given by ``DECADE_CACHE``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
import shutil
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import RunConfig
from .dataset import StudySet, phantom_specs, phase_a_slices, phase_b_data, simulate
from .denoiser import ControlBranch, BaseModel, init_control
from .diffusion import intensity_scale
from .io import file_sha256, read_study, read_volume, spec_to_dict, write_study, write_truth, write_volume
from .kinetics import IDIF, KineticMaps, build_basis, extract_idif, fit_volume, myocardial_k1_error
from .metrics import MetricReport, evaluate_frames, myo_blood_ratio, nstd, paired_ttest
from .phantom import DEFECT, LV_CAVITY, MYOCARDIUM, DynamicStudy, PhantomSpec, counts_to_activity, mean_static
from .sampler import DenoiseResult, denoise_study, frame_traces
from .training import load_base, load_control, make_models, save_checkpoint, train_base, train_control

log = logging.getLogger(__name__)

CACHE_ENV = "DECADE_CACHE"
SPLITS = ("train", "heldout")


def cache_root() -> Path | None:
    root = os.environ.get(CACHE_ENV)
    return Path(root) if root else None


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seeds: dict
    artifacts: dict[str, str] = field(default_factory=dict)
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex[:12])
    started_utc: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())
    finished_utc: str = ""
    tool_version: str = __version__
    extra: dict = field(default_factory=dict)

    def add(self, path: Path | str, root: Path | str) -> None:
        path = Path(path)
        self.artifacts[str(path.relative_to(root))] = file_sha256(path)

    def add_tree(self, root: Path | str) -> None:
        """Every file under ``root`` except manifests themselves."""
        root = Path(root)
        for p in sorted(root.rglob("*")):
            if p.is_file() and not p.name.endswith("manifest.json"):
                self.add(p, root)

    def write(self, out_dir: Path | str, name: str = "manifest.json") -> Path:
        self.finished_utc = datetime.now(timezone.utc).isoformat()
        path = Path(out_dir) / name
        body = {
            "run_id": self.run_id,
            "command": self.command,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "artifacts": dict(sorted(self.artifacts.items())),
            "started_utc": self.started_utc,
            "finished_utc": self.finished_utc,
            "tool_version": self.tool_version,
            "python": platform.python_version(),
            "torch": torch.__version__,
            **self.extra,
        }
        path.write_text(json.dumps(body, indent=2))
        return path


def read_manifest(path: Path | str) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    return json.loads(path.read_text())


# ---------------------------------------------------------------- dataset


def base_phantom(cfg: RunConfig) -> PhantomSpec:
    p = cfg.phantom
    return PhantomSpec(dims=tuple(p.dims), voxel_mm=p.voxel_mm, sensitivity=p.sensitivity)


def split_specs(cfg: RunConfig, split: str) -> list[PhantomSpec]:
    if split == "train":
        return phantom_specs(cfg.phantom.n_studies, 1000 * cfg.seed + 1, base_phantom(cfg))
    if split == "heldout":
        return phantom_specs(cfg.phantom.n_heldout, 1000 * cfg.seed + 2, base_phantom(cfg), offset=100_000)
    raise ValueError(f"unknown split {split!r}")


def write_study_set(s: StudySet, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    write_truth(s.truth, directory / "truth")
    (directory / "truth" / "spec.json").write_text(json.dumps(spec_to_dict(s.truth.spec), indent=2, sort_keys=True))
    write_study(s.full, directory / "full")
    write_study(s.low, directory / "low")
    write_volume(s.static.astype(np.float32), directory / "static", s.full.voxel_mm)


def generate_dataset(cfg: RunConfig, out_dir: Path | str) -> RunManifest:
    """Simulate the training and held-out phantoms; partial output is removed on failure."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()):
        raise FileExistsError(f"{out_dir} is not empty")
    man = RunManifest("phantom", cfg.hash(), {"seed": cfg.seed})
    try:
        for split in SPLITS:
            for spec in split_specs(cfg, split):
                s = simulate(spec, count_fraction=cfg.phantom.count_fraction, blur_fwhm_mm=cfg.phantom.blur_fwhm_mm)
                write_study_set(s, out_dir / split / spec.phantom_id)
        (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
        man.add_tree(out_dir)
        man.extra["splits"] = {sp: sorted(p.name for p in (out_dir / sp).iterdir()) if (out_dir / sp).exists() else []
                               for sp in SPLITS}
        man.write(out_dir)
    except BaseException:
        shutil.rmtree(out_dir, ignore_errors=True)
        raise
    return man


def study_dirs(data_dir: Path | str, split: str) -> list[Path]:
    d = Path(data_dir) / split
    if not d.is_dir():
        raise FileNotFoundError(f"no {split!r} split under {data_dir}")
    # numeric order of phantom-<k>
    return sorted((p for p in d.iterdir() if p.is_dir()), key=lambda p: (len(p.name), p.name))


@dataclass
class LoadedStudy:
    path: Path
    clean: DynamicStudy
    full: DynamicStudy
    low: DynamicStudy
    labels: np.ndarray
    K1: np.ndarray

    @property
    def myocardium(self) -> np.ndarray:
        return np.isin(self.labels, (MYOCARDIUM, DEFECT))

    @property
    def lv(self) -> np.ndarray:
        return self.labels == LV_CAVITY

    def study_set(self) -> StudySet:
        return StudySet(None, self.clean, self.full, self.low)


def load_study(directory: Path | str) -> LoadedStudy:
    d = Path(directory)
    return LoadedStudy(
        d,
        read_study(d / "truth" / "clean"),
        read_study(d / "full"),
        read_study(d / "low"),
        read_volume(d / "truth" / "labels"),
        read_volume(d / "truth" / "K1"),
    )


def dataset_fingerprint(data_dir: Path | str) -> str:
    # the copied config is excluded so unrelated config edits keep training cache hits
    arts = dict(read_manifest(data_dir)["artifacts"])
    arts.pop("config.json", None)
    return digest(arts)


# ---------------------------------------------------------------- training


def _network_input(arr: np.ndarray, cfg: RunConfig) -> np.ndarray:
    return phase_a_slices(arr) if cfg.network.mode == "2d" else arr


def _cache_hit(key: str, out: Path) -> bool:
    """Copy a completed cache entry into ``out``; False when absent."""
    root = cache_root()
    if root is None or not (root / key / "ok").exists():
        return False
    for p in sorted((root / key).rglob("*")):
        if p.is_file() and p.name != "ok":
            dst = out / p.relative_to(root / key)
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(p, dst)
    log.info("reused cached result %s", key[:16])
    return True


def _cache_store(key: str, root: Path, files: list[Path]) -> None:
    """Publish ``files`` (relative to ``root``) atomically under the key."""
    croot = cache_root()
    if croot is None:
        return
    tmp = croot / f".{key}.tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    for p in files:
        dst = tmp / Path(p).relative_to(root)
        dst.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(p, dst)
    (tmp / "ok").write_text("")
    shutil.rmtree(croot / key, ignore_errors=True)
    tmp.rename(croot / key)


def base_key(cfg: RunConfig, data_fp: str) -> str:
    c = cfg.to_dict()
    return "base-" + digest({k: c[k] for k in ("seed", "schedule", "network", "training_a")} | {"data": data_fp})


def control_key(cfg: RunConfig, data_fp: str) -> str:
    c = cfg.to_dict()
    return "ctrl-" + digest({"base": base_key(cfg, data_fp), "training_b": c["training_b"]})


def run_train_base(cfg: RunConfig, data_dir: Path | str, out_dir: Path | str, resume: bool = False) -> dict:
    """Phase A on the training split's mean statics."""
    out_dir = Path(out_dir)
    key = base_key(cfg, dataset_fingerprint(data_dir))
    if not resume and _cache_hit(key, out_dir):
        return json.loads((out_dir / "base.json").read_text())
    vols = []
    for d in study_dirs(data_dir, "train"):
        v = read_volume(d / "static")
        vols.append((v / intensity_scale(v)).astype(np.float32))
    volumes = _network_input(np.stack(vols), cfg)
    torch.manual_seed(cfg.seed)
    base = make_models(cfg.network_config(), cfg.seed)
    hist = train_base(base, volumes, cfg.diffusion_schedule(), cfg.training_config("a"), out_dir / "base",
                      out_dir / "base_log.csv", resume=resume, augment=cfg.training_a.augment,
                      config_hash=cfg.hash())
    man = _finish_checkpoint(out_dir / "base.json", hist, cfg)
    _cache_store(key, out_dir, [out_dir / "base.pt", out_dir / "base.json", out_dir / "base_log.csv"])
    return man


def _finish_checkpoint(manifest_path: Path, hist: dict, cfg: RunConfig) -> dict:
    man = json.loads(manifest_path.read_text())
    prior = man.get("train_wall_s", 0.0) if man.get("step", 0) > len(hist["losses"]) else 0.0
    man["train_wall_s"] = float(prior + hist["wall_s"])
    man["final_loss"] = float(np.mean(hist["losses"][-100:])) if hist["losses"] else None
    man["config"] = cfg.to_dict()
    manifest_path.write_text(json.dumps(man, indent=2, sort_keys=True))
    return man


def run_train_control(cfg: RunConfig, data_dir: Path | str, base_ckpt: Path | str, out_dir: Path | str,
                      resume: bool = False) -> dict:
    """Phase B: the base is loaded frozen; only the control branch learns."""
    out_dir = Path(out_dir)
    key = control_key(cfg, dataset_fingerprint(data_dir))
    if not resume and _cache_hit(key, out_dir):
        return json.loads((out_dir / "control.json").read_text())
    base, _ = load_base(base_ckpt)
    if base.config != cfg.network_config():
        raise ValueError("base checkpoint network does not match the configured network")
    tb = cfg.training_b
    sets = (load_study(d).study_set() for d in study_dirs(data_dir, "train"))
    data = phase_b_data(sets, tb.target, tb.cond_sigma)
    if cfg.network.mode == "2d":
        data = data.to_slices()
    ctrl = init_control(base, seed=tb.control_seed)
    hist = train_control(base, ctrl, data, cfg.diffusion_schedule(), cfg.training_config("b"), out_dir / "control",
                         out_dir / "control_log.csv", resume=resume, augment=tb.augment, config_hash=cfg.hash())
    man = _finish_checkpoint(out_dir / "control.json", hist, cfg)
    man["base_checkpoint_hash"] = file_sha256(Path(base_ckpt).with_suffix(".pt"))
    (out_dir / "control.json").write_text(json.dumps(man, indent=2, sort_keys=True))
    _cache_store(key, out_dir, [out_dir / "control.pt", out_dir / "control.json", out_dir / "control_log.csv"])
    return man


def load_models(base_ckpt: Path | str, ctrl_ckpt: Path | str | None) -> tuple[BaseModel, ControlBranch | None]:
    base, _ = load_base(base_ckpt)
    base.requires_grad_(False)
    ctrl = None
    if ctrl_ckpt is not None:
        ctrl, _ = load_control(ctrl_ckpt, base)
        ctrl.requires_grad_(False)
    return base.eval(), ctrl.eval() if ctrl is not None else None


# ---------------------------------------------------------------- denoising


def run_denoise(
    cfg: RunConfig,
    study_path: Path | str,
    base_ckpt: Path | str,
    ctrl_ckpt: Path | str | None,
    out_dir: Path | str,
    seed: int | None = None,
) -> tuple[DynamicStudy, dict]:
    """Denoise one study file; writes the study, one trace CSV per frame and a manifest."""
    out_dir = Path(out_dir)
    seed = cfg.seed if seed is None else seed
    gcfg = cfg.guidance_config(seed)
    key = "den-" + digest({
        "study": file_sha256(Path(study_path).with_suffix(".raw")),
        "base": file_sha256(Path(base_ckpt).with_suffix(".pt")),
        "ctrl": file_sha256(Path(ctrl_ckpt).with_suffix(".pt")) if ctrl_ckpt else None,
        "guidance": vars(gcfg),
        "sigma": cfg.training_b.cond_sigma,
        "batch": cfg.guidance.batch_frames,
    })
    if _cache_hit(key, out_dir):
        return read_study(out_dir / "denoised"), json.loads((out_dir / "denoise.json").read_text())
    study = read_study(study_path)
    base, ctrl = load_models(base_ckpt, ctrl_ckpt if gcfg.t_c > 0 else None)
    t0 = time.perf_counter()
    res = denoise_study(study, base, ctrl, gcfg, cfg.diffusion_schedule(), cfg.training_b.cond_sigma,
                        cfg.guidance.batch_frames)
    wall = time.perf_counter() - t0
    files = list(write_study(res.study, out_dir / "denoised"))
    trace_dir = out_dir / "traces"
    for f, (trace, k) in sorted(frame_traces(res).items()):
        files.append(trace.write_csv(trace_dir / f"frame_{f:02d}.csv", k))
    info = {
        "study": str(study_path),
        "frames": res.study.n_frames,
        "failed_frames": sorted(res.failures),
        "sampling_wall_s": wall,
        "guidance": vars(gcfg),
        "scales": res.scales.tolist(),
    }
    (out_dir / "denoise.json").write_text(json.dumps(info, indent=2, sort_keys=True))
    files.append(out_dir / "denoise.json")
    if not res.failures:
        _cache_store(key, out_dir, files)
    return res.study, info


# ---------------------------------------------------------------- kinetics and evaluation


def kinetics_basis(cfg: RunConfig, idif: IDIF, schedule):
    k = cfg.kinetics
    grid = np.geomspace(k.k2_min_per_min, k.k2_max_per_min, k.k2_n) if k.k2_n > 1 else np.array([k.k2_max_per_min])
    return build_basis(idif, grid, schedule, k.dt_s, k.interpolation)


def fit_study(cfg: RunConfig, study: DynamicStudy, labels: np.ndarray, mask: np.ndarray | None = None) -> KineticMaps:
    """IDIF from the LV cavity label, then the voxelwise basis-function fit."""
    lv = labels == LV_CAVITY
    myo = np.isin(labels, (MYOCARDIUM, DEFECT))
    idif = extract_idif(study, lv)
    act = counts_to_activity(study) if study.units == "counts" else study
    basis = kinetics_basis(cfg, idif, act.schedule)
    rois = {"myocardium": myo}
    if np.any(labels == DEFECT):
        rois["defect"] = labels == DEFECT
        rois["remote"] = labels == MYOCARDIUM
    k = cfg.kinetics
    return fit_volume(act, idif, roi_masks=rois, mask=mask, basis=basis,
                      renkin_crone=(k.renkin_crone_a, k.renkin_crone_b))


def write_maps(maps: KineticMaps, out_dir: Path | str, voxel_mm: float) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for name in ("K1", "k2", "Vb", "MBF", "residual"):
        paths += write_volume(np.nan_to_num(getattr(maps, name)).astype(np.float32), out_dir / name, voxel_mm)
    paths.append(maps.write_roi_csv(out_dir / "roi.csv"))
    return paths


def evaluate(cfg: RunConfig, pred: DynamicStudy, ref: DynamicStudy, reference: str = "clean") -> MetricReport:
    pred = counts_to_activity(pred) if pred.units == "counts" else pred
    ref = counts_to_activity(ref) if ref.units == "counts" else ref
    if pred.schedule != ref.schedule:
        raise ValueError("prediction and reference frame schedules differ")
    return evaluate_frames(pred.frames, ref.frames, reference=reference)


@dataclass
class StudyScore:
    study: str
    method: str
    psnr_db: float
    ssim: float
    nmse: float
    k1_error_pct: float
    nstd_myo_static: float
    myo_blood_static: float
    report: MetricReport

    def row(self) -> dict:
        return {k: getattr(self, k) for k in ("study", "method", "psnr_db", "ssim", "nmse", "k1_error_pct",
                                               "nstd_myo_static", "myo_blood_static")}


def score_study(cfg: RunConfig, name: str, method: str, study: DynamicStudy, s: LoadedStudy) -> tuple[StudyScore, KineticMaps]:
    act = counts_to_activity(study) if study.units == "counts" else study
    rep = evaluate(cfg, act, s.clean)
    maps = fit_study(cfg, act, s.labels, mask=s.myocardium)
    k1_err = myocardial_k1_error(maps, s.K1, s.myocardium)
    w = cfg.phantom.static_window_s
    static = mean_static(act, *w)
    agg = rep.aggregate
    score = StudyScore(name, method, agg["psnr_db"], agg["ssim"], agg["nmse"], k1_err,
                       _or_nan(nstd, static, s.myocardium), _or_nan(myo_blood_ratio, static, s.myocardium, s.lv), rep)
    return score, maps


def _or_nan(fn, *args) -> float:
    # ratios are undefined when a denominator is not positive (e.g. an untrained model)
    try:
        return fn(*args)
    except ValueError:
        return float("nan")


SUMMARY_COLUMNS = ("study", "method", "psnr_db", "ssim", "nmse", "k1_error_pct", "nstd_myo_static", "myo_blood_static")


def summarize(scores: list[StudyScore]) -> dict:
    """Means per method plus noisy-versus-denoised deltas and paired tests."""
    out = {}
    methods = sorted({s.method for s in scores})
    for m in methods:
        sel = [s for s in scores if s.method == m]
        out[m] = {k: float(np.mean([getattr(s, k) for s in sel])) for k in SUMMARY_COLUMNS[2:]}
        out[m]["n"] = len(sel)
    if {"noisy", "denoised"} <= set(methods):
        noisy = {s.study: s for s in scores if s.method == "noisy"}
        den = {s.study: s for s in scores if s.method == "denoised"}
        both = sorted(set(noisy) & set(den))
        out["delta"] = {
            "psnr_db": float(np.mean([den[k].psnr_db - noisy[k].psnr_db for k in both])),
            "ssim": float(np.mean([den[k].ssim - noisy[k].ssim for k in both])),
            "k1_error_pct": float(np.mean([den[k].k1_error_pct - noisy[k].k1_error_pct for k in both])),
        }
        per_frame_n = [r["psnr_db"] for k in both for r in noisy[k].report.frame_rows]
        per_frame_d = [r["psnr_db"] for k in both for r in den[k].report.frame_rows]
        if len(per_frame_n) > 1:
            out["delta"]["psnr_paired_t"], out["delta"]["psnr_paired_p"] = paired_ttest(per_frame_d, per_frame_n)
    return out
