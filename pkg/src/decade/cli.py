"""Command line: phantom, train-base, train-control, denoise, kinetics, evaluate, report.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, json_schema, load_config
from .diffusion import FrozenBaseViolation, NonFiniteLoss
from .io import FormatError, read_study, read_volume, write_volume
from .phantom import counts_to_activity
from .pipeline import (
    SUMMARY_COLUMNS,
    RunManifest,
    fit_study,
    evaluate,
    generate_dataset,
    load_study,
    read_manifest,
    run_denoise,
    run_train_base,
    run_train_control,
    score_study,
    study_dirs,
    summarize,
    write_maps,
)
from .sampler import SamplingError

log = logging.getLogger("decade")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


class NumericalFailure(RuntimeError):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.updated({"seed": args.seed})
    return cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_phantom(args) -> int:
    cfg = _config(args)
    if args.n is not None:
        cfg = cfg.updated({"phantom": {"n_studies": args.n, "n_heldout": args.n_heldout}})
    out = Path(args.out or "data")
    man = generate_dataset(cfg, out)
    print(f"wrote {len(man.artifacts)} files to {out}")
    return EXIT_OK


def cmd_train_base(args) -> int:
    cfg = _config(args)
    out = _out(args, "checkpoints")
    info = run_train_base(cfg, args.data, out, resume=args.resume)
    _manifest("train-base", cfg, out, {"train_wall_s": info.get("train_wall_s")})
    print(f"base checkpoint {out / 'base.pt'} step {info['step']} loss {info.get('final_loss')}")
    return EXIT_OK


def cmd_train_control(args) -> int:
    cfg = _config(args)
    out = _out(args, "checkpoints")
    info = run_train_control(cfg, args.data, args.base, out, resume=args.resume)
    _manifest("train-control", cfg, out, {"train_wall_s": info.get("train_wall_s")})
    print(f"control checkpoint {out / 'control.pt'} step {info['step']} loss {info.get('final_loss')}")
    return EXIT_OK


def cmd_denoise(args) -> int:
    cfg = _config(args)
    g = {"w": args.w, "t_c": args.tc, "grad_mode": args.grad_mode, "min_decay": args.min_decay}
    cfg = cfg.updated({"guidance": {k: v for k, v in g.items() if v is not None}})
    if args.T is not None:
        cfg = cfg.updated({"schedule": {"T": args.T}})
    _check_schedule(cfg, args.base)
    out = _out(args, "denoised")
    if args.study:
        jobs = [(Path(args.study), out)]
    elif args.data:
        jobs = [(d / "low", out / d.name) for d in study_dirs(args.data, args.split)]
    else:
        raise ValueError("give --study or --data")
    failed = {}
    for i, (study, dst) in enumerate(jobs):
        seed = cfg.seed if args.sample_seed is None else args.sample_seed
        _, info = run_denoise(cfg, study, args.base, args.ctrl, dst, seed=seed + i)
        if info["failed_frames"]:
            failed[str(study)] = info["failed_frames"]
        print(f"{study}: {info['frames']} frames in {info['sampling_wall_s']:.1f} s")
    _manifest("denoise", cfg, out, {"failed": failed})
    if failed:
        raise NumericalFailure(f"sampling failed for {failed}")
    return EXIT_OK


def _check_schedule(cfg: RunConfig, base_ckpt) -> None:
    ck = read_manifest(Path(base_ckpt).with_suffix(".json"))
    want = cfg.diffusion_schedule().params()
    have = ck["schedule"]
    if any(abs(float(have[k]) - float(want[k])) > 1e-12 for k in want):
        raise ValueError(f"checkpoint schedule {have} does not match requested {want}")


def cmd_kinetics(args) -> int:
    cfg = _config(args)
    out = _out(args, "kinetics")
    study = read_study(args.study)
    labels = read_volume(args.labels)
    if labels.shape != study.spatial_shape:
        raise ValueError("label volume and study differ in shape")
    maps = fit_study(cfg, study, labels, mask=labels > 0)
    write_maps(maps, out, study.voxel_mm)
    _manifest("kinetics", cfg, out)
    for row in maps.roi_summary:
        print(f"{row['roi']}: K1 {row['K1']:.4f} ml/min/g  MBF {row['MBF']:.4f}  Vb {row['Vb']:.3f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _out(args, "evaluation")
    rep = evaluate(cfg, read_study(args.pred), read_study(args.ref), reference=str(args.ref))
    rep.write_csv(out / "metrics.csv")
    _manifest("evaluate", cfg, out)
    agg = rep.aggregate
    print(f"SSIM {agg['ssim']:.4f}  PSNR {agg['psnr_db']:.2f} dB  NMSE {agg['nmse']:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    cfg = _config(args)
    out = _out(args, "report")
    scores, figs = [], []
    for d in study_dirs(args.data, args.split):
        s = load_study(d)
        noisy = counts_to_activity(s.low)
        den_path = Path(args.denoised) / d.name / "denoised.json" if args.denoised else None
        sc_n, maps_n = score_study(cfg, d.name, "noisy", noisy, s)
        scores.append(sc_n)
        sc_n.report.write_csv(out / "metrics" / f"{d.name}_noisy.csv")
        studies = {"noisy": noisy.frames, "clean": s.clean.frames}
        maps = {"truth": s.K1, "noisy": maps_n.K1}
        if den_path is not None and den_path.exists():
            den = read_study(den_path)
            sc_d, maps_d = score_study(cfg, d.name, "denoised", den, s)
            scores.append(sc_d)
            sc_d.report.write_csv(out / "metrics" / f"{d.name}_denoised.csv")
            studies = {"noisy": noisy.frames, "denoised": den.frames, "clean": s.clean.frames}
            maps["denoised"] = maps_d.K1
        if cfg.io.figures:
            figs += _study_figures(cfg, out / "figures", d.name, studies, maps, s)
            trace = Path(args.denoised) / d.name / "traces" / "frame_15.csv" if args.denoised else None
            if trace is not None and trace.exists():
                from .plotting import trace_plot
                from .sampler import read_trace_csv

                figs.append(trace_plot(read_trace_csv(trace), out / "figures" / f"{d.name}_trace.png",
                                       title=f"{d.name} frame 15 sampler trace"))
    if not scores:
        raise ValueError(f"no studies found in {args.data}/{args.split}")
    with open(out / "summary.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        wr.writeheader()
        for sc in scores:
            wr.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in sc.row().items()})
    summary = summarize(scores)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if cfg.io.figures and {"noisy", "denoised"} <= set(summary):
        from .plotting import metric_bars

        figs.append(metric_bars({m: summary[m] for m in ("noisy", "denoised")}, out / "figures" / "metrics.png"))
    (out / "summary.md").write_text(_markdown(summary, scores, figs, out))
    _manifest("report", cfg, out)
    print((out / "summary.md").read_text())
    return EXIT_OK


def _study_figures(cfg, fig_dir: Path, name: str, studies: dict, maps: dict, s) -> list[Path]:
    from .plotting import curve_plot, frame_montage, map_montage

    n_frames = next(iter(studies.values())).shape[0]
    frames = [f for f in cfg.io.montage_frames if f < n_frames]
    mids = s.clean.schedule.midpoints
    paths = [
        frame_montage(studies, frames, fig_dir / f"{name}_frames.png",
                      [f"{mids[f]:.0f} s" for f in frames], reference="clean"),
        map_montage(maps, fig_dir / f"{name}_k1.png", vmax=float(np.nanmax(s.K1)) * 1.2),
    ]
    curves = {}
    for label, frames_ in studies.items():
        curves[f"{label} myocardium"] = frames_[:, s.myocardium].mean(axis=1)
    paths.append(curve_plot(mids, curves, fig_dir / f"{name}_tac.png", title=f"{name} myocardial TAC"))
    return paths


def _markdown(summary: dict, scores, figs, out: Path) -> str:
    lines = ["# Denoising report", "", "| method | PSNR (dB) | SSIM | NMSE | K1 error (%) | NSTD myo | myo/blood |",
             "|---|---|---|---|---|---|---|"]
    for m in ("noisy", "denoised"):
        if m in summary:
            r = summary[m]
            lines.append(f"| {m} | {r['psnr_db']:.2f} | {r['ssim']:.4f} | {r['nmse']:.4f} | "
                         f"{r['k1_error_pct']:.2f} | {r['nstd_myo_static']:.4f} | {r['myo_blood_static']:.3f} |")
    if "delta" in summary:
        d = summary["delta"]
        lines += ["", f"PSNR delta (denoised - noisy): {d['psnr_db']:+.2f} dB", f"SSIM delta: {d['ssim']:+.4f}",
                  f"K1 error delta: {d['k1_error_pct']:+.2f} percentage points"]
        if "psnr_paired_p" in d:
            lines.append(f"paired t-test on per-frame PSNR: t = {d['psnr_paired_t']:.2f}, p = {d['psnr_paired_p']:.3g}")
    lines += ["", f"{len({s.study for s in scores})} studies; PSNR range = max of the clean frame; "
              "SSIM 2D slice-wise; NSTD uses the population standard deviation.", ""]
    for p in figs:
        lines.append(f"![{p.stem}]({p.relative_to(out)})")
    return "\n".join(lines) + "\n"


def _manifest(command: str, cfg: RunConfig, out: Path, extra: dict | None = None) -> Path:
    man = RunManifest(command, cfg.hash(), {"seed": cfg.seed}, extra=extra or {})
    man.add_tree(out)
    name = f"{command}_manifest.json" if command.startswith("train") else "manifest.json"
    return man.write(out, name)


def cmd_schema(args) -> int:
    text = json.dumps(json_schema(), indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="overrides the configured seed")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="decade", parents=[common], description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="simulate training and held-out studies")
    s.add_argument("--n", type=int, help="number of training studies (overrides config)")
    s.add_argument("--n-heldout", type=int, default=0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train-base", parents=[common], help="phase A: unconditional model on mean statics")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("train-control", parents=[common], help="phase B: control branch with frozen base")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--base", type=Path, required=True)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train_control)

    s = sub.add_parser("denoise", parents=[common], help="guided sampling of a study or a dataset split")
    s.add_argument("--study", type=Path, help="study header (.json) to denoise")
    s.add_argument("--data", type=Path, help="dataset directory; denoises every low-count study in --split")
    s.add_argument("--split", default="heldout")
    s.add_argument("--base", type=Path, required=True)
    s.add_argument("--ctrl", type=Path)
    s.add_argument("--w", type=float)
    s.add_argument("--tc", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--grad-mode", choices=("exact_vjp", "jacobian_identity_approx"))
    s.add_argument("--min-decay", type=float)
    s.add_argument("--sample-seed", type=int, help="sampling seed (defaults to the run seed)")
    s.set_defaults(func=cmd_denoise)

    s = sub.add_parser("kinetics", parents=[common], help="voxelwise one-tissue fit")
    s.add_argument("--study", type=Path, required=True)
    s.add_argument("--labels", type=Path, required=True)
    s.set_defaults(func=cmd_kinetics)

    s = sub.add_parser("evaluate", parents=[common], help="per-frame SSIM/PSNR/NMSE against a reference")
    s.add_argument("--pred", type=Path, required=True)
    s.add_argument("--ref", type=Path, required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="metrics, kinetics and figures for a split")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--denoised", type=Path)
    s.add_argument("--split", default="heldout")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("schema", parents=[common], help="print the configuration JSON schema")
    s.set_defaults(func=cmd_schema)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonFiniteLoss, SamplingError, FrozenBaseViolation, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
