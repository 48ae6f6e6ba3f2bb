"""End-to-end command line runs on a tiny configuration (16^3, T=20, a few training steps)."""

import json
import shutil

import numpy as np
import pytest
import yaml

from decade.cli import main
from decade.io import read_study, read_volume
from decade.pipeline import dataset_fingerprint, read_manifest
from decade.sampler import ancestral_sample, batch_seed
from decade.training import load_base

TINY_CFG = {
    "phantom": {"n_studies": 2, "n_heldout": 1, "dims": [16, 16, 16], "voxel_mm": 6.0},
    "schedule": {"T": 20},
    "network": {"base_channels": 4},
    "training_a": {"steps": 5, "checkpoint_every": 5, "warmup_steps": 2},
    "training_b": {"steps": 5, "checkpoint_every": 5, "warmup_steps": 2},
    "guidance": {"t_c": 15},
    "io": {"montage_frames": [0, 10, 29]},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """phantom -> train-base -> train-control -> denoise -> report, once per module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY_CFG))
    with pytest.MonkeyPatch.context() as mp:
        mp.delenv("DECADE_CACHE", raising=False)
        c = ["--config", str(cfg)]
        assert main(["phantom", *c, "--out", str(root / "data")]) == 0
        assert main(["train-base", *c, "--data", str(root / "data"), "--out", str(root / "ck")]) == 0
        assert main(["train-control", *c, "--data", str(root / "data"), "--base", str(root / "ck" / "base.pt"),
                     "--out", str(root / "ck")]) == 0
        assert main(["denoise", *c, "--data", str(root / "data"), "--base", str(root / "ck" / "base.pt"),
                     "--ctrl", str(root / "ck" / "control.pt"), "--out", str(root / "den")]) == 0
        assert main(["report", *c, "--data", str(root / "data"), "--denoised", str(root / "den"),
                     "--out", str(root / "rep")]) == 0
    return root


def _study_dir(run, split="heldout"):
    return next((run / "data" / split).iterdir())


def _hashes(path):
    return read_manifest(path)["artifacts"]


def test_phantom_output_roundtrips(run):
    d = _study_dir(run)
    low = read_study(d / "low.json")
    assert low.frames.shape == (30, 16, 16, 16)
    assert low.count_fraction == pytest.approx(0.15)
    assert json.loads((d / "low.json").read_text())["count_fraction"] == pytest.approx(0.15)
    assert read_study(d / "full.json").count_fraction == 1.0
    man = read_manifest(run / "data")
    assert len(man["splits"]["train"]) == 2
    for rel in man["artifacts"]:
        assert (run / "data" / rel).is_file()


def test_phantom_is_idempotent(run, tmp_path):
    assert main(["phantom", "--config", str(run / "tiny.yaml"), "--out", str(tmp_path / "again")]) == 0
    a, b = _hashes(run / "data"), _hashes(tmp_path / "again")
    a.pop("config.json", None), b.pop("config.json", None)
    assert a == b


def test_dataset_fingerprint_ignores_the_copied_config(run, tmp_path):
    shutil.copytree(run / "data", tmp_path / "d")
    before = dataset_fingerprint(tmp_path / "d")
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    man["artifacts"]["config.json"] = "0" * 64
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(man))
    assert dataset_fingerprint(tmp_path / "d") == before
    man["artifacts"][next(k for k in man["artifacts"] if k.endswith(".raw"))] = "0" * 64
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(man))
    assert dataset_fingerprint(tmp_path / "d") != before


def test_phantom_refuses_non_empty_directory(run):
    assert main(["phantom", "--config", str(run / "tiny.yaml"), "--out", str(run / "data")]) == 2


def test_training_is_idempotent(run, tmp_path, monkeypatch):
    monkeypatch.delenv("DECADE_CACHE", raising=False)
    assert main(["train-base", "--config", str(run / "tiny.yaml"), "--data", str(run / "data"),
                 "--out", str(tmp_path)]) == 0
    a = json.loads((run / "ck" / "base.json").read_text())
    b = json.loads((tmp_path / "base.json").read_text())
    assert a["param_hash"] == b["param_hash"] and a["step"] == b["step"] == 5
    assert (run / "ck" / "base_log.csv").exists()
    ctrl = json.loads((run / "ck" / "control.json").read_text())
    assert ctrl["base_checkpoint_hash"] and ctrl["step"] == 5
    assert (run / "ck" / "train-base_manifest.json").exists()


def test_denoise_writes_one_trace_per_frame(run):
    d = run / "den" / _study_dir(run).name
    den = read_study(d / "denoised.json")
    assert den.frames.shape == (30, 16, 16, 16) and np.all(np.isfinite(den.frames))
    man = read_manifest(run / "den")
    traces = [k for k in man["artifacts"] if "/traces/" in k]
    assert len(traces) == 30
    info = json.loads((d / "denoise.json").read_text())
    assert info["failed_frames"] == [] and info["guidance"]["w"] == 500


def test_denoise_is_idempotent_and_cache_reuses(run, tmp_path, monkeypatch):
    monkeypatch.setenv("DECADE_CACHE", str(tmp_path / "cache"))
    (tmp_path / "cache").mkdir()
    study = _study_dir(run) / "low.json"
    args = ["denoise", "--config", str(run / "tiny.yaml"), "--study", str(study),
            "--base", str(run / "ck" / "base.pt"), "--ctrl", str(run / "ck" / "control.pt")]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    ref = (run / "den" / _study_dir(run).name / "denoised.raw").read_bytes()
    assert (tmp_path / "a" / "denoised.raw").read_bytes() == ref
    assert (tmp_path / "b" / "denoised.raw").read_bytes() == ref
    assert len(list((tmp_path / "cache").iterdir())) == 1


def test_unguided_unswitched_denoise_is_ancestral_sampling(run, tmp_path, monkeypatch):
    monkeypatch.delenv("DECADE_CACHE", raising=False)
    study = _study_dir(run) / "low.json"
    assert main(["denoise", "--config", str(run / "tiny.yaml"), "--study", str(study), "--w", "0", "--tc", "0",
                 "--base", str(run / "ck" / "base.pt"), "--sample-seed", "7", "--out", str(tmp_path)]) == 0
    info = json.loads((tmp_path / "denoise.json").read_text())
    base, _ = load_base(run / "ck" / "base")
    from decade.config import load_config

    sched = load_config(run / "tiny.yaml").diffusion_schedule()
    x = ancestral_sample(base, (30, 1, 16, 16, 16), sched, seed=batch_seed(7, 0))[:, 0].double().numpy()
    want = (x * np.asarray(info["scales"])[:, None, None, None]).astype(np.float32)
    got = np.fromfile(tmp_path / "denoised.raw", dtype="<f4").reshape(want.shape)
    assert np.array_equal(got, want)


def test_evaluate_identity(run, tmp_path):
    clean = _study_dir(run) / "truth" / "clean.json"
    assert main(["evaluate", "--pred", str(clean), "--ref", str(clean), "--out", str(tmp_path)]) == 0
    rows = [ln.split(",") for ln in (tmp_path / "metrics.csv").read_text().splitlines()[2:]]
    for row in rows:
        assert float(row[1]) == pytest.approx(1.0, abs=1e-12)
        assert float(row[3]) == 0.0


def test_evaluate_rejects_schedule_mismatch(run, tmp_path):
    d = _study_dir(run)
    other = tmp_path / "short"
    hdr = json.loads((d / "truth" / "clean.json").read_text())
    hdr["frame_durations_s"] = [hdr["frame_durations_s"][0] + 1] + hdr["frame_durations_s"][1:]
    hdr["frame_starts_s"] = [0.0] + [s + 1 for s in hdr["frame_starts_s"][1:]]
    other.mkdir()
    (other / "s.json").write_text(json.dumps(hdr))
    shutil.copy(d / "truth" / "clean.raw", other / "s.raw")
    assert main(["evaluate", "--pred", str(other / "s.json"), "--ref", str(d / "truth" / "clean.json"),
                 "--out", str(tmp_path / "ev")]) == 2


def test_kinetics_on_noiseless_truth(run, tmp_path):
    d = _study_dir(run)
    assert main(["kinetics", "--study", str(d / "truth" / "clean.json"), "--labels", str(d / "truth" / "labels"),
                 "--out", str(tmp_path)]) == 0
    labels = read_volume(d / "truth" / "labels")
    truth = read_volume(d / "truth" / "K1")
    k1 = read_volume(tmp_path / "K1")
    myo = np.isin(labels, (1, 2))
    assert abs(k1[myo].mean() / truth[myo].mean() - 1) < 0.02
    assert (tmp_path / "roi.csv").read_text().startswith("roi,K1,k2,Vb,MBF,n_voxels,residual")


def test_report_outputs(run):
    rep = run / "rep"
    for name in ("summary.csv", "summary.json", "summary.md", "manifest.json"):
        assert (rep / name).is_file()
    summary = json.loads((rep / "summary.json").read_text())
    assert {"noisy", "denoised", "delta"} <= set(summary)
    pngs = sorted(p.name for p in (rep / "figures").glob("*.png"))
    assert "metrics.png" in pngs and any(p.endswith("_frames.png") for p in pngs)
    for kind in ("_k1.png", "_tac.png", "_trace.png"):
        assert any(p.endswith(kind) for p in pngs)
    for p in (rep / "figures").glob("*.png"):
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    header = (rep / "summary.csv").read_text().splitlines()[0]
    assert header.startswith("study,method")


def test_report_is_idempotent(run, tmp_path):
    assert main(["report", "--config", str(run / "tiny.yaml"), "--data", str(run / "data"),
                 "--denoised", str(run / "den"), "--out", str(tmp_path)]) == 0
    a, b = _hashes(run / "rep"), _hashes(tmp_path)
    assert a == b


class TestExitCodes:
    def test_misspelled_config_key(self, tmp_path, capsys):
        (tmp_path / "bad.yaml").write_text("guidance: {t_cc: 900}\n")
        assert main(["phantom", "--config", str(tmp_path / "bad.yaml"), "--out", str(tmp_path / "d")]) == 2
        assert "guidance.t_cc" in capsys.readouterr().err
        assert not (tmp_path / "d").exists()

    def test_missing_inputs(self, tmp_path):
        assert main(["train-base", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "ck")]) == 2
        assert main(["report", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2

    def test_schedule_mismatch_with_checkpoint(self, run, tmp_path):
        study = _study_dir(run) / "low.json"
        assert main(["denoise", "--config", str(run / "tiny.yaml"), "--study", str(study), "--T", "30",
                     "--base", str(run / "ck" / "base.pt"), "--ctrl", str(run / "ck" / "control.pt"),
                     "--out", str(tmp_path)]) == 2

    def test_sampling_blow_up_is_a_numerical_failure(self, run, tmp_path, monkeypatch):
        monkeypatch.delenv("DECADE_CACHE", raising=False)
        study = _study_dir(run) / "low.json"
        code = main(["denoise", "--config", str(run / "tiny.yaml"), "--study", str(study), "--w", "1e38",
                     "--base", str(run / "ck" / "base.pt"), "--ctrl", str(run / "ck" / "control.pt"),
                     "--out", str(tmp_path)])
        assert code == 3
        assert json.loads((tmp_path / "denoise.json").read_text())["failed_frames"]


def test_schema_command(tmp_path):
    assert main(["schema", "--out", str(tmp_path / "schema.json")]) == 0
    schema = json.loads((tmp_path / "schema.json").read_text())
    assert "guidance" in schema["properties"]
