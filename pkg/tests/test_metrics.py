import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from decade.metrics import (
    evaluate_frames,
    myo_blood_ratio,
    nmse,
    nstd,
    paired_ttest,
    percentage_error,
    psnr,
    read_report_csv,
    ssim,
)
from decade.phantom import frame_average, mean_static, tissue_tac


class TestNMSE:
    def test_examples(self, rng):
        ref = rng.random((8, 8, 8)) + 0.1
        assert nmse(ref, ref) == 0.0
        assert nmse(np.zeros_like(ref), ref) == 1.0
        assert nmse(1.1 * ref, ref) == pytest.approx(0.01, rel=1e-12)

    def test_zero_reference_and_shape(self):
        with pytest.raises(ValueError):
            nmse(np.ones(4), np.zeros(4))
        with pytest.raises(ValueError):
            nmse(np.ones(4), np.ones(5))


class TestPSNR:
    def test_twenty_db(self):
        ref = np.zeros((10, 10))
        ref[0, 0] = 10.0
        pred = ref + 1.0  # MSE = 1 = range^2 / 100
        assert psnr(pred, ref) == pytest.approx(20.0, abs=1e-12)

    def test_identical_is_infinite(self, rng):
        ref = rng.random((4, 4))
        assert psnr(ref, ref) == math.inf

    def test_two_line_oracle(self, rng):
        ref, pred = rng.random((6, 7, 8)), rng.random((6, 7, 8))
        mse = np.mean((pred - ref) ** 2)
        assert psnr(pred, ref) == pytest.approx(10 * np.log10(ref.max() ** 2 / mse), abs=1e-9)

    def test_decreases_as_nmse_grows(self, rng):
        ref = rng.random((8, 8)) + 0.5
        noise = rng.normal(size=ref.shape)
        pairs = [(nmse(ref + a * noise, ref), psnr(ref + a * noise, ref)) for a in (0.01, 0.1, 0.3, 1.0)]
        assert all(p1 > p2 for (_, p1), (_, p2) in zip(pairs, pairs[1:]))
        assert all(n1 < n2 for (n1, _), (n2, _) in zip(pairs, pairs[1:]))


class TestSSIM:
    def test_identical(self, rng):
        v = rng.random((3, 16, 16))
        assert ssim(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_offset_penalised(self, rng):
        v = rng.random((16, 16))
        assert ssim(v + 5.0, v) < 1.0

    @pytest.mark.parametrize("shape", [(24, 24), (4, 24, 24), (24, 16, 20)])
    def test_matches_reference_implementation(self, rng, shape):
        ref = rng.random(shape)
        pred = ref + 0.2 * rng.normal(size=shape)
        rng_ = ref.max()
        slices = [ref] if len(shape) == 2 else list(ref)
        preds = [pred] if len(shape) == 2 else list(pred)
        oracle = np.mean([
            structural_similarity(p, r, data_range=rng_, gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False)
            for p, r in zip(preds, slices)
        ])
        assert ssim(pred, ref) == pytest.approx(oracle, abs=1e-6)

    def test_symmetric_for_fixed_range(self, rng):
        a, b = rng.random((2, 20, 20)), rng.random((2, 20, 20))
        assert ssim(a, b, data_range=1.0) == pytest.approx(ssim(b, a, data_range=1.0), abs=1e-12)

    def test_bounded(self, rng):
        a, b = rng.random((20, 20)), -rng.random((20, 20))
        assert -1.0 <= ssim(a, b, data_range=1.0) <= 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ValueError):
            ssim(np.ones((8, 8)), np.ones((8, 8)))


class TestNSTD:
    def test_examples(self):
        m = np.ones(4, bool)
        assert nstd(np.full(4, 2.0), m) == 0.0
        assert nstd(np.array([1.0, 3.0, 1.0, 3.0]), m) == pytest.approx(0.5)

    @given(v=arrays(np.float64, 20, elements=st.floats(0.1, 100)), s=st.floats(0.01, 1000))
    def test_scale_invariant(self, v, s):
        m = np.ones(20, bool)
        assert nstd(s * v, m) == pytest.approx(nstd(v, m), rel=1e-9, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            nstd(np.ones(3), np.zeros(3, bool))
        with pytest.raises(ValueError):
            nstd(np.array([1.0, -1.0]), np.ones(2, bool))


class TestPercentageError:
    def test_examples(self):
        assert percentage_error(1.0, 1.0) == 0.0
        assert percentage_error(1.15, 1.0) == pytest.approx(15.0)
        assert percentage_error(0.85, 1.0) == pytest.approx(15.0)

    def test_nonpositive_truth_rejected(self):
        with pytest.raises(ValueError):
            percentage_error(1.0, 0.0)


class TestMyoBlood:
    def test_examples(self):
        v = np.array([2.0, 2.0, 1.0, 1.0])
        myo, lv = np.array([1, 1, 0, 0], bool), np.array([0, 0, 1, 1], bool)
        assert myo_blood_ratio(v, myo, lv) == 2.0
        assert myo_blood_ratio(np.ones(4), myo, lv) == 1.0
        with pytest.raises(ValueError):
            myo_blood_ratio(v, np.zeros(4, bool), lv)

    def test_noiseless_phantom_against_compartment_model(self, desk_phantom):
        from decade.phantom import LV_CAVITY, MYOCARDIUM

        tr = desk_phantom
        static = mean_static(tr.clean)
        sched, t, cb = tr.clean.schedule, tr.t_fine, tr.cb_fine
        sel = sched.starts >= 120.0
        d = sched.durations[sel]

        def static_of(lab):
            k = tr.spec.tissues[lab]
            tac = frame_average(tissue_tac(k.K1, k.k2, k.Vb, cb, t), t, sched)
            return float((tac[sel] * d).sum() / d.sum())

        want = static_of(MYOCARDIUM) / static_of(LV_CAVITY)
        myo = tr.labels == MYOCARDIUM
        assert myo_blood_ratio(static, myo, tr.lv_mask) == pytest.approx(want, rel=0.01)


def test_metrics_ignore_voxel_order(rng):
    ref = rng.random((16, 16)) + 0.1
    pred = ref + 0.1 * rng.normal(size=ref.shape)
    perm = rng.permutation(ref.size)
    p2, r2 = pred.ravel()[perm].reshape(ref.shape), ref.ravel()[perm].reshape(ref.shape)
    assert nmse(p2, r2) == pytest.approx(nmse(pred, ref), rel=1e-12)
    assert psnr(p2, r2) == pytest.approx(psnr(pred, ref), rel=1e-12)
    m = np.ones(ref.shape, bool)
    assert nstd(r2, m) == pytest.approx(nstd(ref, m), rel=1e-12)


def test_paired_ttest_oracle():
    from scipy import stats

    a, b = np.array([1.0, 2.0, 3.5, 4.0]), np.array([1.5, 2.1, 3.9, 4.8])
    t, p = paired_ttest(a, b)
    d = a - b
    t_oracle = d.mean() / (d.std(ddof=1) / math.sqrt(len(d)))
    assert t == pytest.approx(t_oracle, rel=1e-12)
    assert p == pytest.approx(2 * stats.t.sf(abs(t_oracle), len(d) - 1), rel=1e-9)


def test_evaluate_frames_report(tmp_path, rng):
    ref = rng.random((3, 12, 12, 12)) + 0.1
    ref[1] = 0.0
    pred = ref + 0.05 * rng.normal(size=ref.shape)
    rep = evaluate_frames(pred, ref, reference="clean")
    assert [r["frame"] for r in rep.frame_rows] == [0, 2]
    assert rep.aggregate["psnr_db"] == pytest.approx(np.mean([r["psnr_db"] for r in rep.frame_rows]))
    rows = read_report_csv(rep.write_csv(tmp_path / "m.csv"))
    assert [r["frame"] for r in rows] == ["0", "2", "aggregate"]
    assert (tmp_path / "m.csv").read_text().startswith("# metric_report_version=1 reference=clean")
