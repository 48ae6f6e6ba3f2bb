import math

import numpy as np
import pytest
import torch

from decade.diffusion import make_schedule, q_posterior, q_sample
from decade.phantom import DynamicStudy, FrameSchedule, render_frames
from decade.sampler import (
    GuidanceConfig,
    SamplerTrace,
    SamplingError,
    ancestral_sample,
    ancestral_step,
    batch_seed,
    decade_sample,
    denoise_study,
    estimate_x0,
    frame_traces,
    guidance_gradient,
    read_trace_csv,
    step_weight,
)
from helpers import TINY, TINY_2D, tiny_models

SCHED = make_schedule()
SHORT = make_schedule(12, 1e-3, 0.3)


class TestEstimateX0:
    def test_roundtrip_with_true_noise(self):
        g = torch.Generator().manual_seed(0)
        x0 = torch.rand(2, 1, 8, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
        for t in (1, 400, 1000):
            back = estimate_x0(q_sample(x0, t, eps, SCHED), t, eps, SCHED)
            assert (back - x0).abs().max().item() < 1e-6

    def test_zero_noise_estimate(self):
        x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        assert torch.allclose(estimate_x0(x, 300, torch.zeros_like(x), SCHED), x / math.sqrt(SCHED.alpha_bar(300)))

    def test_first_step_nearly_identity(self):
        x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        assert torch.allclose(estimate_x0(x, 1, torch.zeros_like(x), SCHED), x, rtol=1e-4)


class TestAncestralStep:
    def test_zero_noise_is_posterior_mean(self):
        x0, xt = torch.rand(1, 1, 4, 4, 4, dtype=torch.float64), torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        mean, _ = q_posterior(x0, xt, 700, SCHED)
        assert torch.allclose(ancestral_step(xt, 700, x0, torch.zeros_like(xt), SCHED), mean, rtol=1e-14)

    def test_constant_input_against_coefficient_oracle(self):
        t = 321
        ab, abp, b = SCHED.alpha_bars[t - 1], SCHED.alpha_bars[t - 2], SCHED.betas[t - 1]
        coeff = (math.sqrt(abp) * b + math.sqrt(1 - b) * (1 - abp)) / (1 - ab)
        sigma = math.sqrt((1 - abp) / (1 - ab) * b)
        v = torch.full((1, 1, 2, 2, 2), 1.7, dtype=torch.float64)
        z = torch.randn(v.shape, dtype=torch.float64)
        assert torch.allclose(ancestral_step(v, t, v, z, SCHED), 1.7 * coeff + sigma * z, rtol=1e-12)

    def test_final_step_adds_no_noise(self):
        x = torch.randn(1, 1, 2, 2, 2, dtype=torch.float64)
        a = ancestral_step(x, 1, x, torch.randn_like(x), SCHED)
        b = ancestral_step(x, 1, x, None, SCHED)
        assert torch.equal(a, b)


class TestStepWeight:
    def test_first_step_gives_w(self):
        assert step_weight(1000, 500.0, 3.7) * 3.7 == pytest.approx(500.0, rel=1e-14)

    def test_switch_step_decay(self):
        assert step_weight(950, 1.0, 1.0) == pytest.approx(math.exp(-2.5), rel=1e-14)
        assert math.exp(-2.5) == pytest.approx(0.0821, abs=5e-5)

    def test_zero_weight(self):
        assert step_weight(500, 0.0, 2.0) == 0.0

    def test_residual_floor(self):
        assert step_weight(1000, 1.0, 0.0) == pytest.approx(1e12)


def _linear_eps(x, t):
    return torch.zeros_like(x)


class TestGuidanceGradient:
    def test_zero_at_measurement(self):
        base, _ = tiny_models(dtype=torch.float64)
        eps_fn = lambda x, t: base(x, torch.full((x.shape[0],), t))
        x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        with torch.no_grad():
            y = estimate_x0(x, 400, eps_fn(x, 400), SCHED)
        for mode in ("exact_vjp", "jacobian_identity_approx"):
            g, _, r2 = guidance_gradient(y, x, 400, eps_fn, SCHED, mode)
            assert g.abs().max().item() < 1e-12 and r2.item() < 1e-20

    def test_exact_gradient_matches_finite_differences(self):
        # 8-channel network on a 16^3 volume, 5 random coordinates
        base, _ = tiny_models(dtype=torch.float64)
        eps_fn = lambda x, t: base(x, torch.full((x.shape[0],), t))
        g = torch.Generator().manual_seed(1)
        x = torch.randn(1, 1, 16, 16, 16, generator=g, dtype=torch.float64)
        y = torch.rand(1, 1, 16, 16, 16, generator=g, dtype=torch.float64)
        t = 600
        grad, _, _ = guidance_gradient(y, x, t, eps_fn, SCHED, "exact_vjp")

        def f(v):
            with torch.no_grad():
                return ((y - estimate_x0(v, t, eps_fn(v, t), SCHED)) ** 2).sum().item()

        h = 1e-5
        rng = np.random.default_rng(0)
        for _ in range(5):
            idx = (0, 0, *rng.integers(0, 16, size=3).tolist())
            xp, xm = x.clone(), x.clone()
            xp[idx] += h
            xm[idx] -= h
            fd = (f(xp) - f(xm)) / (2 * h)
            assert abs(fd - grad[idx].item()) / abs(fd) < 1e-3

    def test_modes_agree_for_constant_noise_estimate(self):
        x = torch.randn(2, 1, 4, 4, 4, dtype=torch.float64)
        y = torch.rand(2, 1, 4, 4, 4, dtype=torch.float64)
        a, _, ra = guidance_gradient(y, x, 250, _linear_eps, SCHED, "exact_vjp")
        b, _, rb = guidance_gradient(y, x, 250, _linear_eps, SCHED, "jacobian_identity_approx")
        assert torch.allclose(a, b, rtol=1e-12)
        assert torch.allclose(ra, rb)

    def test_shape_mismatch_and_unknown_mode(self):
        x = torch.zeros(1, 1, 4, 4, 4)
        with pytest.raises(ValueError):
            guidance_gradient(torch.zeros(1, 1, 4, 4, 2), x, 5, _linear_eps, SCHED)
        with pytest.raises(ValueError):
            guidance_gradient(x, x, 5, _linear_eps, SCHED, "bogus")


class TestDecadeSample:
    def _y(self, b=2):
        return torch.rand(b, 1, 8, 8, 8, generator=torch.Generator().manual_seed(2))

    def test_no_guidance_no_switch_is_plain_ancestral_sampling(self):
        base, ctrl = tiny_models()
        y = self._y()
        out, trace = decade_sample(y, None, base, None, GuidanceConfig(w=0, t_c=0, T=SHORT.T, seed=3), SHORT)
        ref = ancestral_sample(base, tuple(y.shape), SHORT, seed=3)
        assert torch.equal(out, ref)
        assert np.all(np.isnan(trace.arrays()["grad_norm"]))
        assert np.all(trace.arrays()["rho"] == 0)

    def test_switch_at_t_c(self):
        base, ctrl = tiny_models()
        y = self._y()
        gcfg = GuidanceConfig(w=1.0, t_c=7, T=SHORT.T, decay_rate=0.05, divergence_factor=None)
        _, trace = decade_sample(y, torch.rand(2, 3, 8, 8, 8), base, ctrl, gcfg, SHORT)
        assert trace.t == list(range(12, 0, -1))
        for t, m in zip(trace.t, trace.model):
            assert m == ("ctrl" if t <= 7 else "base")

    def test_switch_at_T_uses_control_throughout(self):
        base, ctrl = tiny_models()
        gcfg = GuidanceConfig(w=0.0, t_c=SHORT.T, T=SHORT.T)
        _, trace = decade_sample(self._y(), torch.rand(2, 3, 8, 8, 8), base, ctrl, gcfg, SHORT)
        assert set(trace.model) == {"ctrl"}

    @pytest.mark.parametrize("mode", ["exact_vjp", "jacobian_identity_approx"])
    def test_trace_weight_times_residual_is_scheduled_weight(self, mode):
        base, ctrl = tiny_models()
        gcfg = GuidanceConfig(w=2.0, t_c=6, T=SHORT.T, grad_mode=mode, divergence_factor=None)
        _, trace = decade_sample(self._y(), torch.rand(2, 3, 8, 8, 8), base, ctrl, gcfg, SHORT)
        a = trace.arrays()
        want = 2.0 * np.exp(-0.05 * (SHORT.T - a["t"]))[:, None]
        assert np.allclose(a["rho"] * a["residual2"], want, rtol=1e-10)
        assert np.all(np.isfinite(a["grad_norm"]))

    def test_seeded_sampling_is_reproducible(self):
        base, ctrl = tiny_models()
        gcfg = GuidanceConfig(w=1.0, t_c=6, T=SHORT.T, seed=11, divergence_factor=None)
        c = torch.rand(2, 3, 8, 8, 8)
        a, _ = decade_sample(self._y(), c, base, ctrl, gcfg, SHORT)
        b, _ = decade_sample(self._y(), c, base, ctrl, gcfg, SHORT)
        assert torch.equal(a, b)

    def test_min_decay_skips_late_guidance(self):
        base, ctrl = tiny_models()
        gcfg = GuidanceConfig(w=1.0, t_c=0, T=SHORT.T, decay_rate=1.0, min_decay=math.exp(-3.5),
                              divergence_factor=None)
        _, trace = decade_sample(self._y(), None, base, None, gcfg, SHORT)
        gn = trace.arrays()["grad_norm"][:, 0]
        guided = np.isfinite(gn)
        assert guided.tolist() == [SHORT.T - t <= 3 for t in trace.t]

    def test_guidance_pulls_toward_measurement(self):
        # with an untrained zero-output network x0_hat = x_t / sqrt(abar), so guidance alone drives the fit
        base, _ = tiny_models(trained=False)
        y = self._y(1)
        free, tf = decade_sample(y, None, base, None, GuidanceConfig(w=0, t_c=0, T=SHORT.T), SHORT)
        pulled, tp = decade_sample(y, None, base, None, GuidanceConfig(w=0.5, t_c=0, T=SHORT.T, decay_rate=0.01,
                                                                        divergence_factor=None), SHORT)
        assert ((pulled - y) ** 2).sum() < ((free - y) ** 2).sum()

    def test_divergence_aborts_with_trace(self):
        base, _ = tiny_models(trained=False)
        gcfg = GuidanceConfig(w=1e6, t_c=0, T=SHORT.T, decay_rate=1e-6, divergence_factor=10.0,
                              divergence_window=2)
        with pytest.raises((SamplingError, FloatingPointError)) as err:
            decade_sample(self._y(1), None, base, None, gcfg, SHORT)
        if isinstance(err.value, SamplingError):
            assert err.value.trace is not None and len(err.value.trace.t) >= 1

    def test_mismatched_T_and_missing_control_rejected(self):
        base, ctrl = tiny_models()
        with pytest.raises(ValueError):
            decade_sample(self._y(), None, base, None, GuidanceConfig(t_c=0, T=1000), SHORT)
        with pytest.raises(ValueError):
            decade_sample(self._y(), None, base, None, GuidanceConfig(t_c=5, T=SHORT.T), SHORT)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GuidanceConfig(t_c=1001)
        with pytest.raises(ValueError):
            GuidanceConfig(w=-1)
        with pytest.raises(ValueError):
            GuidanceConfig(decay_rate=0)
        with pytest.raises(ValueError):
            GuidanceConfig(grad_mode="fd")


def test_trace_csv_roundtrip(tmp_path):
    tr = SamplerTrace()
    tr.record(3, "base", [0.5, 1.0], [2.0, 1.0], [np.nan, 0.1])
    tr.record(2, "ctrl", [0.25, 1.0], [4.0, 1.0], [1.5, 0.1])
    back = read_trace_csv(tr.write_csv(tmp_path / "t.csv", index=0))
    assert back["t"].tolist() == [3, 2]
    assert back["residual2"].tolist() == [0.5, 0.25]
    assert np.isnan(back["grad_norm"][0]) and back["model"].tolist() == ["base", "ctrl"]


@pytest.fixture(scope="module")
def counts_study(small_phantom):
    return render_frames(small_phantom, seed=4)[1]


class TestDenoiseStudy:
    gcfg = GuidanceConfig(w=0.5, t_c=6, T=SHORT.T, seed=5, divergence_factor=None)

    def test_single_frame_study(self, counts_study):
        one = counts_study.replace(frames=counts_study.frames[:1],
                                   schedule=FrameSchedule((0.0,), (float(counts_study.schedule.durations[0]),)))
        base, ctrl = tiny_models()
        res = denoise_study(one, base, ctrl, self.gcfg, SHORT)
        assert res.study.frames.shape == one.frames.shape
        assert np.all(np.isfinite(res.study.frames))
        assert res.study.units == "kBq_per_mL"

    def test_seeded_study_is_bit_identical(self, counts_study):
        sub = counts_study.replace(frames=counts_study.frames[:4],
                                   schedule=FrameSchedule.from_durations(counts_study.schedule.durations[:4]))
        base, ctrl = tiny_models()
        a = denoise_study(sub, base, ctrl, self.gcfg, SHORT, batch_frames=2)
        b = denoise_study(sub, base, ctrl, self.gcfg, SHORT, batch_frames=2)
        assert np.array_equal(a.study.frames, b.study.frames)
        assert a.study.schedule == sub.schedule
        assert sorted(frame_traces(a)) == [0, 1, 2, 3]
        assert a.failures == {}

    def test_batches_draw_independent_noise(self, counts_study):
        same = np.repeat(counts_study.frames[10:11], 2, axis=0)
        sub = counts_study.replace(frames=same, schedule=FrameSchedule.from_durations([10.0, 10.0]))
        base, _ = tiny_models()
        free = GuidanceConfig(w=0, t_c=0, T=SHORT.T, seed=5)
        one = denoise_study(sub, base, None, free, SHORT, batch_frames=1).study.frames
        assert not np.array_equal(one[0], one[1])
        assert batch_seed(5, 0) != batch_seed(5, 1) != batch_seed(6, 1)

    def test_slice_mode(self, counts_study):
        sub = counts_study.replace(frames=counts_study.frames[:2],
                                   schedule=FrameSchedule.from_durations(counts_study.schedule.durations[:2]))
        base, ctrl = tiny_models(TINY_2D)
        res = denoise_study(sub, base, ctrl, self.gcfg, SHORT)
        assert res.slice_mode
        assert res.study.frames.shape == sub.frames.shape
        tr, pos = frame_traces(res)[1]
        assert tr.arrays()["residual2"].shape[1] == sub.frames.shape[1]
        assert pos == sub.frames.shape[1] // 2

    def test_failures_are_recorded(self, counts_study):
        sub = counts_study.replace(frames=counts_study.frames[:2],
                                   schedule=FrameSchedule.from_durations(counts_study.schedule.durations[:2]))
        base, _ = tiny_models(trained=False)
        bad = GuidanceConfig(w=1e9, t_c=0, T=SHORT.T, decay_rate=1e-6, divergence_factor=2.0, divergence_window=1)
        try:
            res = denoise_study(sub, base, None, bad, SHORT)
        except FloatingPointError:
            pytest.skip("overflow surfaced before the divergence check")
        assert set(res.failures) == {0, 1}
        assert np.all(np.isnan(res.study.frames))
        assert res.study.metadata["failed_frames"] == [0, 1]
