"""Quantizer grid properties, model wrapping, and block calibration."""

import numpy as np
import pytest

from qsemlink import tensor as T
from qsemlink.denoiser import DenoiserConfig, DenoiserNet, enumerate_blocks
from qsemlink.optim import Adam
from qsemlink.quant import (
    AdaRoundHyper,
    CalibrationError,
    QuantizerParams,
    calibrate_block,
    calibrate_model,
    collect_block_inputs,
    fit_range,
    integer_codes,
    quantize_dequantize,
    wrap_model,
    _init_logits,
    _qdq_soft,
)
from qsemlink.rng import RngStream
from qsemlink.tensor import Tensor, no_grad


def _rand_quantizer(rng) -> QuantizerParams:
    bits = int(rng.integers(2, 9))
    scale = float(10.0 ** rng.uniform(-3, 0.5))
    return QuantizerParams(bits, scale, -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)


class TestQuantizeDequantize:
    def test_zero_fixed_point(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = _rand_quantizer(rng)
            assert quantize_dequantize(np.array([0.0]), q)[0] == 0.0

    def test_hand_example_round(self):
        q = QuantizerParams(8, 0.1, -128, 127)
        assert quantize_dequantize(np.array([0.37]), q)[0] == pytest.approx(0.4, rel=1e-6)

    def test_hand_example_clip(self):
        q = QuantizerParams(8, 0.1, -128, 127)
        assert quantize_dequantize(np.array([100.0]), q)[0] == pytest.approx(12.7, rel=1e-6)

    def test_round_trip_bound_in_range(self):
        """|w - w_hat| <= s/2 for in-clip-range w, 1e4 randomized cases."""
        rng = np.random.default_rng(1)
        q = QuantizerParams(8, float(10.0 ** rng.uniform(-2, 0)), -128, 127)
        w = rng.uniform((q.c_min + 0.5) * q.scale, (q.c_max - 0.5) * q.scale, 10_000).astype(np.float32)
        err = np.abs(w - quantize_dequantize(w, q))
        assert err.max() <= q.scale / 2 + 1e-6 * q.scale

    def test_adaround_bound_in_range(self):
        """Hardened adaptive rounding stays within one step of w."""
        rng = np.random.default_rng(2)
        scale = 0.07
        w = rng.uniform(-120 * scale, 120 * scale, 10_000).astype(np.float32)
        logits = rng.standard_normal(w.shape).astype(np.float32)
        q = QuantizerParams(8, scale, -128, 127, mode="adaround", rounding_logits=logits)
        err = np.abs(w - quantize_dequantize(w, q))
        assert err.max() <= scale + 1e-6 * scale

    def test_idempotence_exact(self):
        """quantize_dequantize(w_hat) == w_hat bit-for-bit, 1e4 cases."""
        rng = np.random.default_rng(3)
        for bits in (2, 4, 8):
            q = QuantizerParams(bits, float(10.0 ** rng.uniform(-2, 0)), -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
            w = rng.standard_normal(10_000).astype(np.float32) * q.scale * q.c_max
            w_hat = quantize_dequantize(w, q)
            np.testing.assert_array_equal(quantize_dequantize(w_hat, q), w_hat)

    def test_monotone_step_grid(self):
        """w_hat is a nondecreasing step function of w, 1e4 sorted cases."""
        rng = np.random.default_rng(4)
        q = _rand_quantizer(rng)
        w = np.sort(rng.uniform(-2.0, 2.0, 10_000).astype(np.float32))
        w_hat = quantize_dequantize(w, q)
        assert np.all(np.diff(w_hat) >= 0)
        assert len(np.unique(w_hat)) <= q.c_max - q.c_min + 1

    def test_clip_activates_out_of_range(self):
        """Values beyond the grid saturate at s*c_min / s*c_max, 1e4 cases."""
        rng = np.random.default_rng(5)
        q = QuantizerParams(4, 0.25, -8, 7)
        hi = rng.uniform((q.c_max + 1) * q.scale, 10 * q.c_max * q.scale, 5000).astype(np.float32)
        lo = rng.uniform(10 * q.c_min * q.scale, (q.c_min - 1) * q.scale, 5000).astype(np.float32)
        np.testing.assert_allclose(quantize_dequantize(hi, q), np.float32(q.scale * q.c_max))
        np.testing.assert_allclose(quantize_dequantize(lo, q), np.float32(q.scale * q.c_min))

    def test_invalid_scale_rejected(self):
        with pytest.raises(ValueError):
            QuantizerParams(8, 0.0, -128, 127)
        with pytest.raises(ValueError):
            QuantizerParams(8, -0.5, -128, 127)

    def test_clip_range_must_fit_bits(self):
        with pytest.raises(ValueError):
            QuantizerParams(2, 0.1, -3, 3)


class TestFitRange:
    def test_minmax_symmetric_example(self):
        q = fit_range(np.array([-1.0, 1.0], dtype=np.float32), 8, "minmax")
        assert q.scale == pytest.approx(1 / 127)
        assert (q.c_min, q.c_max) == (-128, 127)

    def test_two_bit_grid(self):
        q = fit_range(np.array([0.5, -0.5], dtype=np.float32), 2)
        assert (q.c_min, q.c_max) == (-2, 1)
        codes = integer_codes(np.array([-1.0, -0.4, 0.0, 0.4, 1.0], dtype=np.float32), q)
        assert set(codes.tolist()) <= {-2, -1, 0, 1}

    def test_mse_grid_never_worse_than_minmax(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            w = (rng.standard_normal(128) * 10.0 ** rng.uniform(-2, 1)).astype(np.float32)
            qa = fit_range(w, 4, "minmax")
            qb = fit_range(w, 4, "mse_grid")
            ea = float(np.sum((w - quantize_dequantize(w, qa)) ** 2))
            eb = float(np.sum((w - quantize_dequantize(w, qb)) ** 2))
            assert eb <= ea + 1e-9

    def test_all_zero_sentinel(self):
        q = fit_range(np.zeros(8, dtype=np.float32), 8)
        assert q.scale == 1.0 and q.all_zero

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            fit_range(np.ones(4, dtype=np.float32), 8, "secret")


@pytest.fixture(scope="module")
def wrapped():
    cfg = DenoiserConfig(cond_channels=4, base_width=16, depth=2, time_embed_dim=32)
    model = DenoiserNet(cfg, RngStream(21, "init"))
    # give the zero-initialized output conv a real range
    model.params["out_conv.w"].copy_(RngStream(22, "probe").normal(model.params["out_conv.w"].shape) * 0.05)
    return model, wrap_model(model, 8, split_enabled=True)


class TestWrapModel:
    def test_passthrough_is_bitwise_identical(self, wrapped):
        model, _ = wrapped
        q32 = wrap_model(model, 32)
        x = RngStream(1, "x").normal((2, 3, 16, 16))
        y = RngStream(2, "y").normal((2, 4, 16, 16))
        with no_grad():
            a = model(x, 3, y)
            b = q32(x, 3, y)
        np.testing.assert_array_equal(a.eps_hat.data, b.eps_hat.data)
        np.testing.assert_array_equal(a.v_hat.data, b.v_hat.data)
        assert q32.quantizer_count() == 0

    def test_quantizer_count_bookkeeping(self, wrapped):
        model, qm = wrapped
        n_weights = len(model.weight_tensor_names())
        n_branches = sum(len(b.branch_channels) for b in enumerate_blocks(model) if b.concat_input)
        assert qm.quantizer_count() == n_weights + n_branches

    def test_without_split_count_is_weights_only(self, wrapped):
        model, _ = wrapped
        qm = wrap_model(model, 8, split_enabled=False)
        assert qm.quantizer_count() == len(model.weight_tensor_names())

    def test_biases_and_norms_stay_full_precision(self, wrapped):
        model, qm = wrapped
        quantized = set(qm.tensor_q)
        for name in model.params:
            if name.endswith(".w"):
                assert name in quantized
            else:
                assert name not in quantized

    def test_branch_scales_track_range_asymmetry(self, wrapped):
        model, _ = wrapped
        skewed = DenoiserNet(model.config, RngStream(5, "i2"))
        w = skewed.params["up1.conv1.w"]
        wd = w.data.copy()
        wd[:, : enumerate_blocks(skewed).by_name("up1").branch_channels[0]] *= 10.0
        w.copy_(wd)
        qm = wrap_model(skewed, 8, split_enabled=True)
        s_up = qm.branch_q[("up1", 0)].scale
        s_skip = qm.branch_q[("up1", 1)].scale
        assert s_up / s_skip > 5.0

    def test_split_equivalence(self, wrapped):
        """Quantizing branch slices then concatenating equals concatenating
        then applying per-branch quantizers to their slices."""
        _, qm = wrapped
        wname = "up1.conv1.w"
        w = qm.shadow[wname]
        whole = qm.quantized_value(wname)
        parts = []
        for qp, sl in qm.segments(wname):
            parts.append(quantize_dequantize(w[:, sl], qp))
        np.testing.assert_array_equal(np.concatenate(parts, axis=1), whole)

    def test_quantized_forward_close_but_not_equal(self, wrapped):
        model, qm = wrapped
        x = RngStream(3, "x").normal((1, 3, 16, 16))
        y = RngStream(4, "y").normal((1, 4, 16, 16))
        with no_grad():
            a = model(x, 3, y).eps_hat.data
            b = qm(x, 3, y).eps_hat.data
        assert not np.array_equal(a, b)
        assert float(np.abs(a - b).mean()) < 0.05


class TestAdaRoundMechanics:
    def test_exactly_representable_weights_stay_fixed(self):
        scale = 0.125
        q = QuantizerParams(8, scale, -128, 127)
        w = (np.arange(-20, 21, dtype=np.float32) * scale).astype(np.float32)
        np.testing.assert_array_equal(quantize_dequantize(w, q), w)
        logits = _init_logits(w, q)
        hard = QuantizerParams(8, scale, -128, 127, mode="adaround", rounding_logits=logits)
        np.testing.assert_array_equal(quantize_dequantize(w, hard), w)

    def test_single_weight_matches_bruteforce(self):
        """With no rounding regularizer, the learned direction matches a
        brute-force scan over floor vs ceil."""
        q = QuantizerParams(8, 0.1, -128, 127)
        xin = np.array([[2.0]], dtype=np.float32)
        for w0, target_w in [(0.37, 0.31), (0.33, 0.39), (-0.92, -0.87), (-0.88, -0.94)]:
            w = np.array([[w0]], dtype=np.float32)
            lo = np.floor(w0 / 0.1) * 0.1
            hi = lo + 0.1
            target = np.float32(target_w) * xin
            best = min((lo, hi), key=lambda c: float(np.sum((np.float32(c) * xin - target) ** 2)))

            alpha = Tensor(_init_logits(w, q), requires_grad=True)
            log_s = Tensor(np.float32(np.log(0.1)), requires_grad=True)
            opt = Adam([([alpha], 0.1), ([log_s], 0.0)])
            for _ in range(150):
                out = Tensor(xin) * _qdq_soft(w, alpha, log_s, q)
                loss = T.mean(T.square(out - Tensor(target)))
                opt.zero_grad()
                T.backward(loss)
                opt.step()
            learned = (np.floor(w0 / 0.1) + (1.0 if alpha.data[0, 0] >= 0 else 0.0)) * 0.1
            assert learned == pytest.approx(best, abs=1e-6), (w0, target_w)


@pytest.fixture(scope="module")
def calib_rig():
    """Small wrapped model plus synthetic calibration samples."""
    from qsemlink.calibset import CalibrationSample

    cfg = DenoiserConfig(cond_channels=4, base_width=16, depth=1, time_embed_dim=16)
    model = DenoiserNet(cfg, RngStream(31, "init"))
    model.params["out_conv.w"].copy_(RngStream(32, "probe").normal(model.params["out_conv.w"].shape) * 0.05)
    stream = RngStream(33, "samples")
    samples = [
        CalibrationSample(stream.normal((3, 16, 16)), int(stream.integers(0, 20, ())), stream.normal((4, 16, 16)), 20.0)
        for _ in range(24)
    ]
    return model, samples


class TestCalibration:
    def test_zero_steps_equals_nearest(self, calib_rig):
        model, samples = calib_rig
        qm = wrap_model(model, 6, split_enabled=True)
        nearest_values = {n: qm.quantized_value(n) for n in qm.tensor_q}
        calibrate_model(qm, samples, AdaRoundHyper(steps=0, seed=1))
        for n in qm.tensor_q:
            np.testing.assert_array_equal(qm.quantized_value(n), nearest_values[n])

    def test_block_report_complete_and_ordered(self, calib_rig):
        model, samples = calib_rig
        qm = wrap_model(model, 6, split_enabled=True)
        results = calibrate_model(qm, samples, AdaRoundHyper(steps=4, batch=8, seed=2))
        assert [r.block for r in results] == [b.name for b in enumerate_blocks(model)]

    def test_calibration_never_hurts_blocks(self, calib_rig):
        """Hardened block reconstruction MSE <= nearest-rounding MSE on the
        held-out inputs, for every block (4-bit, where rounding matters)."""
        model, samples = calib_rig
        qm = wrap_model(model, 4, split_enabled=True)
        results = calibrate_model(qm, samples, AdaRoundHyper(steps=120, batch=8, seed=3))
        for r in results:
            assert r.calibrated_mse <= r.nearest_mse + 1e-12, r

    def test_calibration_improves_some_block(self, calib_rig):
        model, samples = calib_rig
        qm = wrap_model(model, 4, split_enabled=True)
        results = calibrate_model(qm, samples, AdaRoundHyper(steps=120, batch=8, seed=4))
        assert any(r.calibrated_mse < r.nearest_mse and not r.reverted for r in results)

    def test_empty_inputs_rejected(self, calib_rig):
        model, _ = calib_rig
        qm = wrap_model(model, 8)
        block = enumerate_blocks(model).blocks[0]
        with pytest.raises(CalibrationError):
            calibrate_block(qm, block, [], AdaRoundHyper(steps=1))

    def test_nan_divergence_aborts_with_block_name(self, calib_rig):
        model, samples = calib_rig
        qm = wrap_model(model, 8)
        qm.shadow["mid.conv1.w"] = qm.shadow["mid.conv1.w"].copy()
        qm.shadow["mid.conv1.w"][0, 0, 0, 0] = np.nan
        block = enumerate_blocks(model).by_name("mid")
        inputs = collect_block_inputs(qm, samples, "mid")
        with pytest.raises(CalibrationError, match="mid"):
            calibrate_block(qm, block, inputs, AdaRoundHyper(steps=2, seed=5))

    def test_passthrough_cannot_calibrate(self, calib_rig):
        model, samples = calib_rig
        qm = wrap_model(model, 32)
        with pytest.raises(CalibrationError):
            calibrate_model(qm, samples, AdaRoundHyper(steps=1))


class TestActivationQuantMode:
    def test_activation_ranges_fit_and_apply(self, calib_rig):
        model, samples = calib_rig
        qm = wrap_model(model, 8, split_enabled=False)
        batches = [(np.stack([s.x_t for s in samples[:8]]), np.array([s.t for s in samples[:8]]), np.stack([s.y_noisy for s in samples[:8]]))]
        qm.fit_activation_ranges(batches)
        assert qm.act_quant_enabled
        assert len(qm.act_q) == len(enumerate_blocks(model).blocks)
        x, t, y = batches[0]
        with no_grad():
            out = qm(x, t, y)
        assert np.isfinite(out.eps_hat.data).all()
