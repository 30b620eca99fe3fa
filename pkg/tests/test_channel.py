import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adasplit.channel import (
    ChannelParams,
    NakagamiChannel,
    ShapeCalibrator,
    apply_channel,
    calibrate_m,
    packet_loss_prob,
    packet_loss_prob_closed_form,
    snr_to_sigma,
)
from adasplit.exceptions import CalibrationError, InvalidParameterError
from adasplit.mathcore import RngStream


def _y(shape=(4, 8, 16), seed=0):
    return RngStream(seed).generator.normal(size=shape)


class TestApplyChannel:
    def test_noiseless_awgn_is_identity(self):
        y = _y()
        y_hat, stats = apply_channel(y, ChannelParams.ideal(), RngStream(0))
        np.testing.assert_array_equal(y_hat, y)
        assert stats.loss_fraction == 0.0

    def test_huge_threshold_loses_everything(self):
        y_hat, stats = apply_channel(_y(), ChannelParams(m=1.0, h_th=1e6), RngStream(0))
        assert stats.loss_fraction == 1.0
        assert np.all(y_hat == 0)

    def test_rayleigh_loss_fraction(self):
        y = np.ones(10**6)
        _, stats = apply_channel(y, ChannelParams(m=1.0, omega=1.0, h_th=0.3), RngStream(1))
        assert abs(stats.loss_fraction - (1 - math.exp(-0.09))) < 0.003

    def test_received_elements_are_scaled_signal_plus_noise(self):
        y = _y((1000,), 2)
        params = ChannelParams(m=2.0, sigma=0.0, h_th=0.2)
        y_hat, _ = apply_channel(y, params, RngStream(3))
        # with no noise each surviving element is h * y with h >= h_th
        kept = y_hat != 0
        gain = y_hat[kept] / y[kept]
        assert np.all(gain >= 0.2)

    def test_equalized_variant_keeps_signal_scale(self):
        y = _y((500,), 4)
        params = ChannelParams(m=3.0, sigma=0.0, h_th=0.1, equalize=True)
        y_hat, _ = apply_channel(y, params, RngStream(5))
        kept = y_hat != 0
        np.testing.assert_allclose(y_hat[kept], y[kept])

    def test_per_tensor_gain_shared_within_sequence(self):
        y = np.ones((6, 5, 4))
        y_hat, _ = apply_channel(y, ChannelParams(m=1.0, h_th=0.0, per_tensor=True), RngStream(6))
        for row in y_hat:
            assert np.all(row == row.flat[0])

    @given(st.floats(0.0, 2.0), st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_awgn_never_drops(self, sigma, seed):
        _, stats = apply_channel(_y((3, 7)), ChannelParams("awgn", sigma=sigma), RngStream(seed))
        assert stats.loss_fraction == 0.0

    @given(st.floats(0.2, 10.0), st.floats(0.0, 1.0), st.floats(0.0, 1.5), st.integers(0, 10**6))
    @settings(max_examples=30, deadline=None)
    def test_shape_preserving_and_deterministic(self, m, sigma, h_th, seed):
        y = _y((2, 3, 5))
        params = ChannelParams(m=m, sigma=sigma, h_th=h_th)
        a, sa = apply_channel(y, params, RngStream(seed))
        b, sb = apply_channel(y, params, RngStream(seed))
        assert a.shape == y.shape
        np.testing.assert_array_equal(a, b)
        assert sa == sb

    def test_invalid_parameters(self):
        with pytest.raises(InvalidParameterError):
            ChannelParams(m=0.0)
        with pytest.raises(InvalidParameterError):
            ChannelParams(sigma=-1.0)
        with pytest.raises(InvalidParameterError):
            ChannelParams(mode="rician")

    def test_json_round_trip(self):
        p = ChannelParams(m=2.5, sigma=0.1, h_th=0.4)
        assert ChannelParams.from_dict(p.to_dict()) == p


class TestMonteCarloAgreement:
    @pytest.mark.parametrize("seed", range(5))
    def test_random_triples(self, seed):
        g = RngStream(100 + seed).generator
        m, omega, h_th = g.uniform(0.5, 5.0), g.uniform(0.5, 2.0), g.uniform(0.2, 1.2)
        prob = packet_loss_prob(m, omega, h_th)
        n = 10**6
        _, stats = apply_channel(np.ones(n), ChannelParams(m=m, omega=omega, h_th=h_th), RngStream(seed))
        se = math.sqrt(prob * (1 - prob) / n)
        assert abs(stats.loss_fraction - prob) < 4 * se


class TestPacketLoss:
    def test_zero_threshold(self):
        assert packet_loss_prob(1.0, 1.0, 0.0) == 0.0

    def test_rayleigh_value(self):
        assert abs(packet_loss_prob(1.0, 1.0, 0.3) - 0.086069) < 1e-6

    @given(st.floats(0.3, 20.0), st.floats(0.2, 3.0))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_threshold(self, m, omega):
        assert packet_loss_prob(m, omega, 0.5) > packet_loss_prob(m, omega, 0.3)

    @given(st.floats(0.3, 20.0), st.floats(0.2, 3.0), st.floats(0.01, 2.0))
    @settings(max_examples=40, deadline=None)
    def test_quadrature_matches_incomplete_gamma(self, m, omega, h_th):
        assert abs(packet_loss_prob(m, omega, h_th) - packet_loss_prob_closed_form(m, omega, h_th)) < 1e-8

    def test_invalid(self):
        with pytest.raises(InvalidParameterError):
            packet_loss_prob(0.0, 1.0, 0.5)
        with pytest.raises(InvalidParameterError):
            packet_loss_prob(1.0, 1.0, -0.1)


class TestCalibration:
    def test_round_trip(self):
        m = calibrate_m(0.2, 1.0, 0.5)
        assert abs(packet_loss_prob(m, 1.0, 0.5) - 0.2) < 1e-6

    def test_smaller_target_needs_larger_m(self):
        targets = [0.3, 0.2, 0.1, 0.05, 0.01]
        ms = [calibrate_m(t) for t in targets]
        assert all(a < b for a, b in zip(ms, ms[1:]))

    def test_rayleigh_fixed_point(self):
        p = packet_loss_prob(1.0, 1.0, 0.5)
        assert abs(calibrate_m(p, 1.0, 0.5) - 1.0) < 1e-4

    def test_unreachable_target_reports_bracket(self):
        with pytest.raises(CalibrationError) as exc:
            calibrate_m(0.9)
        assert exc.value.bracket_probs is not None
        with pytest.raises(CalibrationError):
            calibrate_m(0.0)

    @given(st.floats(0.001, 0.35))
    @settings(max_examples=30, deadline=None)
    def test_table_agrees_with_bisection(self, p):
        m_table = ShapeCalibrator()(p)
        m_exact = calibrate_m(p)
        assert abs(packet_loss_prob(m_table, 1.0, 0.5) - p) < 1e-4
        assert m_table == pytest.approx(m_exact, rel=1e-3)

    def test_table_clamps_out_of_range(self):
        cal = ShapeCalibrator()
        lo, hi = cal.achievable
        assert cal(0.0) == pytest.approx(50.0)
        assert cal(0.99) == pytest.approx(0.1)
        assert lo < hi


class TestSnr:
    def test_zero_db(self):
        assert snr_to_sigma(0.0, 1.0) == 1.0

    def test_twenty_db(self):
        assert snr_to_sigma(20.0, 1.0) == pytest.approx(0.1, abs=1e-15)

    def test_minus_six_db(self):
        assert abs(snr_to_sigma(-20 * math.log10(2), 2.0) - 4.0) < 1e-12
        # -6.0206 is 20 log10(2) rounded, which shifts sigma by 1.7e-6
        assert snr_to_sigma(-6.0206, 2.0) == pytest.approx(4.0, rel=1e-6)

    def test_invalid_rms(self):
        with pytest.raises(InvalidParameterError):
            snr_to_sigma(10.0, 0.0)


class TestEstimator:
    def test_transform_matches_function(self):
        y = _y((3, 4))
        ch = NakagamiChannel(m=2.0, sigma=0.1, random_state=3).fit()
        out = ch.transform(y)
        ref, _ = apply_channel(y, ChannelParams(m=2.0, sigma=0.1), RngStream(3).child("channel"))
        np.testing.assert_array_equal(out, ref)
        assert ch.last_stats_ is not None

    def test_params_round_trip(self):
        ch = NakagamiChannel(m=4.0)
        assert ch.get_params()["m"] == 4.0
        ch.set_params(sigma=0.2)
        assert ch.sigma == 0.2
