import numpy as np
import pytest

from core.numkit import SeededRng
from core.privacy import (
    DEFAULT_ORDERS,
    PrivacyError,
    PrivacyLedger,
    calibrate_sigma,
    compute_rdp,
    default_delta,
    dp_sanitize,
    eps_from_rdp,
    rdp_epsilon,
    rdp_gaussian,
    worst_epsilon,
)


class TestSanitize:
    def test_clip_only(self):
        out = dp_sanitize(np.array([3.0, 4.0]), 0.1, 0.0, SeededRng(0))
        np.testing.assert_allclose(out, [0.06, 0.08])

    def test_noise_scale(self):
        out = dp_sanitize(np.zeros(20000), 0.1, 2.0, SeededRng(1))
        assert out.std() == pytest.approx(0.2, rel=0.05)

    def test_seeded(self):
        g = np.ones(5)
        a = dp_sanitize(g, 1.0, 1.0, SeededRng(3))
        b = dp_sanitize(g, 1.0, 1.0, SeededRng(3))
        np.testing.assert_array_equal(a, b)

    def test_negative_sigma(self):
        with pytest.raises(PrivacyError):
            dp_sanitize(np.ones(2), 1.0, -1.0, SeededRng(0))


class TestAccountant:
    def test_full_batch_matches_closed_form(self):
        for sigma in (0.5, 1.0, 4.0):
            rdp = compute_rdp(1.0, sigma, 1)
            expected = np.asarray(DEFAULT_ORDERS) / (2 * sigma**2)
            np.testing.assert_allclose(rdp, expected, rtol=0, atol=1e-12)

    def test_subsampling_amplifies(self):
        for alpha in (2, 2.5, 8, 32):
            assert rdp_gaussian(0.01, 1.0, alpha) < rdp_gaussian(1.0, 1.0, alpha)

    def test_zero_rate_is_free(self):
        assert rdp_gaussian(0.0, 1.0, 4) == 0.0

    def test_fractional_orders_interpolate(self):
        lo, mid, hi = (rdp_gaussian(0.05, 1.2, a) for a in (2.0, 2.5, 3.0))
        assert lo <= mid <= hi

    def test_monotone_in_rounds(self):
        eps = [rdp_epsilon(0.02, 1.0, t, 1e-5) for t in (10, 100, 300)]
        assert eps[0] < eps[1] < eps[2]

    def test_anti_monotone_in_sigma(self):
        eps = [rdp_epsilon(0.02, s, 100, 1e-5) for s in (0.8, 1.0, 1.5, 3.0)]
        assert all(a > b for a, b in zip(eps, eps[1:]))

    def test_zero_noise_has_no_bound(self):
        with pytest.raises(PrivacyError):
            rdp_epsilon(0.1, 0.0, 10, 1e-5)

    def test_best_order_reported(self):
        eps, order = eps_from_rdp(compute_rdp(1.0, 10.0, 10), 1e-5)
        assert order in DEFAULT_ORDERS
        assert eps == pytest.approx(rdp_epsilon(1.0, 10.0, 10, 1e-5))

    def test_delta_range(self):
        with pytest.raises(PrivacyError):
            eps_from_rdp(np.zeros(len(DEFAULT_ORDERS)), 1.5)


class TestCalibration:
    @pytest.mark.parametrize("target", [0.5, 1.0, 2.0, 16.0])
    def test_round_trip_meets_target(self, target):
        delta = default_delta(1000)
        sigma = calibrate_sigma(target, delta, q=0.05, rounds=300)
        assert rdp_epsilon(0.05, sigma, 300, delta) <= target
        # Not much looser than needed
        assert rdp_epsilon(0.05, 0.99 * sigma, 300, delta) > target

    def test_full_batch(self):
        sigma = calibrate_sigma(1.0, 1e-5, q=1.0, rounds=300)
        assert rdp_epsilon(1.0, sigma, 300, 1e-5) <= 1.0

    def test_bad_target(self):
        with pytest.raises(PrivacyError):
            calibrate_sigma(0.0, 1e-5, 0.1)

    def test_default_delta(self):
        assert default_delta(1000) == 1e-5
        assert default_delta(200_000) == pytest.approx(5e-6)
        with pytest.raises(PrivacyError):
            default_delta(0)


class TestLedger:
    def test_composes_like_repeated_steps(self):
        ledger = PrivacyLedger(1e-5)
        for _ in range(50):
            eps = ledger.record(0.1, 1.1)
        assert ledger.rounds == 50
        assert eps == pytest.approx(rdp_epsilon(0.1, 1.1, 50, 1e-5), rel=1e-9)

    def test_empty_ledger(self):
        assert PrivacyLedger(1e-5).epsilon() == 0.0
        assert worst_epsilon([PrivacyLedger(1e-5)]) is None

    def test_worst_client(self):
        light, heavy = PrivacyLedger(1e-5), PrivacyLedger(1e-5)
        light.record(0.1, 2.0)
        for _ in range(5):
            heavy.record(0.1, 2.0)
        assert worst_epsilon([light, heavy]) == heavy.epsilon()

    def test_merge(self):
        a, b = PrivacyLedger(1e-5), PrivacyLedger(1e-5)
        a.record(0.2, 1.0)
        b.record(0.2, 1.0)
        merged = a.merged(b)
        assert merged.rounds == 2
        assert merged.epsilon() == pytest.approx(rdp_epsilon(0.2, 1.0, 2, 1e-5))

    @pytest.mark.parametrize("q, sigma", [(1.0, 1.0), (0.05, 0.8), (0.01, 2.0)])
    def test_joint_conversion_beats_adding_epsilons(self, q, sigma):
        for first, second in ((1, 1), (5, 20), (30, 3)):
            a, b = PrivacyLedger(1e-5), PrivacyLedger(1e-5)
            for _ in range(first):
                a.record(q, sigma)
            for _ in range(second):
                b.record(q, sigma)
            joint = a.merged(b).epsilon()
            assert joint <= a.epsilon() + b.epsilon() + 1e-12
            assert joint == pytest.approx(rdp_epsilon(q, sigma, first + second, 1e-5))
