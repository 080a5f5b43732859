import numpy as np
import pytest

from fedring.dp import (
    MomentLedger,
    PrivacySpec,
    calibrate_sigma,
    clip_gradient,
    compose_eps,
    epsilon_for,
    log_moment,
    sanitize_lot,
)
from fedring.errors import ConfigError, EmptyLedger, EmptyLot, Unachievable


class TestClip:
    def test_short_vector_untouched(self):
        g = np.array([0.3, 0.4])  # norm 0.5
        assert np.array_equal(clip_gradient(g, 1.0), g)

    def test_long_vector_scaled_to_c(self):
        g = np.array([3.0, 4.0])  # norm 5
        out = clip_gradient(g, 1.0)
        assert np.isclose(np.linalg.norm(out), 1.0)
        assert np.allclose(out, g / 5.0)  # direction preserved

    def test_boundary(self):
        g = np.array([1.0, 0.0])
        assert np.array_equal(clip_gradient(g, 1.0), g)

    def test_never_increases_norm(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            g = rng.normal(size=10) * rng.uniform(0, 5)
            assert np.linalg.norm(clip_gradient(g, 1.0)) <= 1.0 + 1e-12

    def test_bad_clip_norm(self):
        with pytest.raises(ConfigError):
            clip_gradient(np.ones(2), 0.0)


class TestSanitize:
    def test_zero_sigma_is_clipped_sum(self):
        grads = [np.array([3.0, 4.0]), np.array([0.3, 0.4])]
        out = sanitize_lot(grads, 1.0, 0.0, np.random.default_rng(1))
        assert np.allclose(out, np.array([0.6, 0.8]) + np.array([0.3, 0.4]))

    def test_noise_statistics(self):
        """Monte Carlo: noise added to a zero lot is N(0, (sigma C)^2) iid."""
        rng = np.random.default_rng(2)
        sigma, c = 2.0, 0.5
        samples = np.array([
            sanitize_lot([np.zeros(4)], c, sigma, rng) for _ in range(20_000)
        ]).ravel()
        assert abs(samples.mean()) < 0.02
        assert abs(samples.std() - sigma * c) < 0.01

    def test_deterministic_given_rng(self):
        grads = [np.ones(3), 2 * np.ones(3)]
        a = sanitize_lot(grads, 1.0, 4.0, np.random.default_rng(3))
        b = sanitize_lot(grads, 1.0, 4.0, np.random.default_rng(3))
        assert np.array_equal(a, b)

    def test_empty_lot(self):
        with pytest.raises(EmptyLot):
            sanitize_lot([], 1.0, 1.0, np.random.default_rng(0))


class TestLogMoment:
    def test_nonnegative(self):
        for q in (1e-3, 1e-2, 0.1):
            for sigma in (1.0, 4.0):
                for lam in (1, 8, 32):
                    assert log_moment(q, sigma, lam) >= 0.0

    def test_monotone_in_lambda(self):
        vals = [log_moment(0.01, 2.0, lam) for lam in range(1, 33)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))

    def test_decreasing_in_sigma(self):
        assert log_moment(0.01, 1.0, 8) > log_moment(0.01, 2.0, 8) > log_moment(0.01, 4.0, 8)

    def test_increasing_in_q(self):
        assert log_moment(0.001, 2.0, 8) < log_moment(0.01, 2.0, 8) < log_moment(0.1, 2.0, 8)

    def test_small_q_quadratic_regime(self):
        """For small q the leading term is lam (lam+1) q^2 (e^(1/sigma^2) - 1) / 2."""
        q, sigma, lam = 1e-3, 4.0, 4
        approx = lam * (lam + 1) * q * q * (np.exp(1.0 / sigma**2) - 1.0) / 2.0
        assert log_moment(q, sigma, lam) == pytest.approx(approx, rel=1e-2)

    def test_refinement_converges(self):
        """Doubling the grid moves the answer by < 1e-6 relative."""
        coarse = log_moment(0.01, 4.0, 16, n_points=200_001)
        fine = log_moment(0.01, 4.0, 16, n_points=400_001)
        assert fine == pytest.approx(coarse, rel=1e-6)

    def test_q_equals_one(self):
        """q=1 is the plain Gaussian mechanism; alpha = lam (lam+1) / (2 sigma^2)."""
        sigma, lam = 2.0, 6
        want = lam * (lam + 1) / (2.0 * sigma * sigma)
        assert log_moment(1.0, sigma, lam) == pytest.approx(want, rel=1e-4)

    def test_validation(self):
        with pytest.raises(ConfigError):
            log_moment(0.01, 2.0, 0)
        with pytest.raises(ConfigError):
            log_moment(0.0, 2.0, 1)
        with pytest.raises(ConfigError):
            log_moment(0.01, 0.0, 1)


class TestLedger:
    def test_additivity(self):
        """Recording T steps at once equals T single records."""
        one = MomentLedger()
        one.record(0.01, 2.0, count=100)
        many = MomentLedger()
        for _ in range(4):
            many.record(0.01, 2.0, count=25)
        assert many.steps == one.steps == 100
        assert np.allclose(many.totals, one.totals)
        assert compose_eps(many, 1e-5) == pytest.approx(compose_eps(one, 1e-5))

    def test_epsilon_monotone_in_steps(self):
        eps = [epsilon_for(0.01, 2.0, t, 1e-5) for t in (100, 1000, 10_000)]
        assert eps[0] < eps[1] < eps[2]

    def test_epsilon_monotone_in_delta(self):
        assert epsilon_for(0.01, 2.0, 1000, 1e-7) > epsilon_for(0.01, 2.0, 1000, 1e-3)

    def test_reference_point(self):
        """q=0.01, sigma=4, T=10^4, delta=1e-5 composes to eps ~ 1.26."""
        assert epsilon_for(0.01, 4.0, 10_000, 1e-5) == pytest.approx(1.2586, abs=2e-3)

    def test_heterogeneous_steps(self):
        led = MomentLedger()
        led.record(0.01, 2.0, count=10)
        led.record(0.05, 4.0, count=5)
        assert led.steps == 15
        assert compose_eps(led, 1e-5) > 0.0

    def test_empty_ledger(self):
        with pytest.raises(EmptyLedger):
            compose_eps(MomentLedger(), 1e-5)

    def test_bad_delta(self):
        led = MomentLedger()
        led.record(0.01, 2.0)
        with pytest.raises(ConfigError):
            compose_eps(led, 0.0)


class TestCalibration:
    def test_tightness(self):
        """Calibrated sigma meets the target; sigma - tol does not (unless
        the search floor was hit)."""
        for eps in (0.5, 2.0, 8.0):
            q, steps, delta = 0.01, 1000, 1e-5
            sigma = calibrate_sigma(eps, delta, q, steps)
            assert epsilon_for(q, sigma, steps, delta) <= eps
            if sigma > 0.5:
                assert epsilon_for(q, sigma - 2e-3, steps, delta) > eps

    def test_unachievable(self):
        with pytest.raises(Unachievable):
            calibrate_sigma(1e-4, 1e-5, 0.5, 100_000)

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            calibrate_sigma(0.0, 1e-5, 0.01, 100)


class TestPrivacySpec:
    def test_valid(self):
        spec = PrivacySpec(q=0.01, sigma=4.0, clip_norm=1.0, delta=1e-5, steps=100)
        assert spec.sigma == 4.0

    def test_sigma_zero_allowed(self):
        # sigma=0 means "no noise" and is used by the plain-SGD equivalence path
        PrivacySpec(q=0.01, sigma=0.0, clip_norm=1.0, delta=1e-5, steps=1)

    @pytest.mark.parametrize("kw", [
        {"q": 0.0}, {"q": 1.5}, {"sigma": -1.0}, {"clip_norm": 0.0},
        {"delta": 0.0}, {"delta": 1.0},
    ])
    def test_invalid(self, kw):
        base = dict(q=0.01, sigma=4.0, clip_norm=1.0, delta=1e-5, steps=100)
        base.update(kw)
        with pytest.raises(ConfigError):
            PrivacySpec(**base)
