import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from dfgp.scoring import crps_gaussian, rmspe


class TestRMSPE:
    def test_perfect_prediction_zero(self):
        assert rmspe([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0

    def test_hand_value(self):
        assert rmspe([3.0, 4.0], [0.0, 0.0]) == pytest.approx(np.sqrt(12.5))

    def test_constant_bias(self):
        y = np.arange(10.0)
        assert rmspe(y + 0.7, y) == pytest.approx(0.7)

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError):
            rmspe([1.0], [1.0, 2.0])

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            rmspe([], [])


def crps_mc(mu, sigma, y, n=10**6):
    """Stratified Monte Carlo evaluation of the CRPS integral definition:
    integral of (F(x) - 1{x >= y})^2 dx over a wide bracket."""
    lo = min(mu - 9 * sigma, y - 2 * sigma)
    hi = max(mu + 9 * sigma, y + 2 * sigma)
    rng = np.random.default_rng(12345)
    x = lo + (hi - lo) * (np.arange(n) + rng.uniform(size=n)) / n
    f = norm.cdf((x - mu) / sigma)
    integrand = (f - (x >= y)) ** 2
    return (hi - lo) * integrand.mean()


class TestCRPSGaussian:
    def test_center_hand_value(self):
        expect = 2 * norm.pdf(0) - 1 / np.sqrt(np.pi)
        assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(expect, rel=1e-12)
        assert crps_gaussian(0.0, 1.0, 0.0) == pytest.approx(0.23370, abs=1e-5)

    def test_tiny_sigma_at_truth(self):
        assert crps_gaussian(1.0, 1e-12, 1.0) == pytest.approx(0.0, abs=1e-11)

    @given(st.floats(-5, 5), st.floats(0.1, 3), st.floats(-5, 5),
           st.floats(0.1, 10))
    @settings(max_examples=60, deadline=None)
    def test_scale_equivariance(self, mu, sigma, y, a):
        lhs = crps_gaussian(a * mu, a * sigma, a * y)
        rhs = a * crps_gaussian(mu, sigma, y)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError):
            crps_gaussian(0.0, 0.0, 1.0)

    def test_matches_mc_integral_on_lattice(self):
        for mu in (-1.0, 0.0, 2.0):
            for sigma in (0.5, 1.0, 2.0):
                for y in (-2.0, 0.0, 1.5):
                    got = crps_gaussian(mu, sigma, y)
                    ref = crps_mc(mu, sigma, y, n=200000)
                    assert got == pytest.approx(ref, abs=1e-3)

    def test_vectorized(self):
        out = crps_gaussian(np.zeros(3), np.ones(3), np.array([-1.0, 0.0, 1.0]))
        assert out.shape == (3,)
        assert out[0] == pytest.approx(out[2])
