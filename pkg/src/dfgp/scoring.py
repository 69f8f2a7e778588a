"""Prediction scoring: RMSPE and the Gaussian closed-form CRPS."""

from __future__ import annotations

import numpy as np
from scipy.stats import norm


def rmspe(predictions, truth) -> float:
    """Root-mean-squared prediction error over aligned nonempty vectors."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(truth, dtype=float)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {y.shape}")
    if p.size == 0:
        raise ValueError("empty inputs")
    return float(np.sqrt(np.mean((p - y) ** 2)))


def crps_gaussian(mean, stderr, y):
    """CRPS of a Gaussian predictive distribution, elementwise.

    crps(mu, sigma, y) = sigma * [z(2*Phi(z) - 1) + 2*phi(z) - 1/sqrt(pi)]
    with z = (y - mu)/sigma.  Equals the integral of the squared difference
    between the predictive CDF and the step at y.
    """
    mu = np.asarray(mean, dtype=float)
    sigma = np.asarray(stderr, dtype=float)
    yv = np.asarray(y, dtype=float)
    if np.any(sigma <= 0):
        raise ValueError("stderr must be > 0")
    z = (yv - mu) / sigma
    out = sigma * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z)
                   - 1.0 / np.sqrt(np.pi))
    return float(out) if out.ndim == 0 else out
