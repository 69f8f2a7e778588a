"""Local space-time kriging comparator.

Predictions use the k nearest observations under a scaled space-time
distance, with an anisotropic exponential covariance fitted by maximum
likelihood inside each window (derivative-free search over log-parameters).
Observations are treated as points at footprint centroids; resolution
differences are ignored by design for this baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize


@dataclass(frozen=True)
class ExpCovParams:
    """Anisotropic space-time exponential covariance parameters."""

    sigma2: float          # partial sill
    phi_s: float           # spatial range
    phi_t: float           # temporal range
    nugget: float = 0.0

    def __post_init__(self):
        if not (self.sigma2 > 0 and self.phi_s > 0 and self.phi_t > 0):
            raise ValueError("sigma2, phi_s, phi_t must be > 0")
        if self.nugget < 0:
            raise ValueError("nugget must be >= 0")


def exp_cov(h, u, p: ExpCovParams):
    """C(h, u) = sigma2 * exp(-sqrt(h^2/phi_s^2 + u^2/phi_t^2)), plus the
    nugget exactly at (h, u) = (0, 0)."""
    h = np.asarray(h, dtype=float)
    u = np.asarray(u, dtype=float)
    c = p.sigma2 * np.exp(-np.sqrt((h / p.phi_s) ** 2 + (u / p.phi_t) ** 2))
    out = c + np.where((h == 0) & (u == 0), p.nugget, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class LocalKrigeSettings:
    k: int = 500                    # window size (nearest observations)
    pilot: ExpCovParams | None = None   # anisotropy for the neighbor metric
    fit: bool = True                # ML-fit the covariance inside the window
    max_fit_evals: int = 200
    jitter: float = 1e-8


def _cov_matrix(coords, times, p: ExpCovParams) -> np.ndarray:
    dh = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    du = np.abs(times[:, None] - times[None, :])
    c = p.sigma2 * np.exp(-np.sqrt((dh / p.phi_s) ** 2 + (du / p.phi_t) ** 2))
    return c + p.nugget * np.eye(len(times))


def _profile_neg2ll(logp: np.ndarray, coords, times, z) -> float:
    p = ExpCovParams(*np.exp(logp[:3]), nugget=np.exp(logp[3]))
    C = _cov_matrix(coords, times, p)
    try:
        cf = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return 1e12
    logdet = 2.0 * np.log(np.diag(cf)).sum()
    ones = np.ones_like(z)
    ci_z = np.linalg.solve(cf.T, np.linalg.solve(cf, z))
    ci_1 = np.linalg.solve(cf.T, np.linalg.solve(cf, ones))
    mu = (ones @ ci_z) / (ones @ ci_1)
    resid = z - mu
    quad = resid @ np.linalg.solve(cf.T, np.linalg.solve(cf, resid))
    return float(logdet + quad)


def fit_exp_cov(coords, times, z, start: ExpCovParams,
                max_evals: int = 200) -> ExpCovParams:
    """Profile-likelihood fit of the exponential covariance (constant mean)."""
    x0 = np.log([start.sigma2, start.phi_s, start.phi_t, max(start.nugget, 1e-6)])
    res = minimize(_profile_neg2ll, x0, args=(coords, times, z),
                   method="Nelder-Mead",
                   options={"maxfev": max_evals, "xatol": 1e-3, "fatol": 1e-4})
    sig, ps, pt, ng = np.exp(res.x)
    return ExpCovParams(sigma2=float(sig), phi_s=float(ps), phi_t=float(pt),
                        nugget=float(ng))


def local_krige(target_xy, target_t, coords, times, values,
                settings: LocalKrigeSettings) -> tuple[float, float]:
    """Kriged mean and variance of the latent field at one space-time point.

    Selects the window, optionally fits the covariance by ML, estimates the
    local constant mean by GLS, and applies the kriging predictor with the
    mean-estimation variance correction.
    """
    coords = np.asarray(coords, dtype=float)
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least 2 observations in the window")
    pilot = settings.pilot or ExpCovParams(
        sigma2=max(float(np.var(values)), 1e-8),
        phi_s=max(float(np.ptp(coords)) / 3.0, 1e-3),
        phi_t=max(float(np.ptp(times)) / 2.0, 1.0),
        nugget=0.1 * max(float(np.var(values)), 1e-8))
    dh2 = ((coords - np.asarray(target_xy, dtype=float)) ** 2).sum(axis=1)
    du = times - float(target_t)
    d = np.sqrt(dh2 / pilot.phi_s**2 + (du / pilot.phi_t) ** 2)
    if values.size > settings.k:
        near = np.argpartition(d, settings.k)[:settings.k]
    else:
        near = np.arange(values.size)
    cw, tw, zw = coords[near], times[near], values[near]

    p = pilot
    if settings.fit:
        p = fit_exp_cov(cw, tw, zw, pilot, settings.max_fit_evals)
    C = _cov_matrix(cw, tw, p)
    try:
        cf = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        warnings.warn("degenerate kriging window; regularizing covariance")
        p = replace(p, nugget=p.nugget + settings.jitter * p.sigma2 + 1e-10)
        cf = np.linalg.cholesky(_cov_matrix(cw, tw, p))
    hw = np.sqrt(((cw - np.asarray(target_xy, dtype=float)) ** 2).sum(axis=1))
    uw = np.abs(tw - float(target_t))
    c0 = p.sigma2 * np.exp(-np.sqrt((hw / p.phi_s) ** 2 + (uw / p.phi_t) ** 2))
    solve = lambda b: np.linalg.solve(cf.T, np.linalg.solve(cf, b))  # noqa: E731
    ones = np.ones_like(zw)
    ci_1 = solve(ones)
    mu = (ones @ solve(zw)) / (ones @ ci_1)
    w = solve(c0)
    mean = mu + c0 @ solve(zw - mu)
    var = p.sigma2 - c0 @ w + (1.0 - ones @ w) ** 2 / (ones @ ci_1)
    return float(mean), float(max(var, 0.0))
