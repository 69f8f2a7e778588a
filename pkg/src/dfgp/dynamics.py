"""Kalman filter, smoother, and field predictors for the fused model.

The filter runs in information form.  With forecast moments (eta_p, P_p) and
the effective observation precision D = (B Q^{-1} B' + V)^{-1}, one step is

    A      = P_p^{-1} + S' D S
    eta_f  = eta_p + A^{-1} S' D alpha,      P_f = A^{-1}

and every application of D uses the Woodbury identity

    D = V^{-1} - V^{-1} B F^{-1} B' V^{-1},      F = Q + B' V^{-1} B,

so the only large factorization per step is the sparse SPD matrix F.  The
fine-scale posterior pieces ride along at no extra factorization cost via
    Q^{-1} B' D = F^{-1} B' V^{-1}.
No dense N x N or n x n matrix is ever formed.

Means are computed for any number of observation columns at once (the
conditional-simulation machinery feeds simulated replicates through the same
sweep); covariances are shared across columns.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .car import CARParams, sparse_factorize
from .exceptions import FactorizationError, NumericalError
from .model import AssembledTimeSlice, DFGPParams, ModelData, as_dense, sym

__all__ = [
    "StatePosterior", "FilterResult", "SmootherResult", "PredictionField",
    "forecast_step", "filter_step", "filter_pass", "smoother_pass",
    "lag1_cov", "predict_filter", "predict_smooth", "predict_from_posterior",
]

_SOLVE_CHUNK = 64


def _cho(m: np.ndarray, t: int, what: str):
    try:
        return la.cho_factor(sym(m), lower=True)
    except la.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite", time_index=t) from exc


def _cho_logdet(cf) -> float:
    return 2.0 * float(np.log(np.diag(cf[0])).sum())


def _cho_inv(cf) -> np.ndarray:
    return sym(la.cho_solve(cf, np.eye(cf[0].shape[0])))


def _row_quad(rows: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Diagonal of rows @ m @ rows' without forming the full product."""
    return np.einsum("ij,jk,ik->i", rows, m, rows, optimize=True)


@dataclass
class StatePosterior:
    """Moments of (eta_t, delta_t^P) given data up to some horizon.

    ``eta`` and ``delta`` carry one column per observation set fed through
    the sweep (column 0 is the real data).  ``psi`` is the m x r coupling
    block the smoother needs; ``lag1`` is cov(eta_t, eta_{t-1} | Z) and is
    populated on smoothed states only.
    """

    time_index: int
    eta: np.ndarray                 # (r, k)
    P: np.ndarray                   # (r, r)
    eta_pred: np.ndarray            # (r, k)
    P_pred: np.ndarray              # (r, r)
    delta: np.ndarray               # (m, k)
    R_diag: np.ndarray | None       # (m,)
    C: np.ndarray                   # (r, m)
    psi: np.ndarray                 # (m, r)
    n_obs: int = 0
    logdet_sigma: float = 0.0
    quad: np.ndarray = field(default_factory=lambda: np.zeros(1))
    alpha: np.ndarray | None = None
    lag1: np.ndarray | None = None
    R_full: np.ndarray | None = None   # (m, m), only when requested


@dataclass
class FilterResult:
    states: list[StatePosterior]
    pred_nodes: np.ndarray
    lowrank_only: bool

    @property
    def neg2loglik(self) -> float:
        """Sum of ln|Sigma_t| + alpha' Sigma^{-1} alpha (up to a constant)."""
        return math.fsum(
            [s.logdet_sigma for s in self.states]
            + [float(s.quad[0]) for s in self.states])


@dataclass
class SmootherResult:
    states: list[StatePosterior]
    eta0: np.ndarray               # (r, k) smoothed initial state mean
    P0: np.ndarray                 # (r, r)
    pred_nodes: np.ndarray | None = None


@dataclass
class PredictionField:
    """BAU-level predicted mean and standard error at one time step."""

    time_index: int
    bau_indices: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray


def forecast_step(eta: np.ndarray, P: np.ndarray, H: np.ndarray,
                  U: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-step-ahead forecast moments: (H eta, H P H' + U)."""
    return H @ eta, sym(H @ P @ H.T + U)


def filter_pass(data: ModelData, params: DFGPParams, *,
                pred_bau: np.ndarray | None = None,
                extra_obs: list[np.ndarray | None] | None = None,
                want_variance: bool = False,
                want_loglik: bool = True,
                want_innovations: bool = False,
                lowrank_only: bool = False,
                horizon: int | None = None) -> FilterResult:
    """Forward filtering sweep over t = 1..horizon.

    pred_bau: flat BAU indices where the fine-scale posterior (delta, R, C)
        is tracked; None disables tracking, data.structure.valid_idx tracks
        every BAU.
    extra_obs: optional per-time arrays (n_t, k-1) of additional observation
        columns sharing the design of the real data.
    want_variance: also compute R_diag (costs one sparse solve per
        prediction BAU per step); pass "full" to additionally store the full
        m x m fine-scale covariance block on each state.
    lowrank_only: drop the fine-scale component entirely (fixed-rank
        filtering comparator): D = V^{-1}, delta = 0.
    """
    u = params.u if horizon is None else min(horizon, params.u)
    if len(data.slices) < u:
        raise ValueError(f"data has {len(data.slices)} time steps, need {u}")
    r = params.r
    if pred_bau is None:
        pred_nodes = np.zeros(0, dtype=np.int64)
    else:
        pred_nodes = data.node_index(np.asarray(pred_bau, dtype=np.int64))
    n_rhs = 1 + (0 if extra_obs is None else
                 next((e.shape[1] for e in extra_obs if e is not None), 0))

    eta = np.zeros((r, n_rhs))
    P = params.K0.copy()
    states: list[StatePosterior] = []
    for t in range(1, u + 1):
        slc = data.slices[t - 1]
        eta_pred, P_pred = forecast_step(eta, P, params.H_at(t), params.U_at(t))
        extra = None if extra_obs is None else extra_obs[t - 1]
        st = filter_step(
            eta_pred, P_pred, slc, params.car[t - 1], data.structure,
            params.sigma2_eps[t - 1], params.beta[t - 1], pred_nodes=pred_nodes,
            extra=extra, n_rhs=n_rhs, want_variance=want_variance,
            want_loglik=want_loglik, want_innovations=want_innovations,
            lowrank_only=lowrank_only)
        states.append(st)
        eta, P = st.eta, st.P
    return FilterResult(states=states, pred_nodes=pred_nodes,
                        lowrank_only=lowrank_only)


def filter_step(eta_pred: np.ndarray, P_pred: np.ndarray,
                slc: AssembledTimeSlice, car: CARParams, structure,
                sigma2_row: np.ndarray, beta_t: np.ndarray, *,
                pred_nodes: np.ndarray, extra: np.ndarray | None = None,
                n_rhs: int | None = None, want_variance: bool = False,
                want_loglik: bool = True, want_innovations: bool = False,
                lowrank_only: bool = False) -> StatePosterior:
    """One measurement update from forecast moments to filtered moments.

    With no observations the filtered moments equal the forecast and the
    fine-scale posterior reverts to its prior.  All D-applications factor
    through the sparse SPD matrix F = Q + B' V^{-1} B.
    """
    t = slc.time_index
    r = eta_pred.shape[0]
    m = pred_nodes.size
    if n_rhs is None:
        n_rhs = 1 + (0 if extra is None else extra.shape[1])
    full_var = want_variance == "full"
    if slc.n_obs == 0:
        R_diag, R_full = None, None
        if want_variance and m and not lowrank_only:
            afac = sparse_factorize(structure.base_precision(car.gamma))
            if full_var:
                R_full = car.tau2 * afac.solve_selected_block(pred_nodes)
                R_diag = np.diag(R_full).copy()
            else:
                R_diag = car.tau2 * afac.solve_selected_diag(pred_nodes)
        elif want_variance:
            R_diag = np.zeros(m)
            R_full = np.zeros((m, m)) if full_var else None
        return StatePosterior(
            time_index=t, eta=eta_pred.copy(), P=P_pred.copy(),
            eta_pred=eta_pred, P_pred=P_pred, delta=np.zeros((m, n_rhs)),
            R_diag=R_diag, C=np.zeros((r, m)), psi=np.zeros((m, r)),
            n_obs=0, quad=np.zeros(n_rhs), R_full=R_full)

    zcols = slc.z[:, None] if extra is None else np.column_stack([slc.z, extra])
    v = slc.v_diag(sigma2_row)
    vinv = 1.0 / v
    alpha = zcols - (slc.X @ beta_t)[:, None] - as_dense(slc.S @ eta_pred)
    VS = sp.diags(vinv) @ slc.S
    sds = as_dense(slc.S.T @ VS)                      # S' V^{-1} S
    sda = as_dense(VS.T @ alpha)                      # S' V^{-1} alpha
    ada = (alpha * (vinv[:, None] * alpha)).sum(axis=0)
    psi = np.zeros((m, r))
    delta = np.zeros((m, n_rhs))
    R_diag = np.zeros(m) if want_variance else None
    R_full = np.zeros((m, m)) if (want_variance and full_var) else None
    if lowrank_only:
        ln_dinv = float(np.log(v).sum()) if want_loglik else 0.0
    else:
        try:
            F = (structure.base_precision(car.gamma) / car.tau2
                 + slc.B.T @ sp.diags(vinv) @ slc.B).tocsc()
            ffac = sparse_factorize(F)
        except FactorizationError as exc:
            raise NumericalError(str(exc), time_index=t) from exc
        nmat = slc.B.T @ VS                          # (n_valid, r) sparse
        fb = ffac.solve(as_dense(slc.B.T @ (vinv[:, None] * alpha)))
        gcorr = np.zeros((r, r))
        for c0 in range(0, r, _SOLVE_CHUNK):
            cols = slice(c0, min(c0 + _SOLVE_CHUNK, r))
            gf = ffac.solve(as_dense(nmat[:, cols]))
            gcorr[:, cols] = as_dense(nmat.T @ gf)
            if m:
                psi[:, cols] = gf[pred_nodes]
        sds = sds - gcorr
        bva = as_dense(slc.B.T @ (vinv[:, None] * alpha))
        sda = sda - as_dense(nmat.T @ fb)
        ada = ada - (bva * fb).sum(axis=0)
        if want_loglik:
            ln_dinv = (ffac.logdet() - structure.precision_logdet(car)
                       + float(np.log(v).sum()))
        else:
            ln_dinv = 0.0
        if want_variance and m:
            if full_var:
                R_full = ffac.solve_selected_block(pred_nodes)
                R_diag = np.diag(R_full).copy()
            else:
                R_diag = ffac.solve_selected_diag(pred_nodes)

    pp_cf = _cho(P_pred, t, "forecast covariance")
    A = sym(_cho_inv(pp_cf) + sds)
    a_cf = _cho(A, t, "information matrix")
    gain = la.cho_solve(a_cf, sda)                  # (r, k)
    eta_f = eta_pred + gain
    P_f = _cho_inv(a_cf)
    if not lowrank_only and m:
        delta = fb[pred_nodes] - psi @ gain
        if want_variance:
            R_diag = R_diag + _row_quad(psi, P_f)
            if full_var:
                R_full = sym(R_full + psi @ P_f @ psi.T)
    C = -P_f @ psi.T
    logdet_sigma = 0.0
    quad = np.zeros(n_rhs)
    if want_loglik:
        logdet_sigma = _cho_logdet(a_cf) + _cho_logdet(pp_cf) + ln_dinv
        quad = ada - (sda * gain).sum(axis=0)
    return StatePosterior(
        time_index=t, eta=eta_f, P=P_f, eta_pred=eta_pred, P_pred=P_pred,
        delta=delta, R_diag=R_diag, C=C, psi=psi, n_obs=slc.n_obs,
        logdet_sigma=logdet_sigma, quad=quad,
        alpha=alpha[:, 0].copy() if want_innovations else None, R_full=R_full)


def smoother_pass(filt: FilterResult, params: DFGPParams) -> SmootherResult:
    """Backward smoothing sweep; reuses only r-dim and m x r filter artifacts."""
    u = len(filt.states)
    fs = filt.states
    out: list[StatePosterior | None] = [None] * u
    last = fs[-1]
    out[u - 1] = StatePosterior(
        time_index=u, eta=last.eta.copy(), P=last.P.copy(),
        eta_pred=last.eta_pred, P_pred=last.P_pred,
        delta=last.delta.copy(), R_diag=None if last.R_diag is None else last.R_diag.copy(),
        C=last.C.copy(), psi=last.psi, n_obs=last.n_obs,
        R_full=None if last.R_full is None else last.R_full.copy())
    J_list: list[np.ndarray | None] = [None] * u
    for t in range(u - 1, 0, -1):
        f_t, nxt = fs[t - 1], out[t]
        H_next = params.H_at(t + 1)
        pp_cf = _cho(fs[t].P_pred, t + 1, "forecast covariance")
        J = f_t.P @ la.cho_solve(pp_cf, H_next).T       # P_f H' P_pred^{-1}
        J_list[t - 1] = J
        d_eta = nxt.eta - fs[t].eta_pred
        d_P = nxt.P - fs[t].P_pred
        M = -f_t.psi @ J                                 # (m, r)
        out[t - 1] = StatePosterior(
            time_index=t,
            eta=f_t.eta + J @ d_eta,
            P=sym(f_t.P + J @ d_P @ J.T),
            eta_pred=f_t.eta_pred, P_pred=f_t.P_pred,
            delta=f_t.delta + M @ d_eta,
            R_diag=None if f_t.R_diag is None else f_t.R_diag + _row_quad(M, d_P),
            C=f_t.C + J @ d_P @ M.T,
            psi=f_t.psi, n_obs=f_t.n_obs,
            R_full=None if f_t.R_full is None else sym(f_t.R_full + M @ d_P @ M.T))
    # smoothed initial state (eta_{0|0} = 0, P_{0|0} = K0)
    pp_cf = _cho(fs[0].P_pred, 1, "forecast covariance")
    J0 = params.K0 @ la.cho_solve(pp_cf, params.H_at(1)).T
    eta0 = J0 @ (out[0].eta - fs[0].eta_pred)
    P0 = sym(params.K0 + J0 @ (out[0].P - fs[0].P_pred) @ J0.T)
    # lag-1 cross covariances: cov(eta_t, eta_{t-1} | Z) = P_{t|Z} J_{t-1}'
    for t in range(1, u + 1):
        J_prev = J0 if t == 1 else J_list[t - 2]
        out[t - 1].lag1 = out[t - 1].P @ J_prev.T
    return SmootherResult(states=[s for s in out if s is not None],
                      eta0=eta0, P0=P0, pred_nodes=filt.pred_nodes)


def lag1_cov(smooth: SmootherResult) -> list[np.ndarray]:
    """P_{t,t-1|T} for t = 1..T (t=1 couples to the initial state)."""
    return [s.lag1 for s in smooth.states]


def predict_from_posterior(post: StatePosterior, Xp: np.ndarray, Sp: np.ndarray,
                           beta_t: np.ndarray, bau_indices: np.ndarray,
                           rhs: int = 0) -> PredictionField:
    """Field mean and standard error from one time's posterior moments."""
    mean = Xp @ beta_t + Sp @ post.eta[:, rhs] + post.delta[:, rhs]
    var = _row_quad(Sp, post.P)
    if post.R_diag is not None:
        var = var + post.R_diag
    var = var + 2.0 * np.einsum("ij,ji->i", Sp, post.C)
    scale = float(np.max(np.abs(var), initial=0.0))
    bad = var < -1e-10 * max(scale, 1.0)
    if bad.any():
        raise NumericalError("prediction variance significantly negative",
                             time_index=post.time_index)
    if (var < 0).any():
        warnings.warn("clamping tiny negative prediction variances to zero")
        var = np.maximum(var, 0.0)
    return PredictionField(time_index=post.time_index, bau_indices=bau_indices,
                           mean=mean, stderr=np.sqrt(var))


def _check_pred_alignment(data: ModelData, pred_bau, tracked: np.ndarray) -> None:
    nodes = data.node_index(np.asarray(pred_bau, dtype=np.int64))
    if nodes.shape != tracked.shape or not np.array_equal(nodes, tracked):
        raise ValueError("pred_bau differs from the prediction set tracked "
                         "during the filter pass")


def predict_filter(filt: FilterResult, data: ModelData, params: DFGPParams,
                   t: int, pred_bau: np.ndarray, rhs: int = 0) -> PredictionField:
    """Filtered field predictor at time t over the tracked prediction BAUs."""
    _check_pred_alignment(data, pred_bau, filt.pred_nodes)
    post = filt.states[t - 1]
    Xp, Sp = data.design_at(pred_bau)
    return predict_from_posterior(post, Xp, Sp, params.beta[t - 1], pred_bau, rhs)


def predict_smooth(smooth: SmootherResult, data: ModelData, params: DFGPParams,
                   t: int, pred_bau: np.ndarray, rhs: int = 0) -> PredictionField:
    """Smoothed field predictor at time t over the tracked prediction BAUs."""
    if smooth.pred_nodes is not None:
        _check_pred_alignment(data, pred_bau, smooth.pred_nodes)
    post = smooth.states[t - 1]
    Xp, Sp = data.design_at(pred_bau)
    return predict_from_posterior(post, Xp, Sp, params.beta[t - 1], pred_bau, rhs)
