"""Maximum-likelihood parameter estimation.

Two modes share one M-step:

* ``sem``: stochastic EM.  Moments of the dynamic coefficients are computed
  exactly from a filter/smoother sweep; the fine-scale expectations are
  replaced by quantities evaluated at conditional-simulation draws.
* ``exact``: full EM with every conditional expectation computed from the
  dense joint posterior.  Cubic in u*N, so it is capped at small N and
  exists as the oracle mode and for tiny problems.

Each iteration's sweep also yields the marginal -2 log-likelihood at the
current parameters, which drives the convergence monitor and the trace.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize_scalar

from .car import GAMMA_MAX, CARParams, sample_car
from .dense import DENSE_N_CAP, DenseJoint
from .dynamics import filter_pass, smoother_pass
from .model import DFGPParams, ModelData, as_dense, sym

_VAR_FLOOR = 1e-12


def _pd_floor(m: np.ndarray) -> np.ndarray:
    """Tiny ridge keeping an (analytically PSD) update numerically PD."""
    r = m.shape[0]
    return sym(m) + max(1e-10 * float(np.trace(m)) / r, _VAR_FLOOR) * np.eye(r)


@dataclass(frozen=True)
class EstimatorConfig:
    """Settings for run_estimator.

    hu_blocks: increasing 1-based end times of the H/U blocks (empty = one
    time-invariant block; the last entry must equal the fitted horizon).
    """

    mode: str = "sem"
    max_iter: int = 100
    tol_loglik: float = 1e-6
    tol_param: float = 1e-5
    consecutive: int = 5
    nugget_time_invariant: bool = False
    hu_blocks: tuple[int, ...] = ()
    draws: int = 1
    sem_average_frac: float = 0.2
    exact_n_cap: int = DENSE_N_CAP
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self):
        if self.mode not in ("sem", "exact"):
            raise ValueError(f"mode must be 'sem' or 'exact', got {self.mode!r}")
        if self.tol_loglik <= 0 or self.tol_param <= 0:
            raise ValueError("convergence thresholds must be > 0")
        if list(self.hu_blocks) != sorted(set(self.hu_blocks)):
            raise ValueError("hu_blocks must be strictly increasing")


@dataclass
class SufficientStats:
    """Per-iteration E-step summaries consumed by the M-step.

    K[t] = P_{t|u} + eta eta' for t = 0..u; L[t-1] couples t to t-1.
    xi_* fields are exact expectations (exact mode) or draw averages (SEM);
    meas_trace is the beta-free spread term of E[res' V_eps^{-1} res].
    """

    eta_mean: np.ndarray           # (u+1, r)
    K: np.ndarray                  # (u+1, r, r)
    L: np.ndarray                  # (u, r, r)
    xi_mean: np.ndarray            # (u, n_valid)
    xi_quad_deg: np.ndarray        # (u,)  E[xi' D xi]
    xi_quad_adj: np.ndarray        # (u,)  E[xi' E xi]
    meas_trace: np.ndarray         # (u, k0)
    neg2loglik: float = np.nan


@dataclass
class EstimationResult:
    """Point estimate plus the iteration record.

    params is the reported estimate (tail average for SEM, final iterate for
    exact EM); params_best is the iterate with the lowest -2 log-likelihood,
    the fallback of record when converged is False.
    """

    params: DFGPParams
    trace: np.ndarray
    n_iter: int
    converged: bool
    params_last: DFGPParams | None = None
    params_best: DFGPParams | None = None
    message: str = ""


def conditional_simulate(data: ModelData, params: DFGPParams,
                         rng: np.random.Generator, *, horizon: int | None = None,
                         ndraws: int = 1):
    """Draws from [eta_{0:u}, xi_{1:u} | Z_{1:u}] by conditional simulation.

    A prior trajectory (eta*, xi*) and synthetic data Z* are drawn from the
    generative model; the conditional draw is
        x* + E[x | Z] - E[x | Z*],
    with both conditional means obtained from one multi-column sweep.
    Returns (eta_draws (ndraws, u+1, r), xi_draws (ndraws, u, n_valid), sweep)
    where sweep = (filter result, smoother result) at the real data.
    """
    u = params.u if horizon is None else min(horizon, params.u)
    r, nv = params.r, data.structure.n
    eta_star = np.zeros((u + 1, r, ndraws))
    eta_star[0] = np.linalg.cholesky(params.K0) @ rng.standard_normal((r, ndraws))
    xi_star = np.zeros((u, nv, ndraws))
    z_star: list[np.ndarray | None] = []
    for t in range(1, u + 1):
        cu = np.linalg.cholesky(params.U_at(t))
        eta_star[t] = params.H_at(t) @ eta_star[t - 1] + cu @ rng.standard_normal((r, ndraws))
        xi_star[t - 1] = sample_car(data.structure, params.car[t - 1], rng,
                                    size=ndraws).reshape(ndraws, nv).T
        slc = data.slices[t - 1]
        if slc.n_obs == 0:
            z_star.append(None)
            continue
        eps = (np.sqrt(slc.v_diag(params.sigma2_eps[t - 1]))[:, None]
               * rng.standard_normal((slc.n_obs, ndraws)))
        z_star.append((slc.X @ params.beta[t - 1])[:, None]
                      + as_dense(slc.S @ eta_star[t]) + slc.B @ xi_star[t - 1] + eps)

    filt = filter_pass(data, params, horizon=u, pred_bau=data.structure.valid_idx,
                       extra_obs=z_star, want_loglik=True)
    sm = smoother_pass(filt, params)
    eta_draws = np.empty((ndraws, u + 1, r))
    xi_draws = np.empty((ndraws, u, nv))
    for j in range(ndraws):
        eta_draws[j, 0] = eta_star[0, :, j] + sm.eta0[:, 0] - sm.eta0[:, j + 1]
        for t in range(1, u + 1):
            st = sm.states[t - 1]
            eta_draws[j, t] = eta_star[t, :, j] + st.eta[:, 0] - st.eta[:, j + 1]
            xi_draws[j, t - 1] = (xi_star[t - 1, :, j]
                                  + st.delta[:, 0] - st.delta[:, j + 1])
    return eta_draws, xi_draws, (filt, sm)


def _eta_stats_from_smoother(sm, u: int, r: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    eta_mean = np.vstack([sm.eta0[:, 0]] + [sm.states[t - 1].eta[:, 0] for t in range(1, u + 1)])
    K = np.empty((u + 1, r, r))
    L = np.empty((u, r, r))
    K[0] = sym(sm.P0 + np.outer(eta_mean[0], eta_mean[0]))
    for t in range(1, u + 1):
        st = sm.states[t - 1]
        K[t] = sym(st.P + np.outer(eta_mean[t], eta_mean[t]))
        L[t - 1] = st.lag1 + np.outer(eta_mean[t], eta_mean[t - 1])
    return eta_mean, K, L


def e_step(data: ModelData, params: DFGPParams, config: EstimatorConfig,
           rng: np.random.Generator, *, horizon: int | None = None,
           lowrank_only: bool = False) -> SufficientStats:
    """E-step summaries plus the -2 log-likelihood at the current parameters."""
    u = params.u if horizon is None else min(horizon, params.u)
    r, nv = params.r, data.structure.n
    deg = data.structure.degrees
    adj = data.structure.adjacency

    if config.mode == "exact":
        if nv > config.exact_n_cap:
            raise ValueError(
                f"exact mode refused above N={config.exact_n_cap} (got {nv})")
        dj = DenseJoint(data, params, horizon=u, lowrank_only=lowrank_only)
        mean, cov = dj.posterior()
        eta_mean = np.vstack([mean[dj.eta_slice(t)] for t in range(u + 1)])
        K = np.empty((u + 1, r, r))
        L = np.empty((u, r, r))
        for t in range(u + 1):
            es = dj.eta_slice(t)
            K[t] = sym(cov[es, es] + np.outer(eta_mean[t], eta_mean[t]))
            if t >= 1:
                L[t - 1] = (cov[es, dj.eta_slice(t - 1)]
                            + np.outer(eta_mean[t], eta_mean[t - 1]))
        xi_mean = np.vstack([mean[dj.xi_slice(t)] for t in range(1, u + 1)])
        xi_qd = np.empty(u)
        xi_qa = np.empty(u)
        meas_trace = np.zeros((u, params.n_instruments))
        for t in range(1, u + 1):
            xs = dj.xi_slice(t)
            vxi = cov[xs, xs]
            xm = xi_mean[t - 1]
            xi_qd[t - 1] = xm @ (deg * xm) + float((deg * np.diag(vxi)).sum())
            xi_qa[t - 1] = xm @ (adj @ xm) + float((adj.multiply(vxi)).sum())
            slc = data.slices[t - 1]
            if slc.n_obs == 0:
                continue
            S, B = as_dense(slc.S), as_dense(slc.B)
            pe = cov[dj.eta_slice(t), dj.eta_slice(t)]
            pex = cov[dj.eta_slice(t), xs]
            quad_rows = (np.einsum("ij,jk,ik->i", S, pe, S)
                         + np.einsum("ij,jk,ik->i", B, vxi, B)
                         + 2.0 * np.einsum("ij,jk,ik->i", S, pex, B))
            for k, rows in slc.instrument_rows.items():
                meas_trace[t - 1, k - 1] = float(
                    (quad_rows[rows] / slc.v_factors[rows]).sum())
        return SufficientStats(eta_mean, K, L, xi_mean, xi_qd, xi_qa, meas_trace,
                               neg2loglik=dj.neg2loglik())

    # SEM: exact eta moments, fine-scale expectations from conditional draws.
    if lowrank_only:
        filt = filter_pass(data, params, horizon=u, want_loglik=True,
                           lowrank_only=True)
        sm = smoother_pass(filt, params)
        eta_mean, K, L = _eta_stats_from_smoother(sm, u, r)
        zeros = np.zeros((u, nv))
        return SufficientStats(eta_mean, K, L, zeros, np.zeros(u), np.zeros(u),
                               np.zeros((u, params.n_instruments)),
                               neg2loglik=filt.neg2loglik)

    _eta_draws, xi_draws, (filt, sm) = conditional_simulate(
        data, params, rng, horizon=u, ndraws=config.draws)
    eta_mean, K, L = _eta_stats_from_smoother(sm, u, r)
    xi_mean = xi_draws.mean(axis=0)
    xi_qd = np.array([np.mean([x @ (deg * x) for x in xi_draws[:, t]])
                      for t in range(u)])
    xi_qa = np.array([np.mean([x @ (adj @ x) for x in xi_draws[:, t]])
                      for t in range(u)])
    meas_trace = np.zeros((u, params.n_instruments))
    if config.draws > 1:
        for t in range(1, u + 1):
            slc = data.slices[t - 1]
            if slc.n_obs == 0:
                continue
            spread = slc.B @ (xi_draws[:, t - 1] - xi_mean[t - 1]).T  # (n, ndraws)
            for k, rows in slc.instrument_rows.items():
                meas_trace[t - 1, k - 1] = float(
                    (spread[rows] ** 2 / slc.v_factors[rows, None]).sum()) / config.draws
    return SufficientStats(eta_mean, K, L, xi_mean, xi_qd, xi_qa, meas_trace,
                           neg2loglik=filt.neg2loglik)


def _gamma_objective(gamma: float, quad_adj: float, tau2: float, structure) -> float:
    return (-gamma * quad_adj / tau2
            - structure.logdet_i_minus_gamma_w(gamma))


def optimize_gamma(structure, quad_adj: float, tau2: float,
                   gamma_old: float) -> float:
    """Bounded scalar minimization of the CAR dependence objective.

    Never returns a value worse than gamma_old (EM monotonicity guard).
    """
    res = minimize_scalar(_gamma_objective, bounds=(0.0, GAMMA_MAX),
                          args=(quad_adj, tau2, structure), method="bounded",
                          options={"xatol": 1e-9})
    g_new, g_old = float(res.x), float(gamma_old)
    if (_gamma_objective(g_new, quad_adj, tau2, structure)
            <= _gamma_objective(g_old, quad_adj, tau2, structure)):
        return g_new
    return g_old


def m_step(stats: SufficientStats, data: ModelData, prev: DFGPParams,
           config: EstimatorConfig, *, lowrank_only: bool = False) -> DFGPParams:
    """Closed-form conditional-maximization updates for every parameter block."""
    u = prev.u
    r = prev.r
    nv = data.structure.n
    beta = prev.beta.copy()
    resid = []  # per-time residual with new beta, states plugged in
    for t in range(1, u + 1):
        slc = data.slices[t - 1]
        if slc.n_obs == 0:
            resid.append(np.zeros(0))
            continue
        v = slc.v_diag(prev.sigma2_eps[t - 1])
        target = (slc.z - as_dense(slc.S @ stats.eta_mean[t])
                  - slc.B @ stats.xi_mean[t - 1])
        xtv = slc.X.T / v
        try:
            beta[t - 1] = np.linalg.solve(xtv @ slc.X, xtv @ target)
        except np.linalg.LinAlgError:
            warnings.warn(f"singular GLS system at t={t}; regularizing")
            beta[t - 1] = np.linalg.lstsq(xtv @ slc.X, xtv @ target, rcond=None)[0]
        resid.append(target - slc.X @ beta[t - 1])

    k0n = prev.n_instruments
    sigma2 = prev.sigma2_eps.copy()
    num = np.zeros((u, k0n))
    cnt = np.zeros((u, k0n))
    for t in range(1, u + 1):
        slc = data.slices[t - 1]
        for k, rows in slc.instrument_rows.items():
            res_k = resid[t - 1][rows]
            num[t - 1, k - 1] = (float(res_k @ (res_k / slc.v_factors[rows]))
                                 + stats.meas_trace[t - 1, k - 1])
            cnt[t - 1, k - 1] = res_k.size
    if config.nugget_time_invariant:
        tot = num.sum(axis=0)
        n_tot = cnt.sum(axis=0)
        pooled = np.where(n_tot > 0, tot / np.maximum(n_tot, 1), sigma2[0])
        sigma2 = np.tile(np.maximum(pooled, _VAR_FLOOR), (u, 1))
    else:
        upd = cnt > 0
        sigma2[upd] = np.maximum(num[upd] / cnt[upd], _VAR_FLOOR)

    K0 = _pd_floor(stats.K[0])
    blocks = list(config.hu_blocks) if config.hu_blocks else [u]
    if blocks[-1] != u:
        raise ValueError(f"hu_blocks must end at the horizon {u}")
    h_parts, u_parts, spans = [], [], []
    lo = 0
    for hi in blocks:
        ks = stats.K[lo:hi]                       # K_{lo} .. K_{hi-1}
        ls = stats.L[lo:hi]                       # L_{lo+1} .. L_{hi}
        H_b = np.linalg.solve(ks.sum(axis=0).T, ls.sum(axis=0).T).T
        acc = np.zeros((r, r))
        for j in range(hi - lo):
            acc += (stats.K[lo + j + 1] - H_b @ ls[j].T - ls[j] @ H_b.T
                    + H_b @ ks[j] @ H_b.T)
        u_new = _pd_floor(acc / (hi - lo))
        h_parts.append(H_b)
        u_parts.append(u_new)
        spans.append(hi - lo)
        lo = hi
    if len(blocks) == 1:
        H_new, U_new = h_parts[0], u_parts[0]
    else:
        H_new = np.concatenate([np.repeat(h[None], n, axis=0)
                                for h, n in zip(h_parts, spans)])
        U_new = np.concatenate([np.repeat(v[None], n, axis=0)
                                for v, n in zip(u_parts, spans)])

    if lowrank_only:
        car = prev.car
    else:
        car = []
        for t in range(1, u + 1):
            g_old = prev.car[t - 1].gamma
            tau2 = max((stats.xi_quad_deg[t - 1] - g_old * stats.xi_quad_adj[t - 1]) / nv,
                       _VAR_FLOOR)
            gamma = optimize_gamma(data.structure, stats.xi_quad_adj[t - 1], tau2, g_old)
            car.append(CARParams(gamma=gamma, tau2=tau2))
        car = tuple(car)
    return DFGPParams(beta=beta, H=H_new, U=U_new, K0=K0, car=car,
                      sigma2_eps=sigma2)


def init_params(data: ModelData, *, horizon: int | None = None,
                r: int | None = None) -> DFGPParams:
    """Default starting point: OLS trend, scaled-identity state covariances,
    gamma = 0.5, H = I.

    tau2 starts at half the OLS residual variance.  Starting it near zero
    traps the EM iteration: the shrunk fine-scale posterior keeps the tau2
    update near zero for hundreds of iterations while the nugget absorbs the
    signal.
    """
    u = len(data.slices) if horizon is None else horizon
    r = data.basis.r if r is None else r
    p = data.X_bau.shape[1]
    k0n = data.n_instruments
    beta = np.zeros((u, p))
    res_by_k = {k: [] for k in range(1, k0n + 1)}
    all_res = []
    for t in range(1, u + 1):
        slc = data.slices[t - 1]
        if slc.n_obs == 0:
            continue
        coef, *_ = np.linalg.lstsq(slc.X, slc.z, rcond=None)
        beta[t - 1] = coef
        res = slc.z - slc.X @ coef
        all_res.append(res)
        for k, rows in slc.instrument_rows.items():
            res_by_k[k].append(res[rows])
    var_all = float(np.var(np.concatenate(all_res))) if all_res else 1.0
    var_all = max(var_all, _VAR_FLOOR)
    sigma2 = np.empty((u, k0n))
    for k in range(1, k0n + 1):
        vk = (float(np.var(np.concatenate(res_by_k[k])))
              if res_by_k[k] else var_all)
        sigma2[:, k - 1] = max(0.1 * vk, _VAR_FLOOR)
    return DFGPParams(
        beta=beta,
        H=np.eye(r),
        U=var_all * np.eye(r),
        K0=var_all * np.eye(r),
        car=tuple(CARParams(0.5, max(0.5 * var_all, _VAR_FLOOR)) for _ in range(u)),
        sigma2_eps=sigma2)


def _average_params(history: list[DFGPParams], frac: float) -> DFGPParams:
    keep = max(1, int(np.ceil(frac * len(history))))
    tail = history[-keep:]
    mean = lambda xs: sum(xs) / len(xs)  # noqa: E731
    u = tail[0].u
    return DFGPParams(
        beta=mean([p.beta for p in tail]),
        H=mean([np.asarray(p.H) for p in tail]),
        U=mean([np.asarray(p.U) for p in tail]),
        K0=mean([p.K0 for p in tail]),
        car=tuple(CARParams(mean([p.car[t].gamma for p in tail]),
                            mean([p.car[t].tau2 for p in tail]))
                  for t in range(u)),
        sigma2_eps=mean([p.sigma2_eps for p in tail]))


def run_estimator(data: ModelData, config: EstimatorConfig,
                  init: DFGPParams | None = None, *, horizon: int | None = None,
                  lowrank_only: bool = False) -> EstimationResult:
    """Iterate E/M steps until the likelihood trace or parameters settle.

    SEM reports the average of the last ``sem_average_frac`` of the iterate
    history as the point estimate; exact mode reports the final iterate.
    Deterministic for fixed (data, config, seed).
    """
    u = len(data.slices) if horizon is None else horizon
    if u < 1:
        raise ValueError("need at least one time step")
    rng = np.random.default_rng(config.seed)
    params = init.truncated(u) if init is not None and init.u >= u else (
        init if init is not None else init_params(data, horizon=u))
    if params.u != u:
        raise ValueError(f"init has horizon {params.u}, need {u}")
    trace: list[float] = []
    history: list[DFGPParams] = []
    best: tuple[float, DFGPParams] | None = None
    converged = False
    message = "max_iter reached"
    stable = 0
    for it in range(config.max_iter):
        stats = e_step(data, params, config, rng, horizon=u, lowrank_only=lowrank_only)
        trace.append(stats.neg2loglik)
        history.append(params)
        if best is None or stats.neg2loglik < best[0]:
            best = (stats.neg2loglik, params)
        if len(trace) >= 2:
            rel = abs(trace[-1] - trace[-2]) / max(abs(trace[-2]), 1.0)
            stable = stable + 1 if rel < config.tol_loglik else 0
            if stable >= config.consecutive:
                converged = True
                message = "likelihood settled"
                break
        new = m_step(stats, data, params, config, lowrank_only=lowrank_only)
        new_flat, old_flat = new.flat(), params.flat()
        if (new_flat.size == old_flat.size
                and np.linalg.norm(new_flat - old_flat) < config.tol_param):
            params = new
            history.append(params)
            converged = True
            message = "parameters settled"
            break
        params = new
    if config.mode == "sem" and len(history) > 1:
        final = _average_params(history, config.sem_average_frac)
    else:
        final = history[-1]
    if not converged and best is not None and config.mode == "exact":
        final = best[1]
    return EstimationResult(params=final, trace=np.asarray(trace),
                            n_iter=len(trace), converged=converged,
                            params_last=history[-1],
                            params_best=None if best is None else best[1],
                            message=message)


def fit_filtering_sequence(data: ModelData, config: EstimatorConfig,
                           init: DFGPParams | None = None,
                           lowrank_only: bool = False) -> dict[int, EstimationResult]:
    """One fit per horizon u = 2..T on Z_{1:u}, warm-started from u-1."""
    T = len(data.slices)
    if T < 2:
        raise ValueError("filtering protocol needs T >= 2")
    results: dict[int, EstimationResult] = {}
    prev: DFGPParams | None = init
    for u in range(2, T + 1):
        start = None
        if prev is not None and config.warm_start:
            start = _extend_params(prev, u) if prev.u < u else prev.truncated(u)
        cfg_u = config
        if config.hu_blocks:
            # clip block boundaries to the current horizon
            blocks = tuple(b for b in config.hu_blocks if b < u) + (u,)
            cfg_u = replace(config, hu_blocks=blocks)
        res = run_estimator(data, cfg_u, init=start, horizon=u,
                            lowrank_only=lowrank_only)
        results[u] = res
        prev = res.params
    return results


def _extend_params(params: DFGPParams, u: int) -> DFGPParams:
    """Extend a horizon-(u-1) parameter set to horizon u by repeating t-1."""
    add = u - params.u
    if add <= 0:
        return params.truncated(u)
    H = params.H
    U = params.U
    if np.asarray(H).ndim == 3:
        H = np.concatenate([H, np.repeat(H[-1][None], add, axis=0)])
        U = np.concatenate([U, np.repeat(U[-1][None], add, axis=0)])
    return replace(
        params,
        beta=np.vstack([params.beta, np.repeat(params.beta[-1][None], add, axis=0)]),
        H=H, U=U,
        car=params.car + tuple(params.car[-1] for _ in range(add)),
        sigma2_eps=np.vstack([params.sigma2_eps,
                              np.repeat(params.sigma2_eps[-1][None], add, axis=0)]))
