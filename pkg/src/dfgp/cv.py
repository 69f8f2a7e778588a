"""Hold-out cross-validation harness.

Replicates the block + random hold-out design: a contiguous block region
(long-range skill) over a time range, plus a random fraction of the
remaining fine-instrument observations (short-range skill).  The filtering
protocol fits on Z_{1:u} and scores only the time-u holdouts, per horizon;
the smoothing protocol fits once on Z_{1:T} and scores all holdouts at
t = 1..T-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import LocalKrigeSettings, local_krige
from .dynamics import filter_pass, predict_filter, predict_smooth, smoother_pass
from .estimate import EstimatorConfig, fit_filtering_sequence, run_estimator
from .grid import BAUGrid, ObservationBatch
from .model import ModelData, assemble
from .scoring import crps_gaussian, rmspe

METHODS = ("dfgp", "lowrank", "localkrige")


@dataclass(frozen=True)
class HoldoutPlan:
    """Block region x time range plus a random fraction of the rest."""

    block_x: tuple[float, float]
    block_y: tuple[float, float]
    time_first: int
    time_last: int
    fraction: float = 0.1
    instrument: int = 1
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.fraction < 1.0):
            raise ValueError("fraction must lie in (0, 1)")
        if self.time_first > self.time_last:
            raise ValueError("empty holdout time range")


@dataclass(frozen=True)
class HoldoutRecord:
    time_index: int
    bau_index: int
    value: float
    subset: str                      # "block" or "random"


@dataclass
class CVRow:
    method: str
    protocol: str
    time_index: int | str            # int or "all"
    subset: str
    rmspe: float
    crps: float
    n: int


@dataclass
class CVResult:
    rows: list[CVRow] = field(default_factory=list)
    holdout: list[HoldoutRecord] = field(default_factory=list)
    predictions: dict = field(default_factory=dict)   # method -> {(t, bau): (mean, se)}


def split_holdout(batches: list[ObservationBatch], grid: BAUGrid,
                  plan: HoldoutPlan) -> tuple[list[ObservationBatch], list[HoldoutRecord]]:
    """Partition the fine-instrument records into training and holdout sets.

    Holdout footprints must cover exactly one BAU (the fine instrument);
    coarse instruments always stay in training.
    """
    rng = np.random.default_rng(plan.seed)
    cents = grid.centroids
    train, holdout = [], []
    for batch in batches:
        t = batch.time_index
        if not (plan.time_first <= t <= plan.time_last) or plan.instrument not in batch.per_instrument:
            train.append(batch)
            continue
        new_per = {k: list(v) for k, v in batch.per_instrument.items()}
        kept = []
        recs = new_per[plan.instrument]
        in_block = np.zeros(len(recs), dtype=bool)
        for i, (fp, _z, _v) in enumerate(recs):
            c = cents[fp.bau_indices].mean(axis=0)
            in_block[i] = (plan.block_x[0] <= c[0] <= plan.block_x[1]
                           and plan.block_y[0] <= c[1] <= plan.block_y[1])
        u = rng.uniform(size=len(recs))
        for i, (fp, z, v) in enumerate(recs):
            tag = None
            if in_block[i]:
                tag = "block"
            elif u[i] < plan.fraction:
                tag = "random"
            if tag is None:
                kept.append((fp, z, v))
                continue
            if fp.bau_indices.size != 1:
                raise ValueError("holdout footprints must cover a single BAU")
            holdout.append(HoldoutRecord(t, int(fp.bau_indices[0]), float(z), tag))
        new_per[plan.instrument] = kept
        train.append(ObservationBatch(time_index=t, per_instrument=new_per))
    return train, holdout


def _score_rows(method: str, protocol: str, preds: dict[tuple[int, int], tuple[float, float]],
                holdout: list[HoldoutRecord], times: list[int]) -> list[CVRow]:
    """Aggregate per-time and overall RMSPE/CRPS rows from point predictions."""
    rows = []
    for subset in ("all", "block", "random"):
        sub = [h for h in holdout
               if (subset == "all" or h.subset == subset) and (h.time_index, h.bau_index) in preds]
        for t in [*times, "all"]:
            recs = sub if t == "all" else [h for h in sub if h.time_index == t]
            if not recs:
                continue
            mu = np.array([preds[(h.time_index, h.bau_index)][0] for h in recs])
            se = np.array([preds[(h.time_index, h.bau_index)][1] for h in recs])
            y = np.array([h.value for h in recs])
            se = np.maximum(se, 1e-12)
            rows.append(CVRow(method, protocol, t, subset,
                              rmspe(mu, y), float(np.mean(crps_gaussian(mu, se, y))),
                              len(recs)))
    return rows


def _dfgp_predictions(data: ModelData, holdout: list[HoldoutRecord], protocol: str,
                      est_config: EstimatorConfig, lowrank_only: bool):
    T = data.T
    preds: dict[tuple[int, int], tuple[float, float]] = {}
    if protocol == "filtering":
        fits = fit_filtering_sequence(data, est_config, lowrank_only=lowrank_only)
        for u in range(2, T + 1):
            baus = sorted({h.bau_index for h in holdout if h.time_index == u})
            if not baus:
                continue
            pred_bau = np.asarray(baus)
            filt = filter_pass(data, fits[u].params, horizon=u, pred_bau=pred_bau,
                               want_variance=True, want_loglik=False,
                               lowrank_only=lowrank_only)
            fld = predict_filter(filt, data, fits[u].params, u, pred_bau)
            for b, m, s in zip(pred_bau, fld.mean, fld.stderr):
                preds[(u, int(b))] = (float(m), float(s))
        times = list(range(2, T + 1))
    elif protocol == "smoothing":
        fit = run_estimator(data, est_config, lowrank_only=lowrank_only)
        times = list(range(1, T))
        baus = sorted({h.bau_index for h in holdout if h.time_index in times})
        if baus:
            pred_bau = np.asarray(baus)
            filt = filter_pass(data, fit.params, pred_bau=pred_bau,
                               want_variance=True, want_loglik=False,
                               lowrank_only=lowrank_only)
            sm = smoother_pass(filt, fit.params)
            for t in times:
                fld = predict_smooth(sm, data, fit.params, t, pred_bau)
                for b, m, s in zip(pred_bau, fld.mean, fld.stderr):
                    preds[(t, int(b))] = (float(m), float(s))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return preds, times


def _localkrige_predictions(train: list[ObservationBatch], grid: BAUGrid,
                            holdout: list[HoldoutRecord],
                            settings: LocalKrigeSettings, times: list[int]):
    cents = grid.centroids
    coords, tv, zv = [], [], []
    for batch in train:
        for k, recs in batch.per_instrument.items():
            for fp, z, _v in recs:
                coords.append(cents[fp.bau_indices].mean(axis=0))
                tv.append(batch.time_index)
                zv.append(z)
    coords = np.asarray(coords)
    tv = np.asarray(tv, dtype=float)
    zv = np.asarray(zv)
    preds = {}
    for h in holdout:
        if h.time_index not in times:
            continue
        key = (h.time_index, h.bau_index)
        if key in preds:
            continue
        mean, var = local_krige(cents[h.bau_index], h.time_index, coords, tv, zv, settings)
        preds[key] = (mean, float(np.sqrt(max(var, 0.0))))
    return preds


def run_cv(batches: list[ObservationBatch], grid: BAUGrid, basis, structure,
           plan: HoldoutPlan, methods=("dfgp", "lowrank", "localkrige"),
           protocol: str = "filtering",
           est_config: EstimatorConfig | None = None,
           lk_settings: LocalKrigeSettings | None = None,
           covariates=None) -> CVResult:
    """Fit each method on the training split and score it on the holdouts."""
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    est_config = est_config or EstimatorConfig(max_iter=30)
    lk_settings = lk_settings or LocalKrigeSettings(k=100)
    train, holdout = split_holdout(batches, grid, plan)
    kwargs = {} if covariates is None else {"covariates": covariates}
    data = assemble(train, grid, basis, structure, **kwargs)
    T = data.T
    times = list(range(2, T + 1)) if protocol == "filtering" else list(range(1, T))
    result = CVResult(holdout=holdout)
    for method in methods:
        if method == "localkrige":
            preds = _localkrige_predictions(train, grid, holdout, lk_settings, times)
        else:
            preds, times = _dfgp_predictions(data, holdout, protocol, est_config,
                                             lowrank_only=(method == "lowrank"))
        result.predictions[method] = preds
        result.rows.extend(_score_rows(method, protocol, preds, holdout, times))
    return result
