"""Synthetic two-instrument scenario generator.

Draws a truth field from the generative model (trend + low-rank dynamic
component + CAR fine-scale component) and observes it with a fine
single-cell instrument and a coarse block-averaging instrument, each with
its own noise level, swath-gap bands, and random missingness.  Swath gaps
are vertical bands of configurable width that shift cyclically day by day,
mimicking polar-orbit coverage holes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BisquareBasis, bau_basis_values, layout_multires
from .car import CARParams, CARStructure, build_adjacency, sample_car
from .grid import BAUGrid, Footprint, ObservationBatch, build_grid
from .model import (DEFAULT_COVARIATES, BAUPointSample, DFGPParams, ModelData,
                    assemble, covariate_functions)


@dataclass(frozen=True)
class InstrumentSpec:
    """One instrument's footprint block size, noise, and missingness."""

    block: int = 1                 # footprints are block x block BAU squares
    sigma2_eps: float = 0.1
    v_factor: float = 1.0
    swath_width: int = 0           # band width in cells (0 = no gaps)
    swath_period: int = 0          # horizontal distance between band starts
    swath_shift: int = 0           # cells the bands move per day (cyclic)
    drop_rate: float = 0.0

    def __post_init__(self):
        if self.block < 1:
            raise ValueError("block size must be >= 1")
        if not (0.0 <= self.drop_rate < 1.0):
            raise ValueError("drop_rate must lie in [0, 1)")
        if self.swath_width and self.swath_period <= self.swath_width:
            raise ValueError("swath_period must exceed swath_width")


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of a synthetic experiment."""

    nx: int = 40
    ny: int = 40
    cell_size: float = 1.0
    T: int = 8
    basis_counts: tuple[int, ...] = (9,)
    radius_mult: float = 1.5
    covariates: tuple[str, ...] = DEFAULT_COVARIATES
    beta: tuple[float, ...] = (1.0, 0.5, -0.2)
    h_diag: float = 0.8
    u_scale: float = 0.25
    k0_scale: float = 1.0
    gamma: float = 0.75
    tau2: float = 1.0
    instruments: tuple[InstrumentSpec, ...] = (
        InstrumentSpec(block=1, sigma2_eps=0.25, swath_width=8, swath_period=20,
                       swath_shift=7, drop_rate=0.1),
        InstrumentSpec(block=4, sigma2_eps=0.04, drop_rate=0.05),
    )
    seed: int = 0

    def __post_init__(self):
        if len(self.beta) != len(self.covariates):
            raise ValueError("beta length must match covariates")
        for spec in self.instruments:
            if self.nx % spec.block or self.ny % spec.block:
                raise ValueError(f"block size {spec.block} must tile the "
                                 f"{self.nx}x{self.ny} grid")


@dataclass
class SyntheticTruth:
    """Truth field with its latent components and the scene geometry."""

    config: ScenarioConfig
    grid: BAUGrid
    basis: BisquareBasis
    structure: CARStructure
    params: DFGPParams
    X_bau: np.ndarray
    S_bau: np.ndarray
    y: np.ndarray          # (T, N)
    eta: np.ndarray        # (T+1, r)
    xi: np.ndarray         # (T, N)


def true_params(config: ScenarioConfig, r: int) -> DFGPParams:
    p = len(config.beta)
    return DFGPParams(
        beta=np.tile(np.asarray(config.beta, dtype=float), (config.T, 1)).reshape(config.T, p),
        H=config.h_diag * np.eye(r),
        U=config.u_scale * np.eye(r),
        K0=config.k0_scale * np.eye(r),
        car=tuple(CARParams(config.gamma, config.tau2) for _ in range(config.T)),
        sigma2_eps=np.tile([s.sigma2_eps for s in config.instruments], (config.T, 1)))


def simulate_truth(config: ScenarioConfig) -> SyntheticTruth:
    """Exact generative draw of Y_{1:T} with its latent states."""
    grid = build_grid(config.nx, config.ny, config.cell_size)
    basis = layout_multires(grid.bbox, list(config.basis_counts), config.radius_mult)
    structure = build_adjacency(grid)
    sample = BAUPointSample(grid)
    fns = covariate_functions(config.covariates)
    X_bau = np.column_stack([sample.average(f) for f in fns])
    S_bau = bau_basis_values(basis, grid, sample)
    params = true_params(config, basis.r)
    rng = np.random.default_rng(config.seed)
    r, N, T = basis.r, grid.n_bau, config.T
    eta = np.zeros((T + 1, r))
    eta[0] = np.linalg.cholesky(params.K0) @ rng.standard_normal(r)
    xi = np.zeros((T, N))
    y = np.zeros((T, N))
    # time-invariant CAR params share one factorization across all draws
    shared_car = len(set(params.car)) == 1
    if shared_car:
        xi[:] = sample_car(structure, params.car[0], rng, size=T).reshape(T, N)
    for t in range(1, T + 1):
        cu = np.linalg.cholesky(params.U_at(t))
        eta[t] = params.H_at(t) @ eta[t - 1] + cu @ rng.standard_normal(r)
        if not shared_car:
            xi[t - 1] = sample_car(structure, params.car[t - 1], rng)
        y[t - 1] = X_bau @ params.beta[t - 1] + S_bau @ eta[t] + xi[t - 1]
    return SyntheticTruth(config=config, grid=grid, basis=basis, structure=structure,
                          params=params, X_bau=X_bau, S_bau=S_bau, y=y, eta=eta, xi=xi)


def _block_footprints(grid: BAUGrid, block: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Index sets and centroid columns for the block x block tiling."""
    nx, ny = grid.nx, grid.ny
    flat = np.arange(grid.n_bau).reshape(ny, nx)
    sets, cols = [], []
    for i0 in range(0, ny, block):
        for j0 in range(0, nx, block):
            sets.append(flat[i0:i0 + block, j0:j0 + block].ravel())
            cols.append(j0 + (block - 1) / 2.0)
    return sets, np.asarray(cols)


def _in_swath(cols: np.ndarray, spec: InstrumentSpec, t: int, nx: int) -> np.ndarray:
    if spec.swath_width == 0:
        return np.zeros(cols.size, dtype=bool)
    offset = (t - 1) * spec.swath_shift
    phase = np.mod(cols - offset, spec.swath_period)
    return phase < spec.swath_width


def observe(truth: SyntheticTruth) -> list[ObservationBatch]:
    """Noisy multi-instrument observations of the truth, with missingness.

    The RNG stream continues from the truth seed (offset domain) so that the
    full scenario is a pure function of the config.
    """
    config = truth.config
    rng = np.random.default_rng([config.seed, 1])
    batches = []
    tiles = {spec.block: _block_footprints(truth.grid, spec.block)
             for spec in config.instruments}
    for t in range(1, config.T + 1):
        per = {}
        for k, spec in enumerate(config.instruments, start=1):
            sets, cols = tiles[spec.block]
            keep = ~_in_swath(cols, spec, t, config.nx)
            keep &= rng.uniform(size=len(sets)) >= spec.drop_rate
            recs = []
            noise = rng.standard_normal(int(keep.sum()))
            j = 0
            for i, cover in enumerate(sets):
                if not keep[i]:
                    continue
                mean = truth.y[t - 1, cover].mean()
                z = mean + np.sqrt(spec.sigma2_eps * spec.v_factor) * noise[j]
                j += 1
                recs.append((Footprint(cover, k, t), float(z), spec.v_factor))
            per[k] = recs
        batches.append(ObservationBatch(time_index=t, per_instrument=per))
    return batches


def scenario_data(config: ScenarioConfig) -> tuple[SyntheticTruth, list[ObservationBatch], ModelData]:
    """Truth, observations, and assembled design matrices in one call."""
    truth = simulate_truth(config)
    batches = observe(truth)
    data = assemble(batches, truth.grid, truth.basis, truth.structure,
                    covariates=config.covariates)
    return truth, batches, data


def scenario_data_bulk(config: ScenarioConfig) -> tuple[SyntheticTruth, ModelData]:
    """Vectorized observe + assemble for large grids.

    Skips per-record Footprint objects and builds each time slice's sparse
    design matrices directly from index arrays; produces the same slices as
    observe() + assemble() (same RNG stream and record order).
    """
    import scipy.sparse as sp

    from .model import AssembledTimeSlice

    truth = simulate_truth(config)
    grid = truth.grid
    rng = np.random.default_rng([config.seed, 1])
    tiles = {}
    for spec in config.instruments:
        sets, cols = _block_footprints(grid, spec.block)
        tiles[spec.block] = (np.asarray(sets), cols)   # (n_fp, block^2), (n_fp,)
    slices = []
    for t in range(1, config.T + 1):
        rows_z, rows_v, b_rows, b_cols, b_vals = [], [], [], [], []
        inst_rows = {}
        at = 0
        for k, spec in enumerate(config.instruments, start=1):
            sets, cols = tiles[spec.block]
            keep = ~_in_swath(cols, spec, t, config.nx)
            keep &= rng.uniform(size=len(sets)) >= spec.drop_rate
            sel = sets[keep]                        # (m, block^2)
            m, bsz = sel.shape
            noise = rng.standard_normal(m)
            z = truth.y[t - 1][sel].mean(axis=1) + np.sqrt(
                spec.sigma2_eps * spec.v_factor) * noise
            rows_z.append(z)
            rows_v.append(np.full(m, spec.v_factor))
            b_rows.append(np.repeat(np.arange(at, at + m), bsz))
            b_cols.append(sel.ravel())
            b_vals.append(np.full(m * bsz, 1.0 / bsz))
            inst_rows[k] = slice(at, at + m)
            at += m
        B = sp.csr_matrix(
            (np.concatenate(b_vals), (np.concatenate(b_rows), np.concatenate(b_cols))),
            shape=(at, grid.n_bau))
        slices.append(AssembledTimeSlice(
            time_index=t, z=np.concatenate(rows_z),
            X=B @ truth.X_bau, S=sp.csr_matrix(B @ truth.S_bau),
            B=B[:, truth.structure.valid_idx].tocsr(),
            v_factors=np.concatenate(rows_v), instrument_rows=inst_rows))
    data = ModelData(grid=grid, basis=truth.basis, structure=truth.structure,
                     slices=slices, X_bau=truth.X_bau, S_bau=truth.S_bau,
                     covariate_names=tuple(config.covariates))
    return truth, data
