"""Model parameters and per-time assembled design matrices.

A time slice stacks all instruments' observations at one time step:
    Z_t = X_t beta_t + S_t eta_t + B_t xi_t + eps_t
with X_t, S_t obtained by footprint-averaging the BAU-level covariate and
basis values, B_t the sparse footprint weight matrix (columns over the
valid-BAU node order of the CAR structure), and eps_t having diagonal
covariance sigma2[t, k] * v(footprint).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .basis import BisquareBasis, bau_basis_values
from .car import CARParams, CARStructure
from .exceptions import InvalidParameterError
from .grid import BAUGrid, BAUPointSample, ObservationBatch, footprint_matrix


def sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def as_dense(x):
    """Materialize a sparse matrix as an ndarray; ndarrays pass through."""
    return x.toarray() if sp.issparse(x) else np.asarray(x)


def _check_spd(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidParameterError(f"{name} must be square")
    try:
        np.linalg.cholesky(sym(m))
    except np.linalg.LinAlgError as exc:
        raise InvalidParameterError(f"{name} must be positive definite") from exc
    return sym(m)


@dataclass(frozen=True)
class DFGPParams:
    """Full parameter set theta over a horizon of u time steps.

    beta: (u, p) regression coefficients per time.
    H, U: (r, r) propagation and innovation covariance, or (u, r, r) when the
        blockwise variant is expanded per time.
    K0: (r, r) initial state covariance.
    car: length-u tuple of CARParams (gamma_t, tau2_t).
    sigma2_eps: (u, k0) measurement variance scale per time per instrument.
    """

    beta: np.ndarray
    H: np.ndarray
    U: np.ndarray
    K0: np.ndarray
    car: tuple[CARParams, ...]
    sigma2_eps: np.ndarray

    def __post_init__(self):
        beta = np.atleast_2d(np.asarray(self.beta, dtype=float))
        sig = np.atleast_2d(np.asarray(self.sigma2_eps, dtype=float))
        H = np.asarray(self.H, dtype=float)
        U = np.asarray(self.U, dtype=float)
        u = beta.shape[0]
        if len(self.car) != u or sig.shape[0] != u:
            raise InvalidParameterError("beta, car, sigma2_eps must share the horizon u")
        if not (sig > 0).all():
            raise InvalidParameterError("all sigma2_eps must be > 0")
        K0 = _check_spd(self.K0, "K0")
        if U.ndim == 2:
            U = _check_spd(U, "U")
            if H.ndim != 2 or H.shape != U.shape:
                raise InvalidParameterError("H and U must both be r x r")
        else:
            if U.shape[0] != u or H.shape != U.shape:
                raise InvalidParameterError("per-time H, U must be (u, r, r)")
            U = np.stack([_check_spd(U[t], f"U[{t}]") for t in range(u)])
        if K0.shape[0] != (H.shape[-1]):
            raise InvalidParameterError("K0 dimension must match H")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2_eps", sig)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "K0", K0)
        object.__setattr__(self, "car", tuple(self.car))

    @property
    def u(self) -> int:
        return self.beta.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    @property
    def r(self) -> int:
        return self.K0.shape[0]

    @property
    def n_instruments(self) -> int:
        return self.sigma2_eps.shape[1]

    def H_at(self, t: int) -> np.ndarray:
        """Propagation matrix for the step into time t (1-based)."""
        return self.H if self.H.ndim == 2 else self.H[t - 1]

    def U_at(self, t: int) -> np.ndarray:
        return self.U if self.U.ndim == 2 else self.U[t - 1]

    def truncated(self, u: int) -> "DFGPParams":
        """Parameters restricted to the first u time steps."""
        H = self.H if self.H.ndim == 2 else self.H[:u]
        U = self.U if self.U.ndim == 2 else self.U[:u]
        return replace(self, beta=self.beta[:u], H=H, U=U,
                       car=self.car[:u], sigma2_eps=self.sigma2_eps[:u])

    def flat(self) -> np.ndarray:
        """All parameters as one vector (for convergence monitoring)."""
        parts = [self.beta.ravel(), np.asarray(self.H).ravel(),
                 np.asarray(self.U).ravel(), self.K0.ravel(),
                 self.sigma2_eps.ravel(),
                 np.array([c.gamma for c in self.car]),
                 np.array([c.tau2 for c in self.car])]
        return np.concatenate(parts)


@dataclass
class AssembledTimeSlice:
    """Design matrices for all observations at one time step.

    ``B`` has columns in the CAR structure's node order; ``instrument_rows``
    maps instrument id -> row slice into the stacked arrays.  ``v_factors``
    excludes the sigma2 scale so slices stay parameter-independent.
    """

    time_index: int
    z: np.ndarray                      # (n,)
    X: np.ndarray                      # (n, p)
    S: np.ndarray | sp.spmatrix        # (n, r)
    B: sp.csr_matrix                   # (n, n_valid), rows sum to 1
    v_factors: np.ndarray              # (n,)
    instrument_rows: dict[int, slice] = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return self.z.size

    def v_diag(self, sigma2_row: np.ndarray) -> np.ndarray:
        """Diagonal of V_t = blockdiag(sigma2_k * V_k) as a vector."""
        out = np.empty(self.n_obs)
        for k, rows in self.instrument_rows.items():
            out[rows] = sigma2_row[k - 1] * self.v_factors[rows]
        return out


@dataclass
class ModelData:
    """Everything the engine and estimator need about one dataset."""

    grid: BAUGrid
    basis: BisquareBasis
    structure: CARStructure
    slices: list[AssembledTimeSlice]
    X_bau: np.ndarray                  # (N, p) covariates at BAU level
    S_bau: np.ndarray                  # (N, r) basis at BAU level
    covariate_names: tuple[str, ...] = ()

    @property
    def T(self) -> int:
        return len(self.slices)

    @property
    def n_instruments(self) -> int:
        return max((max(s.instrument_rows) for s in self.slices if s.instrument_rows),
                   default=1)

    def node_index(self, bau_idx: np.ndarray) -> np.ndarray:
        """Map flat grid BAU indices to CAR node order; rejects masked cells."""
        bau_idx = np.asarray(bau_idx, dtype=np.int64)
        remap = np.full(self.grid.n_bau, -1, dtype=np.int64)
        remap[self.structure.valid_idx] = np.arange(self.structure.n)
        if (bau_idx < 0).any() or (bau_idx >= self.grid.n_bau).any():
            raise ValueError("prediction BAU index out of range")
        nodes = remap[bau_idx]
        if (nodes < 0).any():
            raise ValueError("prediction BAU index refers to a masked cell")
        return nodes

    def design_at(self, bau_idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(X^P, S^P) rows at the given prediction BAUs."""
        bau_idx = np.asarray(bau_idx, dtype=np.int64)
        return self.X_bau[bau_idx], self.S_bau[bau_idx]


# Named covariate functions available in run configurations.
COVARIATE_FNS = {
    "1": lambda p: np.ones(p.shape[0]),
    "x": lambda p: p[:, 0],
    "y": lambda p: p[:, 1],
    "x2": lambda p: p[:, 0] ** 2,
    "y2": lambda p: p[:, 1] ** 2,
    "xy": lambda p: p[:, 0] * p[:, 1],
}

DEFAULT_COVARIATES = ("1", "y", "y2")


def covariate_functions(names) -> list:
    try:
        return [COVARIATE_FNS[n] for n in names]
    except KeyError as exc:
        raise ValueError(f"unknown covariate {exc.args[0]!r}; "
                         f"choose from {sorted(COVARIATE_FNS)}") from exc


def assemble(batches: list[ObservationBatch], grid: BAUGrid, basis: BisquareBasis,
             structure: CARStructure, covariates=DEFAULT_COVARIATES,
             n_points: int | None = None, mc_seed: int = 0) -> ModelData:
    """Build per-time design matrices from raw observation batches.

    Batches must be ordered t = 1..T with contiguous time indices; missing
    time steps are represented by batches with no records.
    """
    ids = sorted({k for b in batches for k in b.instruments})
    if ids and ids != list(range(1, len(ids) + 1)):
        raise ValueError(f"instrument ids must be contiguous from 1, got {ids}")
    fns = covariate_functions(covariates)
    kwargs = {} if n_points is None else {"n_points": n_points}
    sample = BAUPointSample(grid, seed=mc_seed, **kwargs)
    X_bau = np.column_stack([sample.average(f) for f in fns])
    S_bau = bau_basis_values(basis, grid, sample)
    slices = []
    for t, batch in enumerate(batches, start=1):
        if batch.time_index != t:
            raise ValueError(f"batches must be contiguous in time: expected {t}, "
                             f"got {batch.time_index}")
        fps, zs, vs, rows = [], [], [], {}
        at = 0
        for k in batch.instruments:
            recs = batch.per_instrument[k]
            rows[k] = slice(at, at + len(recs))
            at += len(recs)
            for fp, z, v in recs:
                fps.append(fp)
                zs.append(z)
                vs.append(v)
        B_full = footprint_matrix(fps, grid)
        slices.append(AssembledTimeSlice(
            time_index=t,
            z=np.asarray(zs, dtype=float),
            X=B_full @ X_bau if fps else np.zeros((0, X_bau.shape[1])),
            S=sp.csr_matrix(B_full @ S_bau) if fps else np.zeros((0, S_bau.shape[1])),
            B=B_full[:, structure.valid_idx].tocsr(),
            v_factors=np.asarray(vs, dtype=float),
            instrument_rows=rows))
    return ModelData(grid=grid, basis=basis, structure=structure, slices=slices,
                     X_bau=X_bau, S_bau=S_bau, covariate_names=tuple(covariates))
