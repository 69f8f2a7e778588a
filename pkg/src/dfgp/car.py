"""Conditional autoregressive (CAR) structure on the BAU graph.

The fine-scale component has sparse precision
    Q = Delta^{-1} (I - gamma W) / tau^2 = (D - gamma E) / tau^2,
where E is the 0/1 adjacency, D = diag(degrees) and W = D^{-1} E is the
row-normalized proximity matrix.  Everything heavy goes through one sparse
symmetric factorization (SuperLU in symmetric mode with a fill-reducing
ordering), which provides solves and the log-determinant.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .exceptions import FactorizationError, InvalidParameterError, StructureError
from .grid import BAUGrid

# gamma must stay strictly below 1 for Q to be positive definite (W is
# row-stochastic, so its spectrum touches 1).
GAMMA_MAX = 1.0 - 1e-6
GAMMA_MIN = 0.0

# Largest N for which ln|I - gamma W| uses a one-time dense eigendecomposition
# of the (symmetrized) proximity matrix instead of a per-gamma sparse factorization.
DENSE_EIG_CAP = 2048


@dataclass(frozen=True)
class CARParams:
    """Spatial dependence gamma in [0, 1) and conditional variance tau2 > 0."""

    gamma: float
    tau2: float

    def __post_init__(self):
        if not self.tau2 > 0:
            raise InvalidParameterError(f"tau2 must be > 0, got {self.tau2}")
        if not (GAMMA_MIN <= self.gamma <= GAMMA_MAX):
            raise InvalidParameterError(
                f"gamma must lie in [{GAMMA_MIN}, {GAMMA_MAX}], got {self.gamma}")


class CARStructure:
    """Adjacency graph over the valid BAUs with degree and edge bookkeeping.

    ``valid_idx`` maps internal node order (0..n-1) to flat grid indices; all
    matrices built here use the internal order.
    """

    def __init__(self, adjacency: sp.csr_matrix, valid_idx: np.ndarray):
        adjacency = adjacency.tocsr()
        if (adjacency != adjacency.T).nnz:
            raise StructureError("adjacency must be symmetric")
        if adjacency.diagonal().any():
            raise StructureError("adjacency must have a zero diagonal")
        deg = np.asarray(adjacency.sum(axis=1)).ravel()
        if (deg < 1).any():
            bad = valid_idx[np.flatnonzero(deg < 1)]
            raise StructureError(f"isolated BAU(s) at grid index {bad.tolist()}")
        self.adjacency = adjacency
        self.degrees = deg
        self.valid_idx = np.asarray(valid_idx, dtype=np.int64)
        upper = sp.triu(adjacency, k=1).tocoo()
        self.edges = np.column_stack([upper.row, upper.col])

    @property
    def n(self) -> int:
        return self.degrees.size

    @cached_property
    def proximity(self) -> sp.csr_matrix:
        """Row-normalized W = D^{-1} E."""
        return sp.diags(1.0 / self.degrees) @ self.adjacency

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """|edges| x n incidence matrix M with M'M = graph Laplacian."""
        ne = self.edges.shape[0]
        rows = np.repeat(np.arange(ne), 2)
        cols = self.edges.ravel()
        vals = np.tile([1.0, -1.0], ne)
        return sp.csr_matrix((vals, (rows, cols)), shape=(ne, self.n))

    @cached_property
    def _w_eigvals(self) -> np.ndarray | None:
        """Eigenvalues of W (real: W is similar to a symmetric matrix)."""
        if self.n > DENSE_EIG_CAP:
            return None
        dhalf = 1.0 / np.sqrt(self.degrees)
        m = self.adjacency.toarray() * np.outer(dhalf, dhalf)
        return np.linalg.eigvalsh(m)

    def base_precision(self, gamma: float) -> sp.csc_matrix:
        """D - gamma*E, the unscaled CAR precision (SPD for gamma in [0,1))."""
        return (sp.diags(self.degrees) - gamma * self.adjacency).tocsc()

    def logdet_i_minus_gamma_w(self, gamma: float) -> float:
        """ln|I - gamma W|, by cached eigenvalues or a sparse factorization."""
        ev = self._w_eigvals
        if ev is not None:
            return float(np.log1p(-gamma * ev).sum())
        f = sparse_factorize(self.base_precision(gamma))
        return f.logdet() - float(np.log(self.degrees).sum())

    def precision_logdet(self, params: CARParams) -> float:
        """ln|Q| for Q = (D - gamma E)/tau2."""
        return (-self.n * np.log(params.tau2) + float(np.log(self.degrees).sum())
                + self.logdet_i_minus_gamma_w(params.gamma))


def build_adjacency(grid: BAUGrid, neighborhood: str = "rook") -> CARStructure:
    """First-order adjacency over the grid's valid BAUs.

    ``neighborhood`` is "rook" (4-neighbor) or "queen" (8-neighbor).  Raises
    StructureError naming any valid BAU left without a valid neighbor.
    """
    if neighborhood not in ("rook", "queen"):
        raise ValueError(f"unknown neighborhood {neighborhood!r}")
    nx, ny = grid.nx, grid.ny
    idx = np.arange(grid.n_bau).reshape(ny, nx)
    pairs = [np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()]),
             np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])]
    if neighborhood == "queen":
        pairs.append(np.column_stack([idx[:-1, :-1].ravel(), idx[1:, 1:].ravel()]))
        pairs.append(np.column_stack([idx[:-1, 1:].ravel(), idx[1:, :-1].ravel()]))
    pairs = np.vstack(pairs)
    if grid.mask is not None:
        keep = grid.mask[pairs[:, 0]] & grid.mask[pairs[:, 1]]
        pairs = pairs[keep]
    valid = grid.valid_indices()
    if valid.size == 0:
        raise StructureError("grid has no valid BAUs")
    remap = np.full(grid.n_bau, -1, dtype=np.int64)
    remap[valid] = np.arange(valid.size)
    rows = np.concatenate([remap[pairs[:, 0]], remap[pairs[:, 1]]])
    cols = np.concatenate([remap[pairs[:, 1]], remap[pairs[:, 0]]])
    adj = sp.csr_matrix((np.ones(rows.size), (rows, cols)),
                        shape=(valid.size, valid.size))
    adj.data[:] = 1.0  # collapse duplicates to 0/1
    if valid.size == 1:
        raise StructureError(f"isolated BAU(s) at grid index {valid.tolist()}")
    return CARStructure(adj, valid)


def build_precision(structure: CARStructure, params: CARParams) -> sp.csc_matrix:
    """Sparse SPD precision Q = (D - gamma E) / tau2."""
    return (structure.base_precision(params.gamma) / params.tau2).tocsc()


class SparseFactor:
    """Symmetric sparse factorization with solve() and logdet().

    Wraps SuperLU in symmetric mode (no off-diagonal pivoting, fill-reducing
    ordering on A + A').  Positive definiteness is certified by the pivots;
    a non-SPD input raises FactorizationError.
    """

    def __init__(self, matrix: sp.spmatrix):
        m = matrix.tocsc()
        if m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        try:
            self._lu = spla.splu(m, permc_spec="MMD_AT_PLUS_A",
                                 diag_pivot_thresh=0.0,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:  # singular
            raise FactorizationError(f"sparse factorization failed: {exc}") from exc
        du = self._lu.U.diagonal()
        if not (du > 0).all():
            raise FactorizationError("matrix is not positive definite")
        self._logdet = float(np.log(du).sum())
        self.shape = m.shape

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve M x = b for one vector or a dense block of right-hand sides."""
        return self._lu.solve(np.asarray(b, dtype=float))

    def solve_selected_diag(self, indices: np.ndarray, chunk: int = 256) -> np.ndarray:
        """(M^{-1})_{jj} for the requested indices, by chunked unit solves."""
        indices = np.asarray(indices, dtype=np.int64)
        out = np.empty(indices.size)
        n = self.shape[0]
        for s in range(0, indices.size, chunk):
            idx = indices[s:s + chunk]
            rhs = np.zeros((n, idx.size))
            rhs[idx, np.arange(idx.size)] = 1.0
            out[s:s + chunk] = self.solve(rhs)[idx, np.arange(idx.size)]
        return out

    def solve_selected_block(self, indices: np.ndarray, chunk: int = 256) -> np.ndarray:
        """The (indices x indices) block of M^{-1}, by chunked unit solves."""
        indices = np.asarray(indices, dtype=np.int64)
        n = self.shape[0]
        out = np.empty((indices.size, indices.size))
        for s in range(0, indices.size, chunk):
            idx = indices[s:s + chunk]
            rhs = np.zeros((n, idx.size))
            rhs[idx, np.arange(idx.size)] = 1.0
            out[:, s:s + chunk] = self.solve(rhs)[indices]
        return out

    def logdet(self) -> float:
        return self._logdet


def sparse_factorize(matrix: sp.spmatrix) -> SparseFactor:
    """Factorize a sparse SPD matrix; returns a handle with solve and logdet."""
    return SparseFactor(matrix)


def sample_car(structure: CARStructure, params: CARParams,
               rng: np.random.Generator, size: int = 1) -> np.ndarray:
    """Draw size samples of xi ~ N(0, Q^{-1}) for the CAR precision Q.

    Uses the split D - gamma*E = (1-gamma)*D + gamma*L with L = M'M the graph
    Laplacian: w = sqrt(1-gamma)*D^{1/2} z1 + sqrt(gamma)*M' z2 has covariance
    D - gamma*E, so tau * solve(D - gamma*E, w) has covariance Q^{-1}.
    Returns (n,) for size=1 else (size, n).
    """
    A = structure.base_precision(params.gamma)
    factor = sparse_factorize(A)
    n, ne = structure.n, structure.edges.shape[0]
    z1 = rng.standard_normal((n, size))
    z2 = rng.standard_normal((ne, size))
    w = (np.sqrt(1.0 - params.gamma) * np.sqrt(structure.degrees)[:, None] * z1
         + np.sqrt(params.gamma) * (structure.incidence.T @ z2))
    x = np.sqrt(params.tau2) * factor.solve(w)
    return x[:, 0] if size == 1 else x.T
