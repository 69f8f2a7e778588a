"""Multi-resolution bisquare spatial basis.

Each basis function is a compactly supported bisquare bump
    f(u) = (1 - (d/l)^2)^2   for d = |u - c| <= l,  0 otherwise.
Centers are laid out on near-square lattices, one lattice per resolution,
with radius = radius_mult * lattice spacing (1.5 by default, the usual
fixed-rank-kriging convention; the choice is configurable).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import BAUGrid, BAUPointSample, Footprint, footprint_matrix


def bisquare_eval(u, c, radius: float):
    """Bisquare value at point(s) u for center c; exactly 0 outside radius."""
    if not radius > 0:
        raise ValueError("bisquare radius must be > 0")
    u = np.asarray(u, dtype=float)
    d2 = ((u - np.asarray(c, dtype=float)) ** 2).sum(axis=-1)
    w = 1.0 - d2 / radius**2
    return np.where(d2 <= radius**2, w * w, 0.0)


@dataclass(frozen=True)
class BisquareBasis:
    """r bisquare functions with per-function centers, radii, resolution tags."""

    centers: np.ndarray       # (r, 2)
    radii: np.ndarray         # (r,)
    resolution: np.ndarray    # (r,) int tag per function

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centers, dtype=float))
        rad = np.asarray(self.radii, dtype=float).ravel()
        res = np.asarray(self.resolution, dtype=np.int64).ravel()
        if c.shape[0] == 0:
            raise ValueError("basis must contain at least one function")
        if not (rad > 0).all():
            raise ValueError("all basis radii must be > 0")
        if not (c.shape[0] == rad.size == res.size):
            raise ValueError("centers, radii, resolution must agree in length")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "radii", rad)
        object.__setattr__(self, "resolution", res)

    @property
    def r(self) -> int:
        return self.centers.shape[0]

    def eval_points(self, pts: np.ndarray) -> np.ndarray:
        """(m, r) matrix of all basis functions at m points."""
        pts = np.atleast_2d(pts)
        out = np.zeros((pts.shape[0], self.r))
        for i in range(self.r):
            out[:, i] = bisquare_eval(pts, self.centers[i], self.radii[i])
        return out


def _lattice_shape(count: int, aspect: float) -> tuple[int, int]:
    """Factor count = rows*cols with cols/rows as close to aspect as possible."""
    best = None
    for rows in range(1, count + 1):
        if count % rows:
            continue
        cols = count // rows
        score = abs(np.log(cols / rows) - np.log(aspect))
        if best is None or score < best[0]:
            best = (score, rows, cols)
    return best[1], best[2]


def layout_multires(bbox, counts, radius_mult: float = 1.5) -> BisquareBasis:
    """Equally spaced center lattices, one per resolution.

    bbox is (xmin, ymin, xmax, ymax); counts is the number of functions per
    resolution.  Within a resolution the centers form a cell-centered
    rows x cols lattice and share one radius = radius_mult * spacing.
    """
    counts = [int(c) for c in counts]
    if not counts or any(c < 1 for c in counts):
        raise ValueError("counts must be a nonempty list of positive ints")
    xmin, ymin, xmax, ymax = bbox
    w, h = xmax - xmin, ymax - ymin
    if not (w > 0 and h > 0):
        raise ValueError("bbox must have positive extent")
    centers, radii, tags = [], [], []
    for res, count in enumerate(counts):
        rows, cols = _lattice_shape(count, w / h)
        dx, dy = w / cols, h / rows
        xs = xmin + (np.arange(cols) + 0.5) * dx
        ys = ymin + (np.arange(rows) + 0.5) * dy
        xx, yy = np.meshgrid(xs, ys)
        centers.append(np.column_stack([xx.ravel(), yy.ravel()]))
        radii.append(np.full(count, radius_mult * max(dx, dy)))
        tags.append(np.full(count, res, dtype=np.int64))
    return BisquareBasis(np.vstack(centers), np.concatenate(radii), np.concatenate(tags))


def bau_basis_values(basis: BisquareBasis, grid: BAUGrid,
                     sample: BAUPointSample | None = None) -> np.ndarray:
    """N x r matrix of MC-averaged basis values per BAU.

    Work is restricted per function to the BAUs whose cell can intersect its
    support disc, so the cost scales with total support area rather than N*r.
    """
    if sample is None:
        sample = BAUPointSample(grid)
    N = grid.n_bau
    out = np.zeros((N, basis.r))
    cents = grid.centroids
    # half-diagonal: farthest a cell point can be from the cell centroid
    reach = grid.cell_size * np.sqrt(0.5)
    for i in range(basis.r):
        c, rad = basis.centers[i], basis.radii[i]
        near = np.flatnonzero(
            (np.abs(cents[:, 0] - c[0]) <= rad + reach)
            & (np.abs(cents[:, 1] - c[1]) <= rad + reach))
        if near.size == 0:
            continue
        out[near, i] = sample.average(lambda p, c=c, rad=rad: bisquare_eval(p, c, rad), near)
    return out


def basis_matrix(basis: BisquareBasis, grid: BAUGrid,
                 footprints: list[Footprint] | None = None,
                 sample: BAUPointSample | None = None,
                 bau_values: np.ndarray | None = None) -> np.ndarray:
    """Basis design matrix at BAU level (footprints=None) or footprint level.

    Footprint rows are the change-of-support average of the BAU-level rows.
    """
    if bau_values is None:
        bau_values = bau_basis_values(basis, grid, sample)
    if footprints is None:
        return bau_values
    rows = footprint_matrix(footprints, grid)
    return rows @ bau_values
