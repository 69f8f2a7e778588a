"""Shared builders for randomized small test instances."""

import numpy as np
import pytest

from dfgp.basis import layout_multires
from dfgp.car import CARParams
from dfgp.grid import Footprint, ObservationBatch, build_grid
from dfgp.model import DFGPParams, assemble
from dfgp.synth import build_adjacency


def rand_spd(rng, r, scale=1.0):
    a = rng.standard_normal((r, r))
    return scale * (a @ a.T / r + np.eye(r))


def make_instance(seed, nx=3, ny=3, T=3, r_counts=(2,), k0=2, mask=None,
                  empty_times=(), v_range=(0.5, 2.0)):
    """Random small instance: grid, two instruments, random obs values.

    Observation values are arbitrary Gaussians (not model draws); the
    conditioning identities the oracle checks hold for any data.
    """
    rng = np.random.default_rng(seed)
    grid = build_grid(nx, ny, 1.0, mask=mask)
    valid = grid.valid_indices()
    N = grid.n_bau
    basis = layout_multires(grid.bbox, list(r_counts))
    structure = build_adjacency(grid)
    batches = []
    for t in range(1, T + 1):
        per = {}
        if t not in empty_times:
            n1 = int(rng.integers(2, valid.size))
            idx1 = rng.choice(valid, size=n1, replace=False)
            per[1] = [(Footprint(np.array([i]), 1, t), float(rng.standard_normal()),
                       float(rng.uniform(*v_range))) for i in idx1]
            if k0 == 2:
                per[2] = []
                for _ in range(int(rng.integers(1, 4))):
                    sz = min(int(rng.integers(2, 5)), valid.size)
                    cover = rng.choice(valid, size=sz, replace=False)
                    per[2].append((Footprint(cover, 2, t),
                                   float(rng.standard_normal()),
                                   float(rng.uniform(*v_range))))
        batches.append(ObservationBatch(time_index=t, per_instrument=per))
    data = assemble(batches, grid, basis, structure, covariates=("1", "y"))
    r = basis.r
    params = DFGPParams(
        beta=rng.standard_normal((T, 2)) * 0.5,
        H=0.6 * np.eye(r) + 0.1 * rng.standard_normal((r, r)),
        U=rand_spd(rng, r, 0.5),
        K0=rand_spd(rng, r, 1.0),
        car=tuple(CARParams(float(rng.uniform(0.0, 0.9)),
                            float(rng.uniform(0.3, 2.0))) for _ in range(T)),
        sigma2_eps=rng.uniform(0.2, 1.5, size=(T, k0)),
    )
    return data, params


def relerr(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def small_instance():
    return make_instance(0)
