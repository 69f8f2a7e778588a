import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfgp.exceptions import InvalidFootprintError
from dfgp.grid import (BAUPointSample, Footprint, aggregate_covariates,
                       build_grid, footprint_matrix, footprint_row, mc_average)


class TestBuildGrid:
    def test_2x2_centroids(self):
        g = build_grid(2, 2, 1.0, (0, 0))
        assert g.n_bau == 4
        expect = {(0.5, 0.5), (1.5, 0.5), (0.5, 1.5), (1.5, 1.5)}
        assert {tuple(c) for c in g.centroids} == expect

    def test_single_cell(self):
        g = build_grid(1, 1, 1.0, (0, 0))
        assert g.n_bau == 1
        assert tuple(g.centroids[0]) == (0.5, 0.5)

    def test_3x2_large_cells(self):
        g = build_grid(3, 2, 9.0, (0, 0))
        assert g.n_bau == 6
        assert tuple(g.centroids[0]) == (4.5, 4.5)

    @pytest.mark.parametrize("nx,ny,cell", [(0, 2, 1.0), (2, 0, 1.0), (2, 2, 0.0),
                                            (2, 2, -1.0)])
    def test_invalid_arguments(self, nx, ny, cell):
        with pytest.raises(ValueError):
            build_grid(nx, ny, cell)

    def test_bau_index_at(self):
        g = build_grid(3, 2, 9.0)
        assert g.bau_index_at((4.5, 4.5)) == 0
        assert g.bau_index_at((22.5, 13.5)) == 5
        with pytest.raises(ValueError):
            g.bau_index_at((5.0, 4.5))


class TestFootprintRow:
    def test_single_bau_identity(self):
        g = build_grid(2, 2, 1.0)
        row = footprint_row(Footprint(np.array([3])), g).toarray().ravel()
        assert row[3] == 1.0 and row.sum() == 1.0

    def test_three_baus_equal_weights(self):
        g = build_grid(2, 2, 1.0)
        row = footprint_row(Footprint(np.array([1, 2, 3])), g).toarray().ravel()
        assert np.allclose(row[[1, 2, 3]], 1 / 3)
        assert row[0] == 0.0

    def test_aggregated_value_is_mean(self):
        g = build_grid(2, 1, 1.0)
        row = footprint_row(Footprint(np.array([0, 1])), g)
        assert (row @ np.array([1.0, 3.0]))[0] == pytest.approx(2.0)

    def test_out_of_range_raises(self):
        g = build_grid(2, 2, 1.0)
        with pytest.raises(InvalidFootprintError):
            footprint_row(Footprint(np.array([4])), g)

    def test_masked_bau_rejected(self):
        mask = np.array([True, True, True, False])
        g = build_grid(2, 2, 1.0, mask=mask)
        with pytest.raises(InvalidFootprintError):
            footprint_row(Footprint(np.array([3])), g)

    @given(st.sets(st.integers(min_value=0, max_value=24), min_size=1))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_nonnegative(self, idx):
        g = build_grid(5, 5, 1.0)
        row = footprint_row(Footprint(np.array(sorted(idx))), g).toarray().ravel()
        assert row.min() >= 0.0
        assert row.sum() == pytest.approx(1.0, abs=1e-15)

    def test_linearity_of_aggregation(self):
        g = build_grid(4, 4, 1.0)
        rng = np.random.default_rng(0)
        f, h = rng.standard_normal(16), rng.standard_normal(16)
        row = footprint_row(Footprint(np.array([0, 5, 9])), g)
        lhs = (row @ (2.0 * f + 3.0 * h))[0]
        assert lhs == pytest.approx(2.0 * (row @ f)[0] + 3.0 * (row @ h)[0])


class TestMCAverage:
    def test_constant_exact(self):
        g = build_grid(2, 2, 1.0)
        assert mc_average(lambda p: np.full(len(p), 7.0), g, 0, 30, 1) == 7.0

    def test_linear_within_mc_error(self):
        g = build_grid(1, 1, 1.0)
        n = 3000
        val = mc_average(lambda p: p[:, 0], g, 0, n, 2)
        assert abs(val - 0.5) < 3.0 * (1 / np.sqrt(12)) / np.sqrt(n)

    def test_default_n_points_is_30(self):
        g = build_grid(1, 1, 1.0)
        s = BAUPointSample(g)
        assert s.n_points == 30

    def test_bitwise_reproducible(self):
        g = build_grid(3, 3, 2.0)
        a = mc_average(lambda p: np.sin(p[:, 0]) + p[:, 1], g, 4, 30, 99)
        b = mc_average(lambda p: np.sin(p[:, 0]) + p[:, 1], g, 4, 30, 99)
        assert a == b

    def test_points_random_access_consistency(self):
        g = build_grid(40, 40, 1.0)
        s = BAUPointSample(g, seed=5)
        sub = s.points_for(np.array([7, 1203]))
        full = s.points_for(np.arange(g.n_bau))
        assert np.array_equal(sub[0], full[7])
        assert np.array_equal(sub[1], full[1203])

    def test_points_inside_cell(self):
        g = build_grid(2, 2, 3.0)
        s = BAUPointSample(g, seed=0)
        pts = s.points_for(np.array([2]))[0]
        c = g.centroids[2]
        assert (np.abs(pts - c) <= 1.5).all()


class TestAggregateCovariates:
    def test_intercept_column_all_ones(self):
        g = build_grid(3, 3, 1.0)
        fps = [Footprint(np.array([i])) for i in range(9)]
        fns = [lambda p: np.ones(len(p)), lambda p: p[:, 1], lambda p: p[:, 1] ** 2]
        X = aggregate_covariates(fns, fps, g)
        assert np.allclose(X[:, 0], 1.0)

    def test_single_bau_equals_bau_level(self):
        g = build_grid(2, 2, 1.0)
        s = BAUPointSample(g)
        bau_vals = s.average(lambda p: p[:, 0] * p[:, 1])
        fps = [Footprint(np.array([i])) for i in range(4)]
        X = aggregate_covariates([lambda p: p[:, 0] * p[:, 1]], fps, g)
        assert np.allclose(X[:, 0], bau_vals)

    def test_two_bau_mean(self):
        g = build_grid(2, 1, 1.0)
        fps = [Footprint(np.array([0, 1]))]
        X = aggregate_covariates([lambda p: np.ones(len(p))], fps, g,
                                 bau_values=np.array([[0.0], [2.0]]))
        assert X[0, 0] == pytest.approx(1.0)

    def test_footprint_matrix_empty(self):
        g = build_grid(2, 2, 1.0)
        assert footprint_matrix([], g).shape == (0, 4)
