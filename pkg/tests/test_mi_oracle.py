"""Brute-force information-theory oracle tests: definition agreement, the
diversity-loss identity, and exhaustive point-mass optimality."""

import math

import numpy as np
import pytest

from immunity.mi_oracle import (ConditionalTable, loss_identity_residual,
                                mutual_information_exact, mutual_information_ratio_form,
                                optimality_search, simplex_grid)


class TestConditionalTable:
    def test_default_uniform_prior(self):
        t = ConditionalTable(np.eye(3))
        assert np.array_equal(t.prior, np.full(3, 1 / 3))
        assert t.has_uniform_prior()

    def test_rejects_unnormalized_rows(self):
        with pytest.raises(ValueError, match="sum to 1"):
            ConditionalTable(np.array([[0.5, 0.4], [0.5, 0.5]]))

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            ConditionalTable(np.array([[1.2, -0.2], [0.5, 0.5]]))

    def test_rejects_bad_prior(self):
        with pytest.raises(ValueError, match="prior"):
            ConditionalTable(np.eye(2), prior=np.array([0.9, 0.2]))


class TestExactMi:
    def test_deterministic_dependence_is_ln_two(self):
        t = ConditionalTable(np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert abs(mutual_information_exact(t) - math.log(2)) <= 1e-15

    def test_identical_rows_are_independent(self):
        row = np.random.default_rng(0).dirichlet(np.ones(6))
        t = ConditionalTable(np.tile(row, (3, 1)))
        assert abs(mutual_information_exact(t)) <= 1e-12

    def test_cross_check_against_ratio_form(self):
        t = ConditionalTable(np.array([[1.0, 0.0], [0.5, 0.5]]))
        direct = mutual_information_exact(t)
        assert abs(direct - mutual_information_ratio_form(t)) <= 1e-12
        assert direct > 0

    def test_nonuniform_prior_supported_in_direct_form(self):
        t = ConditionalTable(np.eye(2), prior=np.array([0.9, 0.1]))
        expected = -(0.9 * math.log(0.9) + 0.1 * math.log(0.1))  # H(E) for deterministic C|E
        assert abs(mutual_information_exact(t) - expected) <= 1e-12

    def test_bounds_random_sweep(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.choice([2, 3, 5]))
            t = ConditionalTable(rng.dirichlet(np.ones(8), size=n))
            mi = mutual_information_exact(t)
            assert -1e-12 <= mi <= math.log(n) + 1e-12


class TestRatioForm:
    def test_identical_rows_zero(self):
        row = np.random.default_rng(2).dirichlet(np.ones(5))
        assert abs(mutual_information_ratio_form(ConditionalTable(np.tile(row, (4, 1))))) <= 1e-12

    def test_disjoint_point_masses(self):
        assert abs(mutual_information_ratio_form(ConditionalTable(np.eye(2)))
                   - math.log(2)) <= 1e-15

    def test_randomized_equivalence_sweep(self):
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            n = int(rng.choice([2, 3, 5]))
            g = int(rng.integers(2, 17))
            t = ConditionalTable(rng.dirichlet(np.ones(g), size=n))
            worst = max(worst, abs(mutual_information_exact(t)
                                   - mutual_information_ratio_form(t)))
        assert worst <= 1e-12

    def test_nonuniform_prior_rejected(self):
        t = ConditionalTable(np.eye(2), prior=np.array([0.7, 0.3]))
        with pytest.raises(ValueError, match="uniform"):
            mutual_information_ratio_form(t)


class TestLossIdentity:
    def test_identical_heatmaps(self):
        rows = np.tile(np.random.default_rng(4).dirichlet(np.ones(16)), (3, 1))
        assert loss_identity_residual(rows) <= 1e-12

    def test_disjoint_heatmaps(self):
        assert loss_identity_residual(np.eye(4)) <= 1e-12

    def test_random_sweep_residual(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            n = int(rng.choice([2, 3, 5]))
            g = int(rng.choice([4, 16, 64]))
            worst = max(worst, loss_identity_residual(rng.dirichlet(np.ones(g), size=n)))
        assert worst <= 1e-9


class TestSimplexGrid:
    def test_counts_and_normalization(self):
        grid = simplex_grid(3, 0.1)
        assert len(grid) == math.comb(10 + 2, 2)
        assert np.abs(grid.sum(axis=1) - 1.0).max() <= 1e-12

    def test_resolution_must_divide_one(self):
        with pytest.raises(ValueError, match="divide"):
            simplex_grid(2, 0.3)

    def test_cell_cap(self):
        with pytest.raises(ValueError, match="capped"):
            simplex_grid(5, 0.5)


class TestOptimalitySearch:
    def test_two_cell_example(self):
        res = optimality_search(np.array([[0.9, 0.1]]), 0.01)
        assert np.array_equal(res.maximizer, [0.0, 1.0])
        assert res.argmin_cell == 1

    def test_uniform_other_rows_tie_at_vertices(self):
        res = optimality_search(np.array([[0.5, 0.5]]), 0.1)
        assert sorted(res.maximizer.tolist()) == [0.0, 1.0]

    def test_three_expert_three_cell(self):
        res = optimality_search(np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1]]), 0.02)
        assert np.max(np.abs(res.maximizer - np.array([0.0, 0.0, 1.0]))) <= 0.02 + 1e-9
        assert res.argmin_cell == 2

    def test_coarse_resolution_still_at_vertex(self):
        res = optimality_search(np.array([[0.6, 0.3, 0.1]]), 0.5)
        assert np.max(np.abs(res.maximizer - np.eye(3)[res.argmin_cell])) <= 0.5 + 1e-9

    def test_randomized_configurations(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            n = int(rng.choice([2, 3]))
            g = int(rng.integers(2, 5))
            fixed = rng.dirichlet(np.ones(g), size=n - 1)
            res = optimality_search(fixed, 0.02)
            tied = np.flatnonzero(res.pooled_fixed <= res.pooled_fixed.min() + 1e-12)
            assert any(np.max(np.abs(res.maximizer - np.eye(g)[k])) <= 0.02 + 1e-9
                       for k in tied)

    def test_bad_resolution_rejected(self):
        with pytest.raises(ValueError, match="divide"):
            optimality_search(np.array([[0.5, 0.5]]), 0.33)
