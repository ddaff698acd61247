import itertools
import unittest

import numpy as np

from piecewise_sir.config import FitConfig
from piecewise_sir.core_model import SirDesign, UnderReporting, build_design
from piecewise_sir.detect import (BlockPartition, ChangePointResult, ThetaEstimate, block_design,
                                  block_fused_lasso, cluster_candidates,
                                  detect_change_points, exhaustive_refine, hard_threshold, lambda_grid,
                                  lambda_max, lambda_path, lambda_path_and_cv, segments_from_points, two_means)
from piecewise_sir.exceptions import InsufficientData
from tests.helpers import sir_series


def _random_design(rng, n, d=2):
    return SirDesign(rng.normal(size=(n, 2)), rng.normal(size=(n, 2, d)))


def _lasso_oracle(gram, corr, lam):
    """Exact lasso solution by enumerating sign patterns and checking KKT."""
    p = len(corr)
    best, best_value = None, np.inf
    for signs in itertools.product((-1, 0, 1), repeat=p):
        signs = np.array(signs, dtype=float)
        active = signs != 0
        coef = np.zeros(p)
        if active.any():
            g = gram[np.ix_(active, active)]
            coef[active] = np.linalg.solve(g, corr[active] - lam * signs[active])
            if np.any(np.sign(coef[active]) != signs[active]):
                continue
        slack = corr - gram @ coef
        if np.any(np.abs(slack[~active]) > lam + 1e-10):
            continue
        value = 0.5 * coef @ gram @ coef - corr @ coef + lam * np.abs(coef).sum()
        if value < best_value:
            best, best_value = coef, value
    return best


class BlockPartitionTest(unittest.TestCase):

    def test_last_block_takes_the_remainder(self):
        partition = BlockPartition.for_rows(20, 7)
        self.assertEqual(partition.boundaries, (1, 8, 21))
        self.assertEqual(partition.n_blocks, 2)
        self.assertEqual(partition.n_rows, 20)
        self.assertEqual(partition.block_of(7), 1)
        self.assertEqual(partition.block_of(8), 2)
        self.assertEqual(partition.block_of(20), 2)
        self.assertEqual(partition.start_day(2), 8)

    def test_too_few_rows(self):
        with self.assertRaises(InsufficientData):
            BlockPartition.for_rows(13, 7)

    def test_head(self):
        partition = BlockPartition.for_rows(30, 5)
        self.assertEqual(partition.head(2).boundaries, (1, 6, 11))

    def test_block_design_is_lower_triangular(self):
        rng = np.random.default_rng(1)
        design = _random_design(rng, 8)
        partition = BlockPartition.for_rows(8, 4)
        X = block_design(design, partition)
        self.assertEqual(X.shape, (16, 4))
        # rows of the first block carry nothing in the second column block
        np.testing.assert_array_equal(X[:8, 2:], 0.0)
        np.testing.assert_array_equal(X[8:, :2], X[8:, 2:])


class LassoTest(unittest.TestCase):

    def test_zero_penalty_is_least_squares(self):
        rng = np.random.default_rng(2)
        design = _random_design(rng, 30)
        partition = BlockPartition.for_rows(30, 10)
        estimate = block_fused_lasso(design, partition, 0.0)
        self.assertTrue(estimate.converged)
        X = block_design(design, partition)
        Y, _ = design.stacked()
        np.testing.assert_allclose(estimate.theta.reshape(-1), np.linalg.solve(X.T @ X, X.T @ Y), atol=1e-8)

    def test_small_penalty_approaches_least_squares(self):
        rng = np.random.default_rng(12)
        design = _random_design(rng, 30)
        partition = BlockPartition.for_rows(30, 10)
        exact = block_fused_lasso(design, partition, 0.0).theta
        near = block_fused_lasso(design, partition, 1e-6, tol=1e-12, max_sweeps=200000).theta
        np.testing.assert_allclose(near, exact, atol=1e-4)

    def test_matches_enumeration_oracle(self):
        rng = np.random.default_rng(3)
        partition = BlockPartition.for_rows(8, 4)
        for _ in range(50):
            design = _random_design(rng, 8)
            X = block_design(design, partition)
            Y, _ = design.stacked()
            gram, corr = X.T @ X / 8, X.T @ Y / 8
            lam = rng.uniform(0.05, 0.9) * np.max(np.abs(corr))
            estimate = block_fused_lasso(design, partition, lam, tol=1e-12, max_sweeps=200000)
            np.testing.assert_allclose(estimate.theta.reshape(-1), _lasso_oracle(gram, corr, lam), atol=1e-6)

    def test_kkt_conditions(self):
        rng = np.random.default_rng(4)
        design = _random_design(rng, 30)
        partition = BlockPartition.for_rows(30, 5)
        lam = 0.2 * lambda_max(design, partition)
        estimate = block_fused_lasso(design, partition, lam, tol=1e-12, max_sweeps=200000)
        X = block_design(design, partition)
        Y, _ = design.stacked()
        coef = estimate.theta.reshape(-1)
        slack = X.T @ (Y - X @ coef) / 30
        zero = coef == 0
        self.assertTrue(np.all(np.abs(slack[zero]) <= lam + 1e-6))
        np.testing.assert_allclose(slack[~zero], lam * np.sign(coef[~zero]), atol=1e-6)

    def test_full_shrinkage_at_lambda_max(self):
        rng = np.random.default_rng(5)
        design = _random_design(rng, 20)
        partition = BlockPartition.for_rows(20, 5)
        lam = lambda_max(design, partition)
        self.assertTrue(np.all(block_fused_lasso(design, partition, lam * 1.0001).theta == 0))
        self.assertTrue(np.any(block_fused_lasso(design, partition, lam * 0.5).theta != 0))

    def test_negative_lambda(self):
        rng = np.random.default_rng(6)
        design = _random_design(rng, 10)
        with self.assertRaises(ValueError):
            block_fused_lasso(design, BlockPartition.for_rows(10, 5), -1.0)

    def test_lambda_grid(self):
        grid = lambda_grid(2.0, 5)
        self.assertEqual(len(grid), 5)
        self.assertAlmostEqual(grid[0], 2.0)
        self.assertTrue(np.all(np.diff(grid) < 0))
        with self.assertRaises(ValueError):
            lambda_grid(2.0, 1)

    def test_grid_of_two_returns_an_endpoint(self):
        rng = np.random.default_rng(7)
        design = _random_design(rng, 40)
        partition = BlockPartition.for_rows(40, 5)
        grid = lambda_grid(lambda_max(design, partition), 2)
        chosen = lambda_path_and_cv(design, partition, grid_size=2)
        self.assertTrue(np.isclose(chosen, grid[0]) or np.isclose(chosen, grid[1]))

    def test_path_is_warm_started_and_sparse_first(self):
        rng = np.random.default_rng(8)
        design = _random_design(rng, 20)
        partition = BlockPartition.for_rows(20, 5)
        grid = lambda_grid(lambda_max(design, partition), 4)
        path = lambda_path(design, partition, grid)
        self.assertEqual(len(path), 4)
        self.assertTrue(np.all(path[0].theta == 0))
        self.assertGreater(np.count_nonzero(path[-1].theta), 0)

    def test_l1_norm_shrinks_as_lambda_grows(self):
        rng = np.random.default_rng(13)
        for _ in range(3):
            design = _random_design(rng, 60)
            partition = BlockPartition.for_rows(60, 5)
            grid = lambda_grid(lambda_max(design, partition), 12)
            norms = [np.abs(e.theta).sum() for e in lambda_path(design, partition, grid, tol=1e-12,
                                                                  max_sweeps=200000)]
            # grid descends, so the norm can only grow along the path
            for smaller, larger in zip(norms, norms[1:]):
                self.assertLessEqual(smaller, larger + 1e-5)


class LambdaSelectionTest(unittest.TestCase):

    def test_pure_noise_prefers_heavy_penalties(self):
        grid_size = 10
        top_quartile = int(np.ceil(grid_size / 4))
        hits = 0
        for seed in range(20):
            rng = np.random.default_rng([14, seed])
            design = _random_design(rng, 100)
            partition = BlockPartition.for_rows(100, 5)
            grid = lambda_grid(lambda_max(design, partition), grid_size)
            chosen = lambda_path_and_cv(design, partition, grid_size=grid_size)
            hits += int(chosen >= grid[top_quartile - 1] * (1 - 1e-9))
        self.assertGreaterEqual(hits, 14)

    def test_noiseless_break_leaves_one_dominant_block(self):
        rng = np.random.default_rng(15)
        x = rng.normal(size=(100, 2, 2))
        coef = np.where(np.arange(1, 101)[:, None] < 51, [1.0, 0.5], [0.2, 1.0])
        design = SirDesign(np.einsum('tij,tj->ti', x, coef), x)
        partition = BlockPartition.for_rows(100, 5)
        lam = lambda_path_and_cv(design, partition, tol=1e-10, max_sweeps=100000)
        self.assertLess(lam, lambda_max(design, partition))
        jumps = block_fused_lasso(design, partition, lam, tol=1e-10, max_sweeps=100000).jumps()
        top = int(np.argmax(jumps))
        self.assertEqual(top + 1, partition.block_of(51))
        self.assertTrue(np.all(np.delete(jumps, top) <= 1e-2 * jumps[top]))


class ThresholdTest(unittest.TestCase):

    def test_two_means(self):
        mask = two_means([0, 0.001, 0.9, 0.002, 0.8])
        np.testing.assert_array_equal(mask, [False, False, True, False, True])

    def _one_break(self):
        series = sir_series((0.1, 0.05), (0.04, 0.06), breaks=(50,), n_days=141)
        design = build_design(series, UnderReporting.none())
        partition = BlockPartition.for_rows(len(design), 7)
        theta = np.zeros((partition.n_blocks, 2))
        theta[0] = (0.1, 0.04)
        theta[partition.block_of(50) - 1] = (-0.05, 0.02)
        return design, partition, ThetaEstimate(theta, 0.0, 1, True)

    def test_selects_the_jump_block(self):
        design, partition, theta = self._one_break()
        result = hard_threshold(theta, design, partition)
        self.assertEqual(result.blocks, (partition.block_of(50),))
        self.assertEqual(result.candidates(partition), (50,))
        self.assertLess(result.bic_trace[1], result.bic_trace[0])

    def test_equal_jumps_select_nothing(self):
        design, partition, theta = self._one_break()
        flat = np.zeros_like(theta.theta)
        flat[0] = (0.1, 0.04)
        result = hard_threshold(ThetaEstimate(flat, 0.0, 1, True), design, partition)
        self.assertEqual(result.blocks, ())


class ClusterTest(unittest.TestCase):

    def test_single_and_empty(self):
        self.assertEqual(cluster_candidates([100], 7), ((100,),))
        self.assertEqual(cluster_candidates([], 7), ())

    def test_two_groups(self):
        self.assertEqual(cluster_candidates([98, 105, 301, 308], 7), ((98, 105), (301, 308)))

    def test_deterministic_for_a_seed(self):
        points = [20, 27, 34, 90, 97, 160]
        self.assertEqual(cluster_candidates(points, 7, seed=11), cluster_candidates(points, 7, seed=11))


class RefineTest(unittest.TestCase):

    def setUp(self):
        self.partition = BlockPartition.for_rows(140, 7)
        self.before = np.array([0.1, 0.04])
        self.after = np.array([0.05, 0.06])
        theta = np.zeros((self.partition.n_blocks, 2))
        theta[0] = self.before
        theta[self.partition.block_of(53) - 1] = self.after - self.before
        self.theta = ThetaEstimate(theta, 0.0, 1, True)

    def test_noiseless_break_is_exact(self):
        series = sir_series((0.1, 0.05), (0.04, 0.06), breaks=(53,), n_days=141)
        design = build_design(series, UnderReporting.none())
        result = exhaustive_refine(design, ((50,),), self.theta, self.partition)
        self.assertEqual(result.final_points, (53,))
        self.assertEqual(result.clipped_windows, 0)
        self.assertAlmostEqual(result.segments[0].beta, 0.1)
        self.assertAlmostEqual(result.segments[1].gamma, 0.06)

    def test_matches_full_scan(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            design = _random_design(rng, 140)
            result = exhaustive_refine(design, ((50,),), self.theta, self.partition)
            # singleton window (43, 57), data rows 43..56
            scores = []
            for s in range(44, 57):
                rows = range(43, 57)
                scores.append(sum(np.sum((design.y[t - 1] - design.x[t - 1] @
                                          (self.before if t < s else self.after)) ** 2) for t in rows))
            self.assertEqual(result.final_points, (44 + int(np.argmin(scores)),))

    def test_window_at_the_edge_is_clipped(self):
        rng = np.random.default_rng(10)
        design = _random_design(rng, 140)
        with self.assertLogs('piecewise_sir.detect', level='WARNING'):
            result = exhaustive_refine(design, ((2,),), self.theta, self.partition)
        self.assertEqual(result.clipped_windows, 1)
        self.assertGreaterEqual(result.final_points[0], 2)

    def test_segments_from_points_validation(self):
        design = build_design(sir_series((0.1,), (0.04,), n_days=30), UnderReporting.none())
        with self.assertRaises(ValueError):
            segments_from_points(design, (1,))
        with self.assertRaises(ValueError):
            segments_from_points(design, (10, 10))
        self.assertEqual(len(segments_from_points(design, (10, 20))), 3)


class MultiClusterRefineTest(unittest.TestCase):
    """Two clusters of two candidates each: windows (50, 57) and (99, 106)."""

    CLUSTERS = ((50, 57), (99, 106))

    def setUp(self):
        self.partition = BlockPartition.for_rows(150, 7)
        self.levels = np.array([[0.1, 0.04], [0.05, 0.06], [0.08, 0.03]])
        theta = np.zeros((self.partition.n_blocks, 2))
        theta[0] = self.levels[0]
        theta[self.partition.block_of(53) - 1] = self.levels[1] - self.levels[0]
        theta[self.partition.block_of(103) - 1] = self.levels[2] - self.levels[1]
        self.theta = ThetaEstimate(theta, 0.0, 1, True)

    def test_noiseless_breaks_are_exact(self):
        series = sir_series((0.1, 0.05, 0.08), (0.04, 0.06, 0.03), breaks=(53, 103), n_days=151)
        design = build_design(series, UnderReporting.none())
        result = exhaustive_refine(design, self.CLUSTERS, self.theta, self.partition)
        self.assertEqual(result.final_points, (53, 103))
        self.assertEqual(result.clusters, self.CLUSTERS)
        self.assertEqual(result.clipped_windows, 0)
        for segment, (beta, gamma) in zip(result.segments, self.levels):
            self.assertAlmostEqual(segment.beta, beta)
            self.assertAlmostEqual(segment.gamma, gamma)

    def test_matches_full_scan_per_window(self):
        rng = np.random.default_rng(16)
        # (data rows, candidate days, level before, level after) per cluster
        windows = ((range(43, 64), range(51, 57), 0, 1), (range(92, 113), range(100, 106), 1, 2))
        for _ in range(10):
            design = _random_design(rng, 150)
            result = exhaustive_refine(design, self.CLUSTERS, self.theta, self.partition)
            expected = []
            for rows, days, before, after in windows:
                scores = []
                for s in days:
                    scores.append(sum(np.sum((design.y[t - 1] - design.x[t - 1] @
                                              self.levels[before if t < s else after]) ** 2) for t in rows))
                expected.append(days[int(np.argmin(scores))])
            self.assertEqual(result.final_points, tuple(expected))


class DetectTest(unittest.TestCase):

    def test_noiseless_single_break(self):
        series = sir_series((0.1, 0.05), (0.04, 0.04), breaks=(60,), n_days=121)
        design = build_design(series, UnderReporting.none())
        config = FitConfig(block_size=5, lambda_grid_size=5, solver_max_sweeps=3000)
        result = detect_change_points(design, config)
        self.assertGreaterEqual(result.n_breaks, 1)
        self.assertLessEqual(min(abs(p - 60) for p in result.final_points), 12)
        self.assertIsNotNone(result.lambda_)
        self.assertEqual(len(result.segments), result.n_breaks + 1)

    def test_result_round_trip(self):
        series = sir_series((0.1, 0.05), (0.04, 0.04), breaks=(30,), n_days=61)
        design = build_design(series, UnderReporting.none())
        result = detect_change_points(design, FitConfig(block_size=5, lambda_=1e-3, solver_max_sweeps=2000))
        self.assertEqual(ChangePointResult.from_dict(result.to_dict()), result)


if __name__ == '__main__':
    unittest.main()
