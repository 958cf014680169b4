#!/usr/bin/env python3
"""
kernel_lab - Brownian Calibration Tests
Tests closed-form Brownian posteriors, the CV/ML/ICV amplitude estimators,
path samplers and calibration ratios.

Usage:
    python test_calibration.py              # Run all tests
    python test_calibration.py --verbose    # Run with detailed output
    python test_calibration.py --fast       # Skip sampling-heavy tests
"""

import math
import os
import sys
import unittest

import numpy as np

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.bq import LebesgueInterval, bq_posterior, kme
from app.calibration import (CHOLESKY_MAX_POINTS, ESTIMATORS, Partition, PathSamplerSpec, ProcessKind,
                             bm_gram_inverse, bm_integral, bm_integral_variance, bm_posterior_cov,
                             bm_posterior_mean, calib_ratio_bq, calibration_replicate, cv_decomposition,
                             cv_estimate, cv_estimate_generic, icv_estimate, ml_estimate, ml_estimate_generic,
                             ml_functional_limit, quadratic_variation, rate_slope, sample_path)
from app.gp_core import Dataset, fit, predict_cov, predict_mean
from app.kernels import KernelSpec, gram


def random_partition(rng, n, T=1.0):
    points = np.sort(rng.uniform(0.0, T, size=n))
    points = points[np.concatenate(([True], np.diff(points) > 1e-3))]
    points = points[points > 1e-3]
    return Partition(T=T, points=points)


class BaseTestCase(unittest.TestCase):
    """Base test case with a seeded generator"""

    def setUp(self):
        self.rng = np.random.default_rng(2024)


class PartitionTests(BaseTestCase):
    """Test partition construction and refinement"""

    def test_uniform(self):
        """Test x_n = n T / N ending exactly at T"""
        part = Partition.uniform(4, T=2.0)
        np.testing.assert_allclose(part.points, [0.5, 1.0, 1.5, 2.0])
        self.assertEqual(part.points[-1], 2.0)
        self.assertAlmostEqual(part.uniform_step(), 0.5)

    def test_validation(self):
        """Test invalid partitions are rejected"""
        with self.assertRaises(ValueError):
            Partition(T=1.0, points=[0.0, 0.5])
        with self.assertRaises(ValueError):
            Partition(T=1.0, points=[0.5, 0.5])
        with self.assertRaises(ValueError):
            Partition(T=1.0, points=[0.5, 1.5])
        with self.assertRaises(ValueError):
            Partition.uniform(0)

    def test_refine_keeps_nodes(self):
        """Test refinement inserts points and keeps every original node"""
        part = Partition(T=1.0, points=[0.2, 0.5, 1.0])
        fine = part.refine(4)
        self.assertEqual(fine.size, 12)
        np.testing.assert_array_equal(fine.points[3::4], part.points)
        self.assertIsNone(part.uniform_step())


class BrownianPosteriorTests(BaseTestCase):
    """Test the closed-form Brownian posterior"""

    def setUp(self):
        super().setUp()
        self.part = Partition(T=1.0, points=[0.2, 0.5, 0.9])
        self.f = np.array([0.4, -0.1, 0.3])

    def test_interpolates_nodes(self):
        """Test x = x_n returns f_n"""
        np.testing.assert_allclose(bm_posterior_mean(self.part, self.f, self.part.points), self.f)

    def test_midpoint_average(self):
        """Test the interval midpoint returns the endpoint average"""
        self.assertAlmostEqual(bm_posterior_mean(self.part, self.f, 0.35), 0.15, places=14)

    def test_matches_generic_gp(self):
        """Test closed-form mean and covariance against the generic GP on 50 random partitions"""
        spec = KernelSpec.brownian()
        for _ in range(50):
            part = random_partition(self.rng, int(self.rng.integers(2, 51)))
            f = self.rng.normal(size=part.size)
            post = fit(spec, Dataset(part.points, f))
            x, x2 = self.rng.uniform(0.0, 1.0, size=2)
            self.assertAlmostEqual(bm_posterior_mean(part, f, x), predict_mean(post, x), delta=1e-8)
            self.assertAlmostEqual(bm_posterior_cov(part, x, x2), predict_cov(post, x, x2), delta=1e-8)

    def test_bridge_variance(self):
        """Test the bridge variance between nodes and the Brownian tail after x_N"""
        self.assertAlmostEqual(bm_posterior_cov(self.part, 0.3, 0.3), (0.5 - 0.3) * (0.3 - 0.2) / 0.3, places=14)
        self.assertAlmostEqual(bm_posterior_cov(self.part, 0.95, 0.95), 0.05, places=14)
        self.assertEqual(bm_posterior_cov(self.part, 0.3, 0.7), 0.0)

    def test_gram_inverse_two_points(self):
        """Test x = {1, 2} gives [[2, -1], [-1, 1]]"""
        inv = bm_gram_inverse(Partition(T=2.0, points=[1.0, 2.0]))
        np.testing.assert_allclose(inv, [[2.0, -1.0], [-1.0, 1.0]], atol=1e-14)

    def test_gram_inverse_single_point(self):
        """Test x = {a} gives [[1 / a]]"""
        np.testing.assert_allclose(bm_gram_inverse(Partition(T=1.0, points=[0.25])), [[4.0]])

    def test_gram_inverse_product(self):
        """Test inverse times Gram is the identity on 50 random partitions with N <= 50"""
        for _ in range(50):
            part = random_partition(self.rng, int(self.rng.integers(2, 51)))
            G = gram(KernelSpec.brownian(), part.points).values
            np.testing.assert_allclose(bm_gram_inverse(part) @ G, np.eye(part.size), atol=1e-10)

    def test_integral_matches_bq(self):
        """Test closed-form integral and variance against the BQ posterior"""
        part = Partition(T=1.5, points=[0.1, 0.4, 0.45, 1.2])
        f = self.rng.normal(size=4)
        spec = KernelSpec.brownian(tau2=2.0)
        mean, var, _ = bq_posterior(spec, kme(spec, LebesgueInterval(1.5)), part.points, f)
        self.assertAlmostEqual(bm_integral(part, f), mean, delta=1e-10)
        self.assertAlmostEqual(bm_integral_variance(part, tau2=2.0), var, delta=1e-10)


class EstimatorTests(BaseTestCase):
    """Test the CV, ML and ICV amplitude estimators"""

    def test_cv_linear_function(self):
        """Test f(x) = x on an equal grid gives 1/N^2"""
        for n in (5, 20):
            part = Partition.uniform(n)
            self.assertAlmostEqual(cv_estimate(part, part.points).value, 1.0 / n ** 2, places=14)

    def test_ml_linear_function(self):
        """Test f(x) = x on an equal grid gives 1/N"""
        part = Partition.uniform(10)
        self.assertAlmostEqual(ml_estimate(part, part.points).value, 0.1, places=14)
        self.assertEqual(ml_estimate(part, np.zeros(10)).value, 0.0)

    def test_icv_vanishes_on_piecewise_linear(self):
        """Test interior terms vanish for a line through the origin"""
        part = random_partition(self.rng, 12)
        self.assertAlmostEqual(icv_estimate(part, 3.0 * part.points).value, 0.0, delta=1e-14)

    def test_decomposition(self):
        """Test CV = ICV + (B1 + B2) / N"""
        part = random_partition(self.rng, 15)
        f = self.rng.normal(size=part.size)
        b1, interior, b2 = cv_decomposition(part, f)
        self.assertAlmostEqual(cv_estimate(part, f).value, b1 + interior + b2, places=14)
        self.assertEqual(icv_estimate(part, f).value, interior)

    def test_generic_equivalence(self):
        """Test closed forms against GP leave-one-out and y^T K^-1 y / N on 50 random partitions"""
        spec = KernelSpec.brownian()
        for _ in range(50):
            part = random_partition(self.rng, int(self.rng.integers(2, 21)))
            f = self.rng.normal(size=part.size)
            self.assertAlmostEqual(cv_estimate(part, f).value, cv_estimate_generic(spec, part.points, f),
                                   delta=1e-8 * max(1.0, cv_estimate(part, f).value))
            self.assertAlmostEqual(ml_estimate(part, f).value, ml_estimate_generic(spec, part.points, f),
                                   delta=1e-8 * max(1.0, ml_estimate(part, f).value))

    def test_nonnegative_and_scale_equivariant(self):
        """Test estimates are non-negative and scale by c^2"""
        part = random_partition(self.rng, 20)
        f = self.rng.normal(size=part.size)
        for name, estimator in ESTIMATORS.items():
            base = estimator(part, f).value
            self.assertGreaterEqual(base, 0.0, name)
            self.assertAlmostEqual(estimator(part, 3.0 * f).value / base, 9.0, delta=1e-12)

    def test_cv_needs_three_points(self):
        """Test CV rejects N < 3"""
        with self.assertRaises(ValueError):
            cv_estimate(Partition.uniform(2), [1.0, 2.0])

    def test_quadratic_variation(self):
        """Test f(x) = x gives 1/N and a unit step contributes 1"""
        part = Partition.uniform(10)
        self.assertAlmostEqual(quadratic_variation(part, part.points), 0.1, places=14)
        self.assertAlmostEqual(quadratic_variation(part, (part.points > 0.55).astype(float)), 1.0, places=14)

    def test_ml_functional_limit(self):
        """Test N * ML approaches the squared L2 norm of f' for f(x) = x^2"""
        part = Partition.uniform(1000)
        self.assertAlmostEqual(ml_functional_limit(part, part.points ** 2), 4.0 / 3.0, delta=1e-3)

    def test_rate_slope(self):
        """Test exact power laws and constants"""
        N = [10, 100, 1000, 10000]
        self.assertAlmostEqual(rate_slope(N, [3.0 * n ** -1.5 for n in N]), -1.5, delta=1e-10)
        self.assertAlmostEqual(rate_slope(N, [2.0] * 4), 0.0, delta=1e-10)
        with self.assertRaises(ValueError):
            rate_slope([10, 100], [1.0, 0.1])


class PathSamplerTests(BaseTestCase):
    """Test seeded path sampling"""

    def test_deterministic(self):
        """Test the same spec gives identical paths"""
        spec = PathSamplerSpec(ProcessKind.FBM, Partition.uniform(64), seed=9, hurst=0.3)
        np.testing.assert_array_equal(sample_path(spec), sample_path(spec))

    def test_jump_function(self):
        """Test the jump path is sin(10x) plus a unit step"""
        part = Partition.uniform(200)
        f = sample_path(PathSamplerSpec(ProcessKind.PIECEWISE_JUMP, part, seed=1))
        step = f - np.sin(10.0 * part.points)
        jumped = step > 0.5
        np.testing.assert_allclose(step, jumped.astype(float), atol=1e-12)
        self.assertTrue(np.all(np.diff(jumped.astype(int)) >= 0))

    def test_invalid_specs(self):
        """Test bad Hurst values, methods and oversize Cholesky grids"""
        with self.assertRaises(ValueError):
            PathSamplerSpec(ProcessKind.FBM, Partition.uniform(4), hurst=1.0)
        with self.assertRaises(ValueError):
            PathSamplerSpec(ProcessKind.BM, Partition.uniform(4), method='exact')
        with self.assertRaises(ValueError):
            sample_path(PathSamplerSpec(ProcessKind.BM, Partition.uniform(CHOLESKY_MAX_POINTS + 1),
                                        method='cholesky'))

    def test_fbm_variance_at_T(self):
        """Test Var f(T) = T^2H over 500 seeds within 3 standard errors"""
        part = Partition.uniform(64, T=2.0)
        ends = np.array([sample_path(PathSamplerSpec(ProcessKind.FBM, part, seed=s, hurst=0.3))[-1]
                         for s in range(500)])
        target = 2.0 ** 0.6
        se = target * math.sqrt(2.0 / (len(ends) - 1))
        self.assertLess(abs(ends.var(ddof=1) - target), 3 * se)
        self.assertLess(abs(ends[:200].mean()), 3 * math.sqrt(target) / math.sqrt(200))

    def test_bm_quadratic_variation(self):
        """Test BM quadratic variation on [0, 1] lands in [0.9, 1.1]"""
        part = Partition.uniform(100_000)
        inside = sum(0.9 <= quadratic_variation(part, sample_path(PathSamplerSpec(ProcessKind.BM, part, seed=s)))
                     <= 1.1 for s in range(100))
        self.assertGreaterEqual(inside, 95)

    def test_ou_stationary_variance(self):
        """Test the OU sampler matches the kernel variance at T"""
        part = Partition.uniform(50, T=3.0)
        ends = np.array([sample_path(PathSamplerSpec(ProcessKind.OU, part, seed=s, rate=0.5))[-1]
                         for s in range(500)])
        target = 0.25 * (1.0 - math.exp(-0.5 * 6.0))
        se = target * math.sqrt(2.0 / 499)
        self.assertLess(abs(ends.var(ddof=1) - target), 3 * se)


class CalibrationRatioTests(BaseTestCase):
    """Test Monte Carlo calibration ratios"""

    def test_oracle_amplitude_gives_one(self):
        """Test the oracle amplitude self-normalizes the ratio to 1"""
        runs = [calibration_replicate(ProcessKind.BM, 20, s) for s in range(10)]
        mse = float(np.mean([r.squared_error for r in runs]))
        oracle = mse / bm_integral_variance(Partition.uniform(20))
        ratios = calib_ratio_bq(ProcessKind.BM, 20, [], amplitude_override=oracle, runs=runs)
        for value in ratios.values():
            self.assertAlmostEqual(value, 1.0, delta=1e-12)

    def test_runs_match_seeds(self):
        """Test precomputed runs and seeds give the same ratios"""
        runs = [calibration_replicate(ProcessKind.BM, 15, s) for s in range(4)]
        self.assertEqual(calib_ratio_bq(ProcessKind.BM, 15, range(4)),
                         calib_ratio_bq(ProcessKind.BM, 15, [], runs=runs))

    def test_needs_seeds(self):
        """Test an empty replicate list is rejected"""
        with self.assertRaises(ValueError):
            calib_ratio_bq(ProcessKind.BM, 10, [])

    def test_well_specified_brownian(self):
        """Test R_CV stays in [0.1, 10] for Brownian integrands"""
        for N in (100, 1000):
            ratios = calib_ratio_bq(ProcessKind.BM, N, range(50))
            self.assertGreater(ratios['CV'], 0.1)
            self.assertLess(ratios['CV'], 10.0)

    def test_ml_rate_on_integrated_fbm(self):
        """Test ML estimates decay like 1/N on smooth iFBM paths"""
        grid = [100, 1000, 10000]
        means = []
        for N in grid:
            part = Partition.uniform(N)
            values = [ml_estimate(part, sample_path(PathSamplerSpec(ProcessKind.IFBM, part, seed=s))).value
                      for s in range(100)]
            means.append(float(np.mean(values)))
        self.assertAlmostEqual(rate_slope(grid, means), -1.0, delta=0.15)


def run_tests(verbosity=2, fast_mode=False):
    """Run the test suite"""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    test_classes = [
        PartitionTests,
        BrownianPosteriorTests,
        EstimatorTests,
    ]
    if not fast_mode:
        test_classes.extend([PathSamplerTests, CalibrationRatioTests])

    for test_class in test_classes:
        suite.addTests(loader.loadTestsFromTestCase(test_class))

    runner = unittest.TextTestRunner(verbosity=verbosity)
    return runner.run(suite)


if __name__ == '__main__':
    import argparse

    parser = argparse.ArgumentParser(description='kernel_lab calibration tests')
    parser.add_argument('--verbose', '-v', action='store_true', help='Verbose output')
    parser.add_argument('--fast', '-f', action='store_true', help='Skip sampling-heavy tests')
    parser.add_argument('--quiet', '-q', action='store_true', help='Minimal output')
    args = parser.parse_args()

    verbosity = 1 if args.quiet else 2

    print("=" * 70)
    print("kernel_lab - Calibration Tests")
    print("=" * 70)
    print(f"Mode: {'Fast (closed forms only)' if args.fast else 'Full'}")
    print(f"Verbosity: {'Quiet' if args.quiet else 'Verbose'}")
    print("=" * 70)
    print()

    result = run_tests(verbosity=verbosity, fast_mode=args.fast)

    print()
    print("=" * 70)
    print("Test Summary")
    print("=" * 70)
    print(f"Tests run: {result.testsRun}")
    print(f"Successes: {result.testsRun - len(result.failures) - len(result.errors)}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print(f"Skipped: {len(result.skipped)}")
    print("=" * 70)

    sys.exit(0 if result.wasSuccessful() else 1)
