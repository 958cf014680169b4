#!/usr/bin/env python3
"""
kernel_lab - Bayesian Quadrature Tests
Tests kernel mean embeddings, the BQ posterior and optimally-weighted MMD.

Usage:
    python test_bq.py              # Run all tests
    python test_bq.py --verbose    # Run with detailed output
    python test_bq.py --fast       # Skip Monte Carlo embedding checks
"""

import math
import os
import sys
import unittest

import numpy as np

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from app.bq import (GaussianMeasure, LebesgueInterval, UniformBox, bq_posterior, kme, kme_eval, kme_initial_error,
                    monte_carlo_embedding, ow_mmd2, ow_weights, rule_squared_error, standard_gaussian_base)
from app.exceptions import SingularMatrixError, UnsupportedEmbeddingError
from app.gp_core import JitterPolicy
from app.kernels import KernelSpec, evaluate, gram
from app.mmd import EmpiricalMeasure, mmd2_weighted


def quadratic_form(emb, kernel, nodes, weights):
    """initial_error - 2 w.mu + w^T K w evaluated directly"""
    mu = emb.eval(nodes)
    K = gram(kernel, nodes).values
    return emb.initial_error() - 2.0 * float(weights @ mu) + float(weights @ K @ weights)


class BaseTestCase(unittest.TestCase):
    """Base test case with the standard Gaussian setting"""

    def setUp(self):
        self.rng = np.random.default_rng(5)
        self.gauss = KernelSpec.gaussian(lengthscale=1.0)
        self.normal = GaussianMeasure(np.zeros(1), np.eye(1))
        self.emb = kme(self.gauss, self.normal)
        self.brownian = KernelSpec.brownian()
        self.unit_interval = kme(self.brownian, LebesgueInterval(1.0))


class EmbeddingTests(BaseTestCase):
    """Test closed-form embeddings and initial errors"""

    def test_brownian_embedding(self):
        """Test Brownian T=1 at x=1 gives 1/2"""
        self.assertAlmostEqual(kme_eval(self.unit_interval, 1.0), 0.5, places=14)

    def test_gaussian_embedding_at_origin(self):
        """Test Gaussian l=1 under N(0, 1) at x=0 gives 1/sqrt(2)"""
        self.assertAlmostEqual(kme_eval(self.emb, 0.0), 1.0 / math.sqrt(2.0), places=14)

    def test_gaussian_initial_error(self):
        """Test Gaussian l=1 under N(0, 1) has initial error 1/sqrt(3)"""
        self.assertAlmostEqual(kme_initial_error(self.emb), 1.0 / math.sqrt(3.0), places=14)

    def test_brownian_initial_error(self):
        """Test Brownian on [0, 1] has initial error 1/3, scaling as T^3"""
        self.assertAlmostEqual(kme_initial_error(self.unit_interval), 1.0 / 3.0, places=14)
        emb = kme(KernelSpec.brownian(tau2=2.0), LebesgueInterval(2.0))
        self.assertAlmostEqual(kme_initial_error(emb), 2.0 * 8.0 / 3.0, places=12)

    def test_brownian_outside_interval(self):
        """Test evaluation outside [0, T] is rejected"""
        with self.assertRaises(ValueError):
            kme_eval(self.unit_interval, 1.5)

    def test_unsupported_pair(self):
        """Test kernel/measure pairs without a closed form raise"""
        with self.assertRaises(UnsupportedEmbeddingError):
            kme(KernelSpec.matern(1.5), self.normal)
        with self.assertRaises(UnsupportedEmbeddingError):
            kme(self.brownian, self.normal)

    def test_monte_carlo_is_not_a_closed_form(self):
        """Test a Monte Carlo embedding is never accepted where a closed form is required"""
        mc = monte_carlo_embedding(self.gauss, lambda s, n: self.normal.sample(s, n), 100, seed=0)
        with self.assertRaises(UnsupportedEmbeddingError):
            kme_eval(mc, 0.0)

    def test_measure_validation(self):
        """Test malformed measures are rejected"""
        with self.assertRaises(ValueError):
            GaussianMeasure(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
        with self.assertRaises(ValueError):
            UniformBox([0.0], [0.0])
        with self.assertRaises(ValueError):
            LebesgueInterval(0.0)


class MonteCarloEmbeddingTests(BaseTestCase):
    """Test closed forms against large-sample averages"""

    def test_gaussian_measure_random_cases(self):
        """Test ten random Gaussian settings in up to three dimensions within 1% of 10^6-draw Monte Carlo"""
        for case in range(10):
            d = int(self.rng.integers(1, 4))
            Q, _ = np.linalg.qr(self.rng.standard_normal((d, d)))
            cov = Q @ np.diag(self.rng.uniform(0.2, 1.0, d)) @ Q.T
            cov = 0.5 * (cov + cov.T)
            measure = GaussianMeasure(self.rng.uniform(-1.0, 1.0, d), cov)
            kernel = KernelSpec.gaussian(lengthscale=float(self.rng.uniform(0.8, 2.0)))
            X = measure.mean + 0.5 * self.rng.standard_normal((3, d))
            emb = kme(kernel, measure)
            mc = monte_carlo_embedding(kernel, measure.sample, 1_000_000, seed=case)
            with self.subTest(case=case, d=d):
                np.testing.assert_allclose(emb.eval(X), mc.eval(X), rtol=0.01)
                self.assertAlmostEqual(emb.initial_error() / mc.initial_error(), 1.0, delta=0.01)

    def test_uniform_box(self):
        """Test the uniform-box closed form within 1% of Monte Carlo"""
        kernel = KernelSpec.gaussian(lengthscale=0.5)
        box = UniformBox([0.0, -1.0], [1.0, 2.0])
        emb = kme(kernel, box)
        mc = monte_carlo_embedding(kernel, box.sample, 200_000, seed=2)
        X = np.array([[0.5, 0.5], [0.2, -0.5], [0.9, 1.5]])
        np.testing.assert_allclose(emb.eval(X), mc.eval(X), rtol=0.01)
        self.assertAlmostEqual(emb.initial_error() / mc.initial_error(), 1.0, delta=0.01)


class PosteriorTests(BaseTestCase):
    """Test the Bayesian quadrature posterior"""

    def test_single_node(self):
        """Test N=1 gives mu(x) f(x) / k(x, x)"""
        mean, _, _ = bq_posterior(self.gauss, self.emb, [[0.3]], [2.0])
        expected = kme_eval(self.emb, 0.3) * 2.0 / evaluate(self.gauss, 0.3, 0.3)
        self.assertAlmostEqual(mean, expected, places=14)

    def test_brownian_uniform_grid_variance(self):
        """Test the Brownian grid variance is T^3 / (12 N^2)"""
        for n in (1, 4, 16):
            nodes = np.arange(1, n + 1) / n
            _, var, _ = bq_posterior(self.brownian, self.unit_interval, nodes, np.zeros(n))
            self.assertAlmostEqual(var, 1.0 / (12 * n ** 2), delta=1e-10)

    def test_mean_is_quadrature_rule(self):
        """Test I_BQ equals the weighted sum with the rule's weights"""
        nodes = self.rng.normal(size=(6, 1))
        f = np.sin(nodes[:, 0])
        mean, _, rule = bq_posterior(self.gauss, self.emb, nodes, f)
        self.assertAlmostEqual(mean, rule.integrate(f), delta=1e-12)

    def test_variance_is_rule_mmd(self):
        """Test var_BQ equals the squared MMD of the rule"""
        nodes = np.array([[-2.0], [-1.0], [0.0], [0.5], [1.8]])
        _, var, rule = bq_posterior(self.gauss, self.emb, nodes, np.ones(5))
        self.assertAlmostEqual(var, rule_squared_error(rule), delta=1e-10)

    def test_amplitude_scaling(self):
        """Test amplitude leaves the mean unchanged and scales the variance"""
        nodes = np.array([[-1.5], [-0.4], [0.3], [1.0], [2.2]])
        f = nodes[:, 0] ** 2
        mean1, var1, _ = bq_posterior(self.gauss, self.emb, nodes, f)
        scaled = self.gauss.with_amplitude(7.0)
        mean7, var7, _ = bq_posterior(scaled, kme(scaled, self.normal), nodes, f)
        self.assertAlmostEqual(mean1, mean7, delta=1e-10)
        self.assertAlmostEqual(var7, 7.0 * var1, delta=1e-10)

    def test_adding_nodes_never_increases_variance(self):
        """Test variance is non-increasing as Brownian nodes are added"""
        nodes = self.rng.uniform(0.05, 1.0, size=10)
        previous = kme_initial_error(self.unit_interval)
        for n in range(1, 11):
            _, var, _ = bq_posterior(self.brownian, self.unit_interval, nodes[:n], np.zeros(n))
            self.assertLessEqual(var, previous + 1e-10)
            previous = var

    def test_regularizer_and_mismatch(self):
        """Test negative jitter and a foreign kernel are rejected"""
        with self.assertRaises(ValueError):
            bq_posterior(self.gauss, self.emb, [[0.0]], [1.0], jitter=-1.0)
        with self.assertRaises(ValueError):
            bq_posterior(KernelSpec.gaussian(lengthscale=2.0), self.emb, [[0.0]], [1.0])

    def test_duplicate_nodes_without_jitter(self):
        """Test a singular Gram raises when jitter escalation is disabled"""
        with self.assertRaises(SingularMatrixError):
            bq_posterior(self.gauss, self.emb, [[0.0], [0.0]], [1.0, 1.0], jitter_policy=JitterPolicy.none())


class OptimalWeightTests(BaseTestCase):
    """Test the optimally-weighted estimator"""

    def test_single_node(self):
        """Test N=1 gives w = mu(u) / c(u, u)"""
        w = ow_weights(self.gauss, self.emb, [[0.7]])
        self.assertAlmostEqual(w[0], kme_eval(self.emb, 0.7) / evaluate(self.gauss, 0.7, 0.7), places=14)

    def test_optimal_against_random_weights(self):
        """Test w* beats uniform weights and 200 random weight vectors"""
        nodes = self.rng.normal(size=(6, 1))
        w_star = ow_weights(self.gauss, self.emb, nodes)
        best = quadratic_form(self.emb, self.gauss, nodes, w_star)
        self.assertLessEqual(best, quadratic_form(self.emb, self.gauss, nodes, np.full(6, 1 / 6)) + 1e-10)
        for _ in range(200):
            w = self.rng.normal(scale=0.5, size=6)
            self.assertLessEqual(best, quadratic_form(self.emb, self.gauss, nodes, w) + 1e-10)

    def test_stationary_point(self):
        """Test the gradient 2(Kw - mu) vanishes at w*"""
        nodes = np.array([[-1.0], [0.2], [1.1]])
        w = ow_weights(self.gauss, self.emb, nodes)
        grad = 2.0 * (gram(self.gauss, nodes).values @ w - self.emb.eval(nodes))
        self.assertLessEqual(float(np.linalg.norm(grad)), 1e-8)

    def test_identity_generator(self):
        """Test ow_mmd2 with an identity generator and c = k equals mmd2_weighted"""
        nodes = self.rng.normal(size=(8, 1))
        Q = self.rng.normal(size=(30, 1))
        w = ow_weights(self.gauss, self.emb, nodes)
        expected = mmd2_weighted(self.gauss, EmpiricalMeasure(nodes, w), Q)
        self.assertAlmostEqual(ow_mmd2(self.gauss, self.gauss, self.emb, lambda u: u, nodes, Q), expected,
                               delta=1e-12)

    def test_weighted_value_is_nonnegative_against_base(self):
        """Test the OW squared MMD against the base measure itself is a norm"""
        nodes = self.rng.normal(size=(4, 1))
        w = ow_weights(self.gauss, self.emb, nodes)
        self.assertGreaterEqual(quadratic_form(self.emb, self.gauss, nodes, w), -1e-10)

    def test_generator_must_preserve_count(self):
        """Test a generator returning the wrong number of points raises"""
        with self.assertRaises(ValueError):
            ow_mmd2(self.gauss, self.gauss, self.emb, lambda u: u[:2], np.array([[0.0], [1.0], [2.0]]),
                    np.zeros((4, 1)))

    def test_duplicate_base_nodes(self):
        """Test duplicate base nodes suggest jitter or deduplication"""
        with self.assertRaises(SingularMatrixError) as ctx:
            ow_weights(self.gauss, self.emb, [[0.1], [0.1]], JitterPolicy.none())
        self.assertIn('duplicate', str(ctx.exception))

    def test_standard_gaussian_base(self):
        """Test the default base embedding is N(0, I)"""
        emb = standard_gaussian_base(self.gauss, dim=2)
        self.assertEqual(emb.measure.dim, 2)
        self.assertAlmostEqual(emb.initial_error(), 1.0 / 3.0, places=12)


def run_tests(verbosity=2, fast_mode=False):
    """Run the test suite"""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    test_classes = [
        EmbeddingTests,
        PosteriorTests,
        OptimalWeightTests,
    ]
    if not fast_mode:
        test_classes.append(MonteCarloEmbeddingTests)

    for test_class in test_classes:
        suite.addTests(loader.loadTestsFromTestCase(test_class))

    runner = unittest.TextTestRunner(verbosity=verbosity)
    return runner.run(suite)


if __name__ == '__main__':
    import argparse

    parser = argparse.ArgumentParser(description='kernel_lab Bayesian quadrature tests')
    parser.add_argument('--verbose', '-v', action='store_true', help='Verbose output')
    parser.add_argument('--fast', '-f', action='store_true', help='Skip Monte Carlo embedding checks')
    parser.add_argument('--quiet', '-q', action='store_true', help='Minimal output')
    args = parser.parse_args()

    verbosity = 1 if args.quiet else 2

    print("=" * 70)
    print("kernel_lab - Bayesian Quadrature Tests")
    print("=" * 70)
    print(f"Mode: {'Fast (no Monte Carlo)' if args.fast else 'Full'}")
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
