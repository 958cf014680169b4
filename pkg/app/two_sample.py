"""
Permutation two-sample tests and rejection-rate loops.

A statistic is any callable (X, Y) -> float | DiscrepancyEstimate. Statistics may
also expose bind(pooled, seed) returning a copy with all internal randomness and
data-dependent settings (KQD directions, median-heuristic lengthscale) fixed
from the observed pooled sample. permutation_test binds once per test, so every
permutation is scored by the same function and the permutation null is exact.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.exceptions import KernelLabError, StatisticError
from app.kernels import KernelFamily, KernelSpec, as_points, median_heuristic
from app.kqd import (KqdConfig, QuantileWeighting, UNIFORM_WEIGHTING, direction_terms,
                     ekqd_centered, sample_directions)
from app.mmd import DiscrepancyEstimate, Estimator, default_subdiagonals, estimate
from utils.replicate_pool import ReplicatePool
from utils.rng import RngStream

logger = logging.getLogger(__name__)

Sampler = Callable[[RngStream, int], np.ndarray]


@dataclass(frozen=True)
class TestConfig:
    __test__ = False

    level: float = 0.05
    permutations: int = 300
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.level < 1:
            raise ValueError(f"level must lie in (0, 1), got {self.level}")
        if self.permutations < 1:
            raise ValueError(f"need at least one permutation, got {self.permutations}")


@dataclass
class TestResult:
    __test__ = False

    statistic: float
    threshold: float
    reject: bool
    null_samples: np.ndarray = field(repr=False)


def _value(result) -> float:
    if isinstance(result, DiscrepancyEstimate):
        return result.value
    return float(result)


class DiscrepancyStatistic:
    """
    A named discrepancy usable as a permutation-test statistic.

    Args:
        estimator: which MMD or KQD estimator to compute
        spec: kernel; when median is True its lengthscale is reset from the pooled sample
        kqd_config: direction settings for the KQD estimators (seed replaced per test)
        R: subdiagonal count for MMD-Multi (default ceil(log(N)^2))
        nu: quantile weighting for the KQD estimators
        median: apply the median heuristic on bind
    """

    def __init__(self, estimator: Estimator, spec: KernelSpec, kqd_config: Optional[KqdConfig] = None,
                 R: Optional[int] = None, nu: QuantileWeighting = UNIFORM_WEIGHTING, median: bool = False):
        self.estimator = Estimator(estimator)
        self.spec = spec
        self.kqd_config = kqd_config or KqdConfig()
        self.R = R
        self.nu = nu
        self.median = median
        self._directions = None

    @property
    def name(self) -> str:
        return self.estimator.value

    @property
    def is_kqd(self) -> bool:
        return self.estimator in (Estimator.EKQD, Estimator.SUPKQD, Estimator.CENTERED_EKQD)

    def bind(self, pooled, seed: Optional[int] = None) -> 'DiscrepancyStatistic':
        bound = copy.copy(self)
        pooled = as_points(pooled)
        if self.median and self.spec.family in (KernelFamily.GAUSSIAN, KernelFamily.MATERN):
            bound.spec = self.spec.with_lengthscale(median_heuristic(pooled, seed=self.kqd_config.seed))
        if self.is_kqd:
            cfg = self.kqd_config
            if seed is not None:
                cfg = KqdConfig(p=cfg.p, L=cfg.L, M=cfg.M, seed=seed, reference=cfg.reference)
            bound.kqd_config = cfg
            bound._directions = sample_directions(bound.spec, cfg, pooled)
        return bound

    def __call__(self, X, Y) -> DiscrepancyEstimate:
        X, Y = as_points(X), as_points(Y)
        if self.is_kqd and self._directions is None:
            return self.bind(np.vstack([X, Y]))(X, Y)
        meta = {'n': X.shape[0], 'm': Y.shape[0], 'kernel': self.spec.spec_id}
        if self.estimator in (Estimator.EKQD, Estimator.SUPKQD):
            if X.shape[0] != Y.shape[0]:
                raise ValueError("quantile discrepancies need equal sample sizes")
            terms = direction_terms(self._directions, X, Y, self.kqd_config.p, self.nu)
            value = np.mean(terms) if self.estimator == Estimator.EKQD else np.max(terms)
            meta['seed'] = self.kqd_config.seed
            return DiscrepancyEstimate(float(value), self.estimator, meta)
        if self.estimator == Estimator.CENTERED_EKQD:
            value = ekqd_centered(self.spec, X, Y, self.kqd_config, self.nu, self._directions)
            meta['seed'] = self.kqd_config.seed
            return DiscrepancyEstimate(value, self.estimator, meta)
        R = self.R
        if self.estimator == Estimator.MULTI and R is None:
            R = default_subdiagonals(X.shape[0])
        return estimate(self.spec, X, Y, self.estimator, R=R)


STATISTIC_NAMES = {
    'mmd-v': Estimator.V,
    'mmd-u': Estimator.U,
    'mmd-linear': Estimator.LINEAR,
    'mmd-multi': Estimator.MULTI,
    'ekqd': Estimator.EKQD,
    'supkqd': Estimator.SUPKQD,
    'ekqd-centered': Estimator.CENTERED_EKQD,
}


def make_statistic(name: str, spec: KernelSpec, kqd_config: Optional[KqdConfig] = None,
                   R: Optional[int] = None, median: bool = False) -> DiscrepancyStatistic:
    try:
        estimator = STATISTIC_NAMES[name]
    except KeyError:
        raise ValueError(f"unknown statistic '{name}'; expected one of {sorted(STATISTIC_NAMES)}") from None
    return DiscrepancyStatistic(estimator, spec, kqd_config=kqd_config, R=R, median=median)


def threshold_index(level: float, permutations: int) -> int:
    """1-based index of the ceil((1 - level) B)-th order statistic"""
    index = math.ceil((1.0 - level) * permutations - 1e-9)
    return min(max(index, 1), permutations)


def permutation_test(statistic_fn, P, Q, cfg: TestConfig = TestConfig(),
                     pool: Optional[ReplicatePool] = None) -> TestResult:
    """
    Permutation test of P = Q.

    Pools both samples, draws cfg.permutations seeded relabelings that keep
    the group sizes, and rejects when the observed statistic is strictly above
    the (1 - level) empirical quantile of the permutation values.
    """
    X, Y = as_points(P), as_points(Q)
    n = X.shape[0]
    pooled = np.vstack([X, Y])
    root = RngStream.root(cfg.seed)
    stat = statistic_fn
    if hasattr(statistic_fn, 'bind'):
        stat = statistic_fn.bind(pooled, seed=root.split('statistic').state)
    observed = _value(stat(X, Y))

    perm_root = root.split('permutations')
    orders = [perm_root.split(f"perm/{b}").permutation(pooled.shape[0]) for b in range(cfg.permutations)]

    def evaluate(b: int) -> float:
        order = orders[b]
        try:
            return _value(stat(pooled[order[:n]], pooled[order[n:]]))
        except (KernelLabError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise StatisticError(str(exc), b) from exc

    if pool is None:
        null = [evaluate(b) for b in range(cfg.permutations)]
    else:
        null = pool.map_ordered(evaluate, range(cfg.permutations))
    null_samples = np.asarray(null, dtype=float)
    threshold = float(np.sort(null_samples)[threshold_index(cfg.level, cfg.permutations) - 1])
    return TestResult(statistic=observed, threshold=threshold, reject=bool(observed > threshold),
                      null_samples=null_samples)


def replicate_streams(seed: int, rep: int) -> Tuple[RngStream, RngStream, int]:
    """(P stream, Q stream, test seed) for repetition rep"""
    stream = RngStream.root(seed).split(f"rep/{rep}")
    return stream.split('P'), stream.split('Q'), stream.split('test').state


def run_replicates(statistic_fn, generator_P: Sampler, generator_Q: Sampler, N: int, reps: int,
                   cfg: TestConfig = TestConfig(), pool: Optional[ReplicatePool] = None) -> List[TestResult]:
    results = []
    for r in range(reps):
        p_stream, q_stream, test_seed = replicate_streams(cfg.seed, r)
        X = generator_P(p_stream, N)
        Y = generator_Q(q_stream, N)
        rep_cfg = TestConfig(level=cfg.level, permutations=cfg.permutations, seed=test_seed)
        results.append(permutation_test(statistic_fn, X, Y, rep_cfg, pool))
    return results


def rejection_rate(statistic_fn, generator_P: Sampler, generator_Q: Sampler, N: int, reps: int,
                   cfg: TestConfig = TestConfig(), pool: Optional[ReplicatePool] = None) -> float:
    """Fraction of reps in which the permutation test rejects"""
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    results = run_replicates(statistic_fn, generator_P, generator_Q, N, reps, cfg, pool)
    return sum(r.reject for r in results) / reps


def wilson_interval(successes: int, trials: int, z: float = 1.96) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion"""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    phat = successes / trials
    denom = 1.0 + z ** 2 / trials
    centre = (phat + z ** 2 / (2 * trials)) / denom
    half = z * math.sqrt(phat * (1 - phat) / trials + z ** 2 / (4 * trials ** 2)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)
