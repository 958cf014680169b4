"""
Amplitude calibration for the Brownian motion kernel.

Closed forms on a partition 0 = x_0 < x_1 < ... < x_N <= T (f(x_0) = 0):
- bm_posterior_mean / bm_posterior_cov: piecewise-linear interpolant and
  Brownian-bridge covariance
- bm_gram_inverse: tridiagonal inverse of [min(x_i, x_j)]
- cv_estimate, ml_estimate, icv_estimate: amplitude estimators tau^2 from
  leave-one-out, marginal likelihood and interior-only leave-one-out
- bm_integral / bm_integral_variance: Bayesian quadrature under Lebesgue measure

Also houses the test-path samplers (fBm family, OU, a jump function), the
quadratic variation, log-log rate slopes and the BQ calibration ratios.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid

from app.gp_core import Dataset, fit, jittered_cholesky, loo_predictive
from app.kernels import KernelSpec, gram
from utils.rng import RngStream

logger = logging.getLogger(__name__)

CHOLESKY_MAX_POINTS = 20000
TRUTH_REFINEMENT = 16


@dataclass(frozen=True, eq=False)
class Partition:
    """Strictly increasing points 0 < x_1 < ... < x_N <= T"""
    T: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1)
        if not self.T > 0:
            raise ValueError(f"interval end T must be positive, got {self.T}")
        if pts.size < 1:
            raise ValueError("partition needs at least one point")
        if pts[0] <= 0:
            raise ValueError(f"first point must be positive, got {pts[0]}")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("partition points must be strictly increasing")
        if pts[-1] > self.T:
            raise ValueError(f"last point {pts[-1]} exceeds T={self.T}")
        object.__setattr__(self, 'points', pts)

    @classmethod
    def uniform(cls, N: int, T: float = 1.0) -> 'Partition':
        """x_n = n T / N, n = 1..N"""
        if N < 1:
            raise ValueError(f"N must be >= 1, got {N}")
        pts = T * np.arange(1, N + 1) / N
        pts[-1] = T
        return cls(T=T, points=pts)

    @property
    def size(self) -> int:
        return self.points.size

    @property
    def with_origin(self) -> np.ndarray:
        return np.concatenate(([0.0], self.points))

    @property
    def increments(self) -> np.ndarray:
        """x_n - x_{n-1} for n = 1..N, with x_0 = 0"""
        return np.diff(self.with_origin)

    def uniform_step(self) -> Optional[float]:
        """Step h if x_n = n h for all n, else None"""
        h = self.points[0]
        expected = h * np.arange(1, self.size + 1)
        if np.allclose(self.points, expected, rtol=1e-12, atol=0.0):
            return h
        return None

    def refine(self, factor: int) -> 'Partition':
        """Insert factor - 1 equally spaced points inside every interval"""
        if factor < 1:
            raise ValueError(f"refinement factor must be >= 1, got {factor}")
        xs = self.with_origin
        fractions = np.arange(1, factor + 1) / factor
        fine = (xs[:-1, None] + np.diff(xs)[:, None] * fractions[None, :]).reshape(-1)
        fine[factor - 1::factor] = self.points
        return Partition(T=self.T, points=fine)


@dataclass(frozen=True)
class ScaleEstimate:
    value: float
    estimator: str
    N: int


def _values(part: Partition, fvals) -> np.ndarray:
    f = np.asarray(fvals, dtype=float).reshape(-1)
    if f.size != part.size:
        raise ValueError(f"partition has {part.size} points but {f.size} values were given")
    return f


# Closed-form Brownian posterior

def bm_posterior_mean(part: Partition, fvals, x):
    """Piecewise-linear interpolant through (0, 0) and (x_n, f_n), flat after x_N"""
    f = _values(part, fvals)
    xq = np.asarray(x, dtype=float)
    if np.any(xq < 0) or np.any(xq > part.T):
        raise ValueError(f"query outside [0, {part.T}]")
    out = np.interp(xq, part.with_origin, np.concatenate(([0.0], f)))
    return float(out) if out.ndim == 0 else out


def bm_posterior_cov(part: Partition, x: float, x2: float) -> float:
    """Brownian-bridge covariance between nodes, Brownian increments after x_N"""
    a, b = min(x, x2), max(x, x2)
    if a < 0 or b > part.T:
        raise ValueError(f"query outside [0, {part.T}]")
    xs = part.with_origin
    if a >= xs[-1]:
        return a - xs[-1]
    n = int(np.searchsorted(xs, a, side='right'))
    left, right = xs[n - 1], xs[n]
    if b > right:
        return 0.0
    return (right - b) * (a - left) / (right - left)


def bm_gram_inverse(part: Partition) -> np.ndarray:
    """Tridiagonal inverse of the unit-amplitude Brownian Gram matrix"""
    dx = part.increments
    N = part.size
    main = np.empty(N)
    main[:-1] = 1.0 / dx[:-1] + 1.0 / dx[1:]
    main[-1] = 1.0 / dx[-1]
    off = -1.0 / dx[1:]
    return np.diag(main) + np.diag(off, 1) + np.diag(off, -1)


def bm_integral(part: Partition, fvals) -> float:
    """Integral over [0, T] of the Brownian posterior mean"""
    f = np.concatenate(([0.0], _values(part, fvals)))
    dx = part.increments
    return float(np.sum(dx * (f[:-1] + f[1:])) / 2.0 + f[-1] * (part.T - part.points[-1]))


def bm_integral_variance(part: Partition, tau2: float = 1.0) -> float:
    """sum of bridge terms dx^3/12 plus (T - x_N)^3/3 for the tail"""
    dx = part.increments
    return tau2 * (float(np.sum(dx ** 3)) / 12.0 + (part.T - part.points[-1]) ** 3 / 3.0)


# Amplitude estimators

def cv_decomposition(part: Partition, fvals) -> Tuple[float, float, float]:
    """(B1 / N, interior / N, B2 / N); their sum is the CV estimate"""
    f = _values(part, fvals)
    N = part.size
    if N < 3:
        raise ValueError(f"CV estimator needs N >= 3, got {N}")
    x = part.points
    dx = np.diff(x)
    b1 = (x[1] * f[0] - x[0] * f[1]) ** 2 / (x[0] * x[1] * dx[0])
    lower, upper = dx[:-1], dx[1:]
    residual = lower * (f[2:] - f[1:-1]) - upper * (f[1:-1] - f[:-2])
    interior = float(np.sum(residual ** 2 / ((upper + lower) * upper * lower)))
    b2 = (f[-1] - f[-2]) ** 2 / dx[-1]
    return b1 / N, interior / N, b2 / N


def cv_estimate(part: Partition, fvals) -> ScaleEstimate:
    b1, interior, b2 = cv_decomposition(part, fvals)
    return ScaleEstimate(b1 + interior + b2, 'CV', part.size)


def icv_estimate(part: Partition, fvals) -> ScaleEstimate:
    _, interior, _ = cv_decomposition(part, fvals)
    return ScaleEstimate(interior, 'ICV', part.size)


def ml_estimate(part: Partition, fvals) -> ScaleEstimate:
    f = np.concatenate(([0.0], _values(part, fvals)))
    value = float(np.sum(np.diff(f) ** 2 / part.increments)) / part.size
    return ScaleEstimate(value, 'ML', part.size)


ESTIMATORS: Dict[str, Callable[[Partition, np.ndarray], ScaleEstimate]] = {
    'CV': cv_estimate,
    'ML': ml_estimate,
    'ICV': icv_estimate,
}


def cv_estimate_generic(spec: KernelSpec, points, fvals) -> float:
    """Leave-one-out amplitude estimate for any kernel, via the GP posterior"""
    post = fit(spec, Dataset(points, fvals))
    means, variances = loo_predictive(post)
    return float(np.mean((post.train.targets - means) ** 2 / variances))


def ml_estimate_generic(spec: KernelSpec, points, fvals) -> float:
    """y^T K^{-1} y / N for any kernel"""
    post = fit(spec, Dataset(points, fvals))
    return float(post.train.targets @ post.alpha) / post.train.size


def quadratic_variation(part: Partition, fvals) -> float:
    f = np.concatenate(([0.0], _values(part, fvals)))
    return float(np.sum(np.diff(f) ** 2))


def ml_functional_limit(part: Partition, fvals) -> float:
    """N * tau^2_ML; tends to the squared L2 norm of f' for smooth f"""
    return part.size * ml_estimate(part, fvals).value


# Test-path sampling

class ProcessKind(str, Enum):
    BM = 'bm'
    FBM = 'fbm'
    IFBM = 'ifbm'
    IIFBM = 'iifbm'
    OU = 'ou'
    PIECEWISE_JUMP = 'jump'


@dataclass(frozen=True, eq=False)
class PathSamplerSpec:
    """
    A seeded path on a partition.

    method: 'auto' picks an exact O(N) or O(N log N) sampler where one exists
    (independent increments for BM, AR(1) transitions for OU, circulant
    embedding for fBm on equally spaced grids, trapezoid integration of a
    refined fBm path for iFBM/iiFBM); 'cholesky' forces the dense
    factorization of the process covariance.
    """
    process: ProcessKind
    grid: Partition
    seed: int = 0
    hurst: float = 0.5
    rate: float = 0.2
    tau2: float = 1.0
    method: str = 'auto'
    refine: int = 8

    def __post_init__(self):
        object.__setattr__(self, 'process', ProcessKind(self.process))
        if self.process in (ProcessKind.FBM, ProcessKind.IFBM, ProcessKind.IIFBM) and not 0 < self.hurst < 1:
            raise ValueError(f"Hurst parameter must lie in (0, 1), got {self.hurst}")
        if self.method not in ('auto', 'cholesky'):
            raise ValueError(f"unknown sampling method '{self.method}'")


def _fgn_circulant(n: int, hurst: float, stream: RngStream) -> np.ndarray:
    """n steps of unit-spacing fractional Gaussian noise by circulant embedding"""
    k = np.arange(n + 1, dtype=float)
    a = 2.0 * hurst
    gamma = 0.5 * (np.abs(k + 1) ** a - 2.0 * k ** a + np.abs(k - 1) ** a)
    row = np.concatenate((gamma, gamma[n - 1:0:-1]))
    m = row.size
    eig = np.fft.fft(row).real
    if eig.min() < -1e-10 * eig.max():
        raise ValueError(f"circulant embedding is not nonnegative definite for H={hurst}")
    eig = np.maximum(eig, 0.0)
    noise = stream.normal(m) + 1j * stream.normal(m)
    return np.fft.fft(np.sqrt(eig / m) * noise).real[:n]


def _cholesky_path(kernel: KernelSpec, part: Partition, stream: RngStream) -> np.ndarray:
    if part.size > CHOLESKY_MAX_POINTS:
        raise ValueError(f"Cholesky sampling is capped at {CHOLESKY_MAX_POINTS} points, got {part.size}")
    L, _ = jittered_cholesky(gram(kernel, part.points).values, context=f"path {kernel.spec_id}")
    return L @ stream.normal(part.size)


def _fbm_path(part: Partition, hurst: float, stream: RngStream, method: str) -> np.ndarray:
    h = part.uniform_step()
    if method == 'cholesky' or h is None:
        return _cholesky_path(KernelSpec.fbm(hurst), part, stream)
    return np.cumsum(_fgn_circulant(part.size, hurst, stream)) * h ** hurst


def _integrate(part: Partition, values: np.ndarray) -> np.ndarray:
    return cumulative_trapezoid(np.concatenate(([0.0], values)), part.with_origin)


def _integrated_fbm(part: Partition, spec: PathSamplerSpec, stream: RngStream, times: int) -> np.ndarray:
    r = spec.refine
    fine = part.refine(r)
    path = _fbm_path(fine, spec.hurst, stream, 'auto')
    for _ in range(times):
        path = _integrate(fine, path)
    return path[r - 1::r]


def sample_path(spec: PathSamplerSpec) -> np.ndarray:
    """Function values of one seeded path on spec.grid"""
    part = spec.grid
    stream = RngStream.root(spec.seed).split(f"path/{spec.process.value}")
    scale = math.sqrt(spec.tau2)
    x = part.points
    proc = spec.process

    if proc == ProcessKind.PIECEWISE_JUMP:
        jump = float(stream.uniform(1)[0])
        return np.sin(10.0 * x) + (x > jump).astype(float)

    if spec.method == 'cholesky':
        kernel = {
            ProcessKind.BM: lambda: KernelSpec.brownian(),
            ProcessKind.FBM: lambda: KernelSpec.fbm(spec.hurst),
            ProcessKind.IFBM: lambda: KernelSpec.ifbm(spec.hurst),
            ProcessKind.OU: lambda: KernelSpec.ornstein_uhlenbeck(spec.rate),
        }.get(proc)
        if kernel is not None:
            return scale * _cholesky_path(kernel(), part, stream)
        # no closed-form kernel for iiFBM: integrate an exact iFBM path
        fine = part.refine(spec.refine)
        ifbm = _cholesky_path(KernelSpec.ifbm(spec.hurst), fine, stream)
        return scale * _integrate(fine, ifbm)[spec.refine - 1::spec.refine]

    if proc == ProcessKind.BM:
        return scale * np.cumsum(np.sqrt(part.increments) * stream.normal(part.size))
    if proc == ProcessKind.OU:
        decay = np.exp(-spec.rate * part.increments)
        sd = np.sqrt((1.0 - decay ** 2) / 4.0)
        xi = stream.normal(part.size)
        out = np.empty(part.size)
        prev = 0.0
        for i in range(part.size):
            prev = decay[i] * prev + sd[i] * xi[i]
            out[i] = prev
        return scale * out
    if proc == ProcessKind.FBM:
        return scale * _fbm_path(part, spec.hurst, stream, 'auto')
    if proc == ProcessKind.IFBM:
        return scale * _integrated_fbm(part, spec, stream, 1)
    return scale * _integrated_fbm(part, spec, stream, 2)


# Experiments

def rate_slope(N_grid: Sequence[float], estimates: Sequence[float]) -> float:
    """Least-squares slope of log(estimate) against log(N)"""
    N = np.asarray(N_grid, dtype=float)
    v = np.asarray(estimates, dtype=float)
    if N.size < 3 or N.size != v.size:
        raise ValueError("rate_slope needs at least 3 (N, estimate) pairs of equal length")
    if np.any(v <= 0) or np.any(N <= 0):
        raise ValueError("rate_slope needs positive N and positive estimates")
    return float(np.polyfit(np.log(N), np.log(v), 1)[0])


@dataclass
class CalibrationRun:
    """Per-seed outputs of one calibration-ratio replicate"""
    seed: int
    squared_error: float
    estimates: Dict[str, float]


def calibration_replicate(process: ProcessKind, N: int, seed: int, T: float = 1.0,
                          hurst: float = 0.5, rate: float = 0.2,
                          estimators: Iterable[str] = ('CV', 'ML', 'ICV')) -> CalibrationRun:
    """One seeded path: squared BQ error against a refined trapezoid truth, plus estimates"""
    fine = Partition.uniform(TRUTH_REFINEMENT * N, T)
    path = sample_path(PathSamplerSpec(process, fine, seed=seed, hurst=hurst, rate=rate))
    coarse = Partition.uniform(N, T)
    f = path[TRUTH_REFINEMENT - 1::TRUTH_REFINEMENT]
    truth = float(trapezoid(np.concatenate(([0.0], path)), fine.with_origin))
    error = truth - bm_integral(coarse, f)
    return CalibrationRun(seed=seed, squared_error=error ** 2,
                          estimates={name: ESTIMATORS[name](coarse, f).value for name in estimators})


def calib_ratio_bq(process: ProcessKind, N: int, seeds: Sequence[int], T: float = 1.0,
                   hurst: float = 0.5, rate: float = 0.2,
                   amplitude_override: Optional[float] = None,
                   runs: Optional[Sequence[CalibrationRun]] = None) -> Dict[str, float]:
    """
    Monte Carlo ratios E[(I - I_BQ)^2] / (E[tau^2_hat] * var_BQ) for CV, ML and ICV.

    Args:
        process: the process generating the integrand (the truth)
        N: number of equally spaced nodes on [0, T]
        seeds: replicate seeds
        amplitude_override: use this amplitude in place of every estimator's mean
        runs: precomputed replicates (e.g. from a parallel pool); seeds are ignored then

    Returns:
        {'CV': R_CV, 'ML': R_ML, 'ICV': R_ICV}
    """
    if runs is None:
        runs = [calibration_replicate(process, N, s, T, hurst, rate) for s in seeds]
    if not runs:
        raise ValueError("calib_ratio_bq needs at least one seed")
    mse = float(np.mean([r.squared_error for r in runs]))
    var_bq = bm_integral_variance(Partition.uniform(N, T))
    ratios = {}
    for name in ('CV', 'ML', 'ICV'):
        amplitude = amplitude_override
        if amplitude is None:
            amplitude = float(np.mean([r.estimates[name] for r in runs]))
        ratios[name] = mse / (amplitude * var_bq) if amplitude > 0 else float('inf')
    logger.debug(f"Calibration ratios for {process.value} at N={N}: {ratios}")
    return ratios
