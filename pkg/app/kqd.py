"""
Kernel quantile discrepancies.

Each random direction u is a unit-norm RKHS function built from M anchors and
Gaussian coefficients:
    f(x) = sum_m lambda_m k(z_m, x) / sqrt(M),   u = f / ||f||_H
Samples are projected onto u, sorted, and compared rank by rank:
    e-KQD^p   = mean over directions of (1/N) sum_n |u(x)_(n) - u(y)_(n)|^p nu(n/N)
    sup-KQD^p = max over directions of the same inner sum
All discrepancy functions return the p-th power; kqd_root gives the distance.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Sequence

import numpy as np

from app.exceptions import DegenerateDirectionError, KernelShapeError
from app.kernels import KernelSpec, as_points, cross_gram, gram
from app.mmd import EmpiricalMeasure, mmd2_u
from utils.rng import RngStream

logger = logging.getLogger(__name__)

MIN_DIRECTION_NORM = 1e-12
MAX_REDRAWS = 100


class ReferenceRule(str, Enum):
    POOLED = 'pooled'
    GAUSSIAN_IQR = 'gaussian-iqr'
    UNIFORM_IQR = 'uniform-iqr'


@dataclass(frozen=True)
class QuantileWeighting:
    """Density of the weighting measure over quantile levels in (0, 1]"""
    density: Callable[[np.ndarray], np.ndarray]
    kind: str = 'uniform'

    @classmethod
    def uniform(cls) -> 'QuantileWeighting':
        return cls(density=lambda a: np.ones_like(a, dtype=float), kind='uniform')

    @classmethod
    def from_density(cls, density: Callable[[np.ndarray], np.ndarray]) -> 'QuantileWeighting':
        return cls(density=density, kind='custom')

    def at_ranks(self, n: int) -> np.ndarray:
        """f_nu(k / n) for k = 1..n"""
        values = np.asarray(self.density(np.arange(1, n + 1) / n), dtype=float)
        if values.shape != (n,) or np.any(values < 0):
            raise ValueError("quantile weighting density must return n nonnegative values")
        return values


UNIFORM_WEIGHTING = QuantileWeighting.uniform()


@dataclass(frozen=True)
class KqdConfig:
    p: int = 2
    L: int = 10
    M: int = 10
    seed: int = 0
    reference: ReferenceRule = ReferenceRule.POOLED

    def __post_init__(self):
        object.__setattr__(self, 'reference', ReferenceRule(self.reference))
        if int(self.p) != self.p or self.p < 1:
            raise ValueError(f"p must be an integer >= 1, got {self.p}")
        if self.L < 1 or self.M < 1:
            raise ValueError(f"L and M must be >= 1, got L={self.L}, M={self.M}")

    @classmethod
    def log_scaled(cls, n: int, p: int = 2, seed: int = 0,
                   reference: ReferenceRule = ReferenceRule.POOLED) -> 'KqdConfig':
        """L = M = ceil(log N)"""
        size = max(1, math.ceil(math.log(n)))
        return cls(p=p, L=size, M=size, seed=seed, reference=reference)


@dataclass(eq=False)
class ProjectionDirection:
    anchors: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)
    kernel: KernelSpec
    norm: float

    def __post_init__(self):
        if not self.norm > 0:
            raise ValueError(f"direction norm must be positive, got {self.norm}")

    @property
    def size(self) -> int:
        return self.coeffs.size

    def __call__(self, points) -> np.ndarray:
        values = cross_gram(self.kernel, points, self.anchors) @ self.coeffs
        return values / (math.sqrt(self.size) * self.norm)

    def unit_norm_residual(self) -> float:
        """|lambda^T K lambda / (M norm^2) - 1|, zero up to round-off"""
        K = gram(self.kernel, self.anchors).values
        return abs(float(self.coeffs @ K @ self.coeffs) / (self.size * self.norm ** 2) - 1.0)


def _points(sample) -> np.ndarray:
    if isinstance(sample, EmpiricalMeasure):
        return sample.points
    return as_points(sample)


def reference_anchors(rule: ReferenceRule, pooled: np.ndarray, M: int, stream: RngStream) -> np.ndarray:
    """Draw M anchor points from the reference measure built on the pooled sample"""
    n, d = pooled.shape
    if rule == ReferenceRule.POOLED:
        return pooled[stream.integers(M, n)]
    centre = np.median(pooled, axis=0)
    q75, q25 = np.percentile(pooled, [75, 25], axis=0)
    iqr = np.where(q75 - q25 > 0, q75 - q25, 1.0)
    if rule == ReferenceRule.GAUSSIAN_IQR:
        return centre + (iqr / 1.349) * stream.normal((M, d))
    return centre + iqr * (2.0 * stream.uniform((M, d)) - 1.0)


def sample_directions(spec: KernelSpec, cfg: KqdConfig, pooled) -> List[ProjectionDirection]:
    """
    Draw cfg.L unit-norm directions.

    Args:
        spec: kernel defining the RKHS
        cfg: direction count, anchor count, seed and reference rule
        pooled: (N, d) pooled sample the reference measure is built from

    Returns:
        List of ProjectionDirection, deterministic in cfg.seed
    """
    X = as_points(pooled)
    if X.shape[0] == 0:
        raise ValueError("cannot sample directions from an empty pooled sample")
    root = RngStream.root(cfg.seed).split('kqd/directions')
    directions = []
    for l in range(cfg.L):
        stream = root.split(f"direction/{l}")
        anchors = reference_anchors(cfg.reference, X, cfg.M, stream.split('anchors'))
        K = gram(spec, anchors).values
        coeff_stream = stream.split('coeffs')
        for attempt in range(MAX_REDRAWS):
            coeffs = coeff_stream.normal(cfg.M)
            norm = math.sqrt(max(float(coeffs @ K @ coeffs) / cfg.M, 0.0))
            if norm > MIN_DIRECTION_NORM:
                break
            logger.debug(f"Direction {l}: degenerate norm {norm:.3e}, redrawing (attempt {attempt + 1})")
        else:
            raise DegenerateDirectionError(f"direction {l} degenerate after {MAX_REDRAWS} redraws")
        directions.append(ProjectionDirection(anchors=anchors, coeffs=coeffs, kernel=spec, norm=norm))
    return directions


def directional_quantile(u: ProjectionDirection, sample, alpha: float) -> float:
    """The ceil(alpha N)-th smallest projected value (index clamped to [1, N])"""
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    X = _points(sample)
    n = X.shape[0]
    if n == 0:
        raise ValueError("cannot take a quantile of an empty sample")
    values = np.sort(u(X), kind='stable')
    index = min(max(math.ceil(alpha * n), 1), n)
    return float(values[index - 1])


def _paired_samples(P, Q):
    X, Y = _points(P), _points(Q)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"quantile discrepancies need equal sample sizes, got {X.shape[0]} and {Y.shape[0]}")
    if X.shape[1] != Y.shape[1]:
        raise KernelShapeError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if X.shape[0] == 0:
        raise ValueError("samples are empty")
    return X, Y


def _directions_for(spec: KernelSpec, cfg: KqdConfig, X: np.ndarray, Y: np.ndarray,
                    directions: Optional[Sequence[ProjectionDirection]]) -> Sequence[ProjectionDirection]:
    if directions is not None:
        return directions
    return sample_directions(spec, cfg, np.vstack([X, Y]))


def direction_terms(directions: Sequence[ProjectionDirection], X: np.ndarray, Y: np.ndarray,
                    p: int, nu: QuantileWeighting = UNIFORM_WEIGHTING) -> np.ndarray:
    """Per-direction inner sums (1/N) sum_n |u(x)_(n) - u(y)_(n)|^p f_nu(n/N), in direction order"""
    weights = nu.at_ranks(X.shape[0])
    terms = np.empty(len(directions))
    for l, u in enumerate(directions):
        ux = np.sort(u(X), kind='stable')
        uy = np.sort(u(Y), kind='stable')
        terms[l] = float(np.mean(np.abs(ux - uy) ** p * weights))
    return terms


def ekqd_p(spec: KernelSpec, P, Q, cfg: KqdConfig, nu: QuantileWeighting = UNIFORM_WEIGHTING,
           directions: Optional[Sequence[ProjectionDirection]] = None) -> float:
    """Expected kernel quantile discrepancy to the power p"""
    X, Y = _paired_samples(P, Q)
    dirs = _directions_for(spec, cfg, X, Y, directions)
    return float(np.mean(direction_terms(dirs, X, Y, cfg.p, nu)))


def supkqd_p(spec: KernelSpec, P, Q, cfg: KqdConfig, nu: QuantileWeighting = UNIFORM_WEIGHTING,
             directions: Optional[Sequence[ProjectionDirection]] = None) -> float:
    """Largest per-direction discrepancy over the sampled directions, to the power p"""
    X, Y = _paired_samples(P, Q)
    dirs = _directions_for(spec, cfg, X, Y, directions)
    return float(np.max(direction_terms(dirs, X, Y, cfg.p, nu)))


def ekqd_centered(spec: KernelSpec, P, Q, cfg: KqdConfig, nu: QuantileWeighting = UNIFORM_WEIGHTING,
                  directions: Optional[Sequence[ProjectionDirection]] = None) -> float:
    """e-KQD_2^2 + MMD_U^2 - mean_l (mean u_l(x) - mean u_l(y))^2; may be slightly negative"""
    if cfg.p != 2:
        raise ValueError(f"centered e-KQD is defined for p = 2, got p = {cfg.p}")
    X, Y = _paired_samples(P, Q)
    dirs = _directions_for(spec, cfg, X, Y, directions)
    kqd_term = float(np.mean(direction_terms(dirs, X, Y, 2, nu)))
    mean_gap = np.array([np.mean(u(X)) - np.mean(u(Y)) for u in dirs])
    return kqd_term + mmd2_u(spec, X, Y) - float(np.mean(mean_gap ** 2))


def kqd_root(value: float, p: int) -> float:
    """Distance scale value^(1/p); negative round-off maps to 0"""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    return max(float(value), 0.0) ** (1.0 / p)
