"""
Maximum mean discrepancy estimators between empirical measures.

Estimators (squared MMD):
- mmd2_v:        V-statistic, O(N^2)
- mmd2_u:        U-statistic (diagonal excluded), O(N^2), may be negative
- mmd2_linear:   paired h-terms in input order, O(N)
- mmd2_multi:    incomplete U-statistic over the first R subdiagonals, O(RN)
- mmd2_weighted: weighted first sample against a uniform second sample

Quadratic sums go through kernel_sum, which works block by block so the full
Gram matrix of a large reference sample is never held in memory, and collapses
to an O(N) feature-space dot product for linear/polynomial kernels.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np

from app.exceptions import KernelShapeError
from app.kernels import KernelSpec, as_points, cross_gram, diag, feature_map, paired

logger = logging.getLogger(__name__)

BLOCK_SIZE = 2048
MAX_FEATURES = 256


@dataclass
class EmpiricalMeasure:
    """Points with optional (possibly negative) weights; uniform when weights is None"""
    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = as_points(self.points)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
            if self.weights.shape[0] != self.points.shape[0]:
                raise KernelShapeError(
                    f"{self.points.shape[0]} points but {self.weights.shape[0]} weights")
            if not np.all(np.isfinite(self.weights)):
                raise ValueError("measure weights must be finite")

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def is_uniform(self) -> bool:
        return self.weights is None


class Estimator(str, Enum):
    V = 'V'
    U = 'U'
    LINEAR = 'Linear'
    MULTI = 'Multi'
    WEIGHTED = 'Weighted'
    EKQD = 'EKQD'
    SUPKQD = 'SupKQD'
    CENTERED_EKQD = 'CenteredEKQD'


NONNEGATIVE_ESTIMATORS = frozenset({Estimator.V, Estimator.WEIGHTED, Estimator.EKQD, Estimator.SUPKQD})


@dataclass
class DiscrepancyEstimate:
    value: float
    estimator: Estimator
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if self.estimator in NONNEGATIVE_ESTIMATORS and self.value < -1e-12:
            logger.warning(f"{self.estimator.value} estimate {self.value:.3e} is negative beyond round-off")

    def __float__(self) -> float:
        return self.value


def _measure(m) -> EmpiricalMeasure:
    return m if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m)


def _require_nonempty(*measures: EmpiricalMeasure):
    for m in measures:
        if m.size == 0:
            raise ValueError("empirical measure is empty")


def kernel_sum(spec: KernelSpec, X, Y, weights_x: Optional[np.ndarray] = None,
               weights_y: Optional[np.ndarray] = None, block_size: int = BLOCK_SIZE) -> float:
    """sum_i sum_j wx_i wy_j k(x_i, y_j); unit weights when omitted"""
    X, Y = as_points(X), as_points(Y)
    wx = np.ones(X.shape[0]) if weights_x is None else np.asarray(weights_x, dtype=float)
    wy = np.ones(Y.shape[0]) if weights_y is None else np.asarray(weights_y, dtype=float)

    if spec.has_finite_features and spec.feature_dimension(X.shape[1]) <= MAX_FEATURES:
        return float((wx @ feature_map(spec, X)) @ (wy @ feature_map(spec, Y)))

    total = 0.0
    for i in range(0, X.shape[0], block_size):
        xb, wxb = X[i:i + block_size], wx[i:i + block_size]
        for j in range(0, Y.shape[0], block_size):
            total += float(wxb @ cross_gram(spec, xb, Y[j:j + block_size]) @ wy[j:j + block_size])
    return total


def mmd2_v(spec: KernelSpec, P, Q) -> float:
    """Biased (V-statistic) squared MMD; zero for identical point lists"""
    P, Q = _measure(P), _measure(Q)
    _require_nonempty(P, Q)
    n, m = P.size, Q.size
    kxx = kernel_sum(spec, P.points, P.points)
    kxy = kernel_sum(spec, P.points, Q.points)
    kyy = kernel_sum(spec, Q.points, Q.points)
    return kxx / n ** 2 - 2.0 * kxy / (n * m) + kyy / m ** 2


def mmd2_u(spec: KernelSpec, P, Q) -> float:
    """Unbiased squared MMD; may be negative"""
    P, Q = _measure(P), _measure(Q)
    n, m = P.size, Q.size
    if n < 2 or m < 2:
        raise ValueError(f"U-statistic needs at least 2 points per sample, got {n} and {m}")
    kxx = kernel_sum(spec, P.points, P.points) - float(np.sum(diag(spec, P.points)))
    kyy = kernel_sum(spec, Q.points, Q.points) - float(np.sum(diag(spec, Q.points)))
    kxy = kernel_sum(spec, P.points, Q.points)
    return kxx / (n * (n - 1)) + kyy / (m * (m - 1)) - 2.0 * kxy / (n * m)


def _equal_sizes(P: EmpiricalMeasure, Q: EmpiricalMeasure) -> int:
    if P.size != Q.size:
        raise ValueError(f"estimator needs equal sample sizes, got {P.size} and {Q.size}")
    return P.size


def mmd2_linear(spec: KernelSpec, P, Q) -> float:
    """Linear-time estimator pairing consecutive points in input order"""
    P, Q = _measure(P), _measure(Q)
    n = _equal_sizes(P, Q)
    if n < 2:
        raise ValueError("linear estimator needs at least 2 points per sample")
    half = n // 2
    if n % 2:
        logger.debug(f"Linear MMD drops trailing point (N={n} is odd)")
    X, Y = P.points, Q.points
    x1, x2 = X[0:2 * half:2], X[1:2 * half:2]
    y1, y2 = Y[0:2 * half:2], Y[1:2 * half:2]
    h = paired(spec, x1, x2) + paired(spec, y1, y2) - paired(spec, x1, y2) - paired(spec, x2, y1)
    return float(np.mean(h))


def mmd2_multi(spec: KernelSpec, P, Q, R: int) -> float:
    """Incomplete U-statistic over subdiagonals r = 1..R with prefactor 2/(R(2N-R-1))"""
    P, Q = _measure(P), _measure(Q)
    n = _equal_sizes(P, Q)
    if not 1 <= R <= n - 1:
        raise ValueError(f"R must be in [1, N-1] = [1, {n - 1}], got {R}")
    X, Y = P.points, Q.points
    total = 0.0
    for r in range(1, R + 1):
        h = (paired(spec, X[:-r], X[r:]) + paired(spec, Y[:-r], Y[r:])
             - paired(spec, X[:-r], Y[r:]) - paired(spec, X[r:], Y[:-r]))
        total += float(np.sum(h))
    return 2.0 * total / (R * (2 * n - R - 1))


def default_subdiagonals(n: int) -> int:
    """R = ceil(log(N)^2), capped at N-1"""
    return max(1, min(n - 1, math.ceil(math.log(n) ** 2)))


def mmd2_weighted(spec: KernelSpec, P_weighted, Q) -> float:
    """Squared MMD between a weighted measure and a uniform one"""
    P, Q = _measure(P_weighted), _measure(Q)
    if P.weights is None:
        raise ValueError("mmd2_weighted requires explicit weights on the first measure")
    _require_nonempty(P, Q)
    m = Q.size
    w = P.weights
    kxx = kernel_sum(spec, P.points, P.points, w, w)
    kxy = kernel_sum(spec, P.points, Q.points, w, None)
    kyy = kernel_sum(spec, Q.points, Q.points)
    return kxx - 2.0 * kxy / m + kyy / m ** 2


def estimate(spec: KernelSpec, P, Q, estimator: Estimator, R: Optional[int] = None,
             seed: Optional[int] = None) -> DiscrepancyEstimate:
    """Dispatch to one MMD estimator and wrap the value with metadata"""
    P, Q = _measure(P), _measure(Q)
    estimator = Estimator(estimator)
    meta: Dict[str, Any] = {'n': P.size, 'm': Q.size, 'kernel': spec.spec_id, 'seed': seed}
    if estimator == Estimator.V:
        value = mmd2_v(spec, P, Q)
    elif estimator == Estimator.U:
        value = mmd2_u(spec, P, Q)
    elif estimator == Estimator.LINEAR:
        value = mmd2_linear(spec, P, Q)
    elif estimator == Estimator.MULTI:
        R = default_subdiagonals(P.size) if R is None else R
        meta['R'] = R
        value = mmd2_multi(spec, P, Q, R)
    elif estimator == Estimator.WEIGHTED:
        value = mmd2_weighted(spec, P, Q)
    else:
        raise ValueError(f"{estimator.value} is not an MMD estimator")
    return DiscrepancyEstimate(value, estimator, meta)
