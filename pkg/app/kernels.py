"""
Kernel families for kernel_lab

Provides the parametric KernelSpec (the single source of k(x, x') in the
package), Gram and cross-Gram matrices, paired (row-by-row) evaluation, explicit
feature maps for the finite-dimensional families and the median-heuristic
lengthscale rule.

Families:
- gaussian:    tau2 * exp(-|x-x'|^2 / (2 l^2))
- matern:      half-integer orders nu in {1/2, 3/2, 5/2}
- brownian:    tau2 * min(x, x')                              (scalar, x >= 0)
- fbm:         tau2 * (x^2H + x'^2H - |x-x'|^2H) / 2          (scalar, x >= 0)
- ifbm:        once-integrated fBm, explicit polynomial form  (scalar, x >= 0)
- ou:          tau2 * (exp(-lam |x-x'|) - exp(-lam (x+x'))) / 4   (scalar, x >= 0)
- polynomial:  tau2 * (x.x' + c)^q
- linear:      tau2 * x.x'

Inputs are arrays of shape (N, d); a 1-d array is read as N scalar points.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from itertools import combinations_with_replacement
from typing import Dict, Mapping, Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from app.exceptions import KernelDomainError, KernelShapeError
from utils.rng import RngStream

logger = logging.getLogger(__name__)

MATERN_ORDERS = (0.5, 1.5, 2.5)
MEDIAN_HEURISTIC_MAX_POINTS = 1000


class KernelFamily(str, Enum):
    GAUSSIAN = 'gaussian'
    MATERN = 'matern'
    BROWNIAN = 'brownian'
    FBM = 'fbm'
    IFBM = 'ifbm'
    POLYNOMIAL = 'polynomial'
    LINEAR = 'linear'
    OU = 'ou'


SCALAR_FAMILIES = frozenset({KernelFamily.BROWNIAN, KernelFamily.FBM, KernelFamily.IFBM, KernelFamily.OU})
STATIONARY_FAMILIES = frozenset({KernelFamily.GAUSSIAN, KernelFamily.MATERN})


@dataclass(frozen=True)
class KernelSpec:
    """Immutable kernel description; fields not used by a family are ignored"""
    family: KernelFamily
    tau2: float = 1.0
    lengthscale: float = 1.0
    nu: float = 1.5
    hurst: float = 0.5
    degree: int = 3
    offset: float = 1.0
    rate: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'family', KernelFamily(self.family))
        if not (self.tau2 > 0 and math.isfinite(self.tau2)):
            raise ValueError(f"amplitude tau2 must be positive and finite, got {self.tau2}")
        if self.family in STATIONARY_FAMILIES and not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if self.family == KernelFamily.MATERN and float(self.nu) not in MATERN_ORDERS:
            raise ValueError(f"Matern order nu must be one of {MATERN_ORDERS}, got {self.nu}")
        if self.family in (KernelFamily.FBM, KernelFamily.IFBM) and not 0 < self.hurst < 1:
            raise ValueError(f"Hurst parameter must lie in (0, 1), got {self.hurst}")
        if self.family == KernelFamily.POLYNOMIAL:
            if int(self.degree) != self.degree or self.degree < 0:
                raise ValueError(f"polynomial degree must be a non-negative integer, got {self.degree}")
            if self.offset < 0:
                raise ValueError(f"polynomial offset must be >= 0, got {self.offset}")
        if self.family == KernelFamily.OU and not self.rate > 0:
            raise ValueError(f"OU rate must be positive, got {self.rate}")

    # Constructors

    @classmethod
    def gaussian(cls, lengthscale: float = 1.0, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.GAUSSIAN, tau2=tau2, lengthscale=lengthscale)

    @classmethod
    def matern(cls, nu: float, lengthscale: float = 1.0, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.MATERN, tau2=tau2, lengthscale=lengthscale, nu=nu)

    @classmethod
    def brownian(cls, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.BROWNIAN, tau2=tau2)

    @classmethod
    def fbm(cls, hurst: float, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.FBM, tau2=tau2, hurst=hurst)

    @classmethod
    def ifbm(cls, hurst: float, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.IFBM, tau2=tau2, hurst=hurst)

    @classmethod
    def polynomial(cls, degree: int, offset: float = 1.0, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.POLYNOMIAL, tau2=tau2, degree=degree, offset=offset)

    @classmethod
    def linear(cls, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.LINEAR, tau2=tau2)

    @classmethod
    def ornstein_uhlenbeck(cls, rate: float, tau2: float = 1.0) -> 'KernelSpec':
        return cls(KernelFamily.OU, tau2=tau2, rate=rate)

    # Helpers

    @property
    def is_scalar_family(self) -> bool:
        return self.family in SCALAR_FAMILIES

    @property
    def has_finite_features(self) -> bool:
        return self.family in (KernelFamily.LINEAR, KernelFamily.POLYNOMIAL)

    def feature_dimension(self, d: int) -> Optional[int]:
        """Length of the explicit feature map in dimension d, None if infinite"""
        if self.family == KernelFamily.LINEAR:
            return d
        if self.family == KernelFamily.POLYNOMIAL:
            return math.comb(d + int(self.degree), int(self.degree))
        return None

    def with_amplitude(self, tau2: float) -> 'KernelSpec':
        return replace(self, tau2=tau2)

    def with_lengthscale(self, lengthscale: float) -> 'KernelSpec':
        return replace(self, lengthscale=lengthscale)

    @property
    def spec_id(self) -> str:
        f = self.family
        if f in STATIONARY_FAMILIES:
            nu = f",nu={self.nu:g}" if f == KernelFamily.MATERN else ''
            return f"{f.value}(tau2={self.tau2:g},l={self.lengthscale:g}{nu})"
        if f in (KernelFamily.FBM, KernelFamily.IFBM):
            return f"{f.value}(tau2={self.tau2:g},H={self.hurst:g})"
        if f == KernelFamily.POLYNOMIAL:
            return f"{f.value}(tau2={self.tau2:g},q={int(self.degree)},c={self.offset:g})"
        if f == KernelFamily.OU:
            return f"{f.value}(tau2={self.tau2:g},lambda={self.rate:g})"
        return f"{f.value}(tau2={self.tau2:g})"

    def to_config(self) -> Dict[str, str]:
        """Flat key/value fragment (family, tau2, lengthscale, nu, hurst, degree, offset, lambda)"""
        return {
            'family': self.family.value,
            'tau2': repr(float(self.tau2)),
            'lengthscale': repr(float(self.lengthscale)),
            'nu': repr(float(self.nu)),
            'hurst': repr(float(self.hurst)),
            'degree': str(int(self.degree)),
            'offset': repr(float(self.offset)),
            'lambda': repr(float(self.rate)),
        }

    @classmethod
    def from_config(cls, values: Mapping[str, str], prefix: str = '') -> 'KernelSpec':
        """Build a spec from a flat fragment; missing keys fall back to defaults"""
        def get(key):
            return values.get(f"{prefix}{key}")

        family = get('family')
        if not family:
            raise ValueError(f"kernel fragment is missing '{prefix}family'")
        kwargs = {}
        for key, attr, cast in (('tau2', 'tau2', float), ('lengthscale', 'lengthscale', float),
                                ('nu', 'nu', float), ('hurst', 'hurst', float),
                                ('degree', 'degree', int), ('offset', 'offset', float),
                                ('lambda', 'rate', float)):
            raw = get(key)
            if raw is not None and str(raw).strip() != '':
                kwargs[attr] = cast(raw)
        return cls(KernelFamily(str(family).strip().lower()), **kwargs)


@dataclass
class GramMatrix:
    values: np.ndarray
    source: KernelSpec
    points: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])


# Input handling

def as_points(points) -> np.ndarray:
    """Coerce to an (N, d) float array; scalars and 1-d arrays become columns"""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim == 2:
        return arr
    raise KernelShapeError(f"points must be at most 2-d, got shape {arr.shape}")


def as_point(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim == 2 and arr.shape[0] == 1:
        return arr
    raise KernelShapeError(f"a single point was expected, got shape {arr.shape}")


def _check_inputs(spec: KernelSpec, X: np.ndarray, Y: np.ndarray):
    if X.shape[1] != Y.shape[1]:
        raise KernelShapeError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    if spec.is_scalar_family:
        if X.shape[1] != 1:
            raise KernelShapeError(f"{spec.family.value} kernel requires scalar inputs, got d={X.shape[1]}")
        if np.any(X < 0) or np.any(Y < 0):
            raise KernelDomainError(f"{spec.family.value} kernel is defined on [0, inf); negative input given")


# Unit-amplitude closed forms

def _stationary_profile(spec: KernelSpec, sqdist: np.ndarray) -> np.ndarray:
    l = spec.lengthscale
    if spec.family == KernelFamily.GAUSSIAN:
        return np.exp(-0.5 * sqdist / l ** 2)
    r = np.sqrt(np.maximum(sqdist, 0.0)) / l
    if spec.nu == 0.5:
        return np.exp(-r)
    if spec.nu == 1.5:
        s = math.sqrt(3.0) * r
        return (1.0 + s) * np.exp(-s)
    s = math.sqrt(5.0) * r
    return (1.0 + s + s ** 2 / 3.0) * np.exp(-s)


def _scalar_profile(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    f = spec.family
    if f == KernelFamily.BROWNIAN:
        return np.minimum(x, y)
    if f == KernelFamily.FBM:
        a = 2.0 * spec.hurst
        return 0.5 * (x ** a + y ** a - np.abs(x - y) ** a)
    if f == KernelFamily.IFBM:
        a = 2.0 * spec.hurst + 1.0
        b = a + 1.0
        bracket = (x ** b + y ** b - np.abs(x - y) ** b) / b
        return (y * x ** a + x * y ** a - bracket) / (2.0 * a)
    # start-at-zero Ornstein-Uhlenbeck
    lam = spec.rate
    return 0.25 * (np.exp(-lam * np.abs(x - y)) - np.exp(-lam * (x + y)))


def _base_cross(spec: KernelSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    f = spec.family
    if f in STATIONARY_FAMILIES:
        return _stationary_profile(spec, cdist(X, Y, 'sqeuclidean'))
    if f in SCALAR_FAMILIES:
        return _scalar_profile(spec, X[:, 0][:, None], Y[:, 0][None, :])
    inner = X @ Y.T
    if f == KernelFamily.LINEAR:
        return inner
    return (inner + spec.offset) ** int(spec.degree)


def _base_paired(spec: KernelSpec, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    f = spec.family
    if f in STATIONARY_FAMILIES:
        return _stationary_profile(spec, np.sum((X - Y) ** 2, axis=1))
    if f in SCALAR_FAMILIES:
        return _scalar_profile(spec, X[:, 0], Y[:, 0])
    inner = np.sum(X * Y, axis=1)
    if f == KernelFamily.LINEAR:
        return inner
    return (inner + spec.offset) ** int(spec.degree)


# Public evaluation API

def evaluate(spec: KernelSpec, x, y) -> float:
    """k(x, y) for two single points"""
    X, Y = as_point(x), as_point(y)
    _check_inputs(spec, X, Y)
    return float(spec.tau2 * _base_cross(spec, X, Y)[0, 0])


def gram(spec: KernelSpec, points) -> GramMatrix:
    """Symmetric Gram matrix of a point set"""
    X = as_points(points)
    if X.shape[0] < 1:
        raise KernelShapeError("gram requires at least one point")
    _check_inputs(spec, X, X)
    base = _base_cross(spec, X, X)
    base = 0.5 * (base + base.T)
    return GramMatrix(values=spec.tau2 * base, source=spec, points=X)


def cross_gram(spec: KernelSpec, X, Y) -> np.ndarray:
    """Rectangular matrix [k(x_i, y_j)]"""
    X, Y = as_points(X), as_points(Y)
    _check_inputs(spec, X, Y)
    return spec.tau2 * _base_cross(spec, X, Y)


def paired(spec: KernelSpec, X, Y) -> np.ndarray:
    """Row-by-row evaluation [k(x_i, y_i)]"""
    X, Y = as_points(X), as_points(Y)
    if X.shape != Y.shape:
        raise KernelShapeError(f"paired evaluation needs equal shapes, got {X.shape} and {Y.shape}")
    _check_inputs(spec, X, Y)
    return spec.tau2 * _base_paired(spec, X, Y)


def diag(spec: KernelSpec, points) -> np.ndarray:
    """[k(x_i, x_i)] without forming the Gram matrix"""
    X = as_points(points)
    return paired(spec, X, X)


def feature_map(spec: KernelSpec, points) -> np.ndarray:
    """Explicit features phi with k(x, y) = phi(x).phi(y) (linear and polynomial only)"""
    X = as_points(points)
    d = X.shape[1]
    if spec.family == KernelFamily.LINEAR:
        return math.sqrt(spec.tau2) * X
    if spec.family != KernelFamily.POLYNOMIAL:
        raise KernelShapeError(f"{spec.family.value} kernel has no finite feature map")
    q = int(spec.degree)
    columns = []
    for total in range(q + 1):
        weight_c = spec.offset ** (q - total) if q > total else 1.0
        if weight_c == 0.0:
            continue
        for combo in combinations_with_replacement(range(d), total):
            alpha = np.bincount(np.asarray(combo, dtype=int), minlength=d)
            coef = math.factorial(q) / (math.factorial(q - total) *
                                        math.prod(math.factorial(int(a)) for a in alpha))
            columns.append(math.sqrt(spec.tau2 * coef * weight_c) * np.prod(X ** alpha, axis=1))
    return np.column_stack(columns)


def median_heuristic(pooled, seed: int = 0,
                     max_points: int = MEDIAN_HEURISTIC_MAX_POINTS) -> float:
    """
    Median of the nonzero pairwise Euclidean distances of the pooled sample.

    Args:
        pooled: (N, d) points, N >= 2
        seed: subsampling seed, used only when N > max_points
        max_points: subsample size for large N

    Returns:
        Lengthscale (> 0)
    """
    X = as_points(pooled)
    n = X.shape[0]
    if n < 2:
        raise ValueError("median heuristic needs at least two points")
    if n > max_points:
        idx = RngStream.root(seed).split('median-heuristic').permutation(n)[:max_points]
        X = X[np.sort(idx)]
    dists = pdist(X)
    dists = dists[dists > 0]
    if dists.size == 0:
        raise ValueError("median heuristic needs at least one distinct pair; all points are identical")
    med = float(np.median(dists))
    logger.debug(f"Median heuristic over {X.shape[0]} points: {med:.6g}")
    return med
