"""
Kernel mean embeddings and Bayesian quadrature.

Closed-form embeddings are available for three kernel/measure pairs:
    gaussian kernel   x  gaussian measure N(m, S)
    brownian kernel   x  Lebesgue measure on [0, T]   (unnormalized)
    gaussian kernel   x  uniform measure on a box [lo, hi]  (normalized)
Any other pair raises UnsupportedEmbeddingError. MonteCarloEmbedding is an
explicitly separate estimator for checking the closed forms; nothing falls back
to it.

The optimally-weighted (OW) MMD estimator lives here too: its weights are BQ
weights computed on the simulator's base space.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import erf

from app.exceptions import NegativeVarianceError, SingularMatrixError, UnsupportedEmbeddingError
from app.gp_core import DEFAULT_JITTER, JitterPolicy, jittered_cholesky
from app.kernels import KernelFamily, KernelSpec, as_point, as_points, cross_gram, gram, paired
from app.mmd import EmpiricalMeasure, mmd2_weighted
from utils.rng import RngStream

logger = logging.getLogger(__name__)

VARIANCE_CLAMP = 1e-10


# Measures

@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValueError(f"covariance shape {cov.shape} does not match mean of length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov)[0] < -1e-12 * max(1.0, float(np.trace(cov))):
            raise ValueError("covariance must be positive semidefinite")
        object.__setattr__(self, 'mean', mean)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, stream: RngStream, n: int) -> np.ndarray:
        vals, vecs = np.linalg.eigh(self.cov)
        root = vecs * np.sqrt(np.maximum(vals, 0.0))
        z = stream.normal((n, self.dim))
        return self.mean + z @ root.T


@dataclass(frozen=True)
class LebesgueInterval:
    """Lebesgue measure on [0, T] (total mass T)"""
    T: float

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"interval end T must be positive, got {self.T}")


@dataclass(frozen=True, eq=False)
class UniformBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("uniform box needs lo < hi componentwise")
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    @property
    def dim(self) -> int:
        return self.lo.size

    def sample(self, stream: RngStream, n: int) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * stream.uniform((n, self.dim))


Measure = Union[GaussianMeasure, LebesgueInterval, UniformBox]


class EmbeddingPair(str, Enum):
    GAUSSIAN_KERNEL_GAUSSIAN_MEASURE = 'gaussian-gaussian'
    BROWNIAN_KERNEL_LEBESGUE_INTERVAL = 'brownian-lebesgue'
    GAUSSIAN_KERNEL_UNIFORM_BOX = 'gaussian-uniform'


@dataclass(frozen=True, eq=False)
class EmbeddingClosedForm:
    pair: EmbeddingPair
    kernel: KernelSpec
    measure: Measure

    def eval(self, points) -> np.ndarray:
        X = as_points(points)
        tau2 = self.kernel.tau2
        if self.pair == EmbeddingPair.BROWNIAN_KERNEL_LEBESGUE_INTERVAL:
            T = self.measure.T
            x = X[:, 0]
            if X.shape[1] != 1 or np.any(x < 0) or np.any(x > T):
                raise ValueError(f"Brownian embedding is defined for scalar x in [0, {T}]")
            return tau2 * (T * x - 0.5 * x ** 2)
        l = self.kernel.lengthscale
        if X.shape[1] != self.measure.dim:
            raise ValueError(f"points have dimension {X.shape[1]}, measure has {self.measure.dim}")
        if self.pair == EmbeddingPair.GAUSSIAN_KERNEL_GAUSSIAN_MEASURE:
            d = self.measure.dim
            S = self.measure.cov + l ** 2 * np.eye(d)
            c, low = cho_factor(S, lower=True)
            diff = X - self.measure.mean
            quad = np.sum(diff * cho_solve((c, low), diff.T).T, axis=1)
            _, logdet = np.linalg.slogdet(np.eye(d) + self.measure.cov / l ** 2)
            return tau2 * math.exp(-0.5 * logdet) * np.exp(-0.5 * quad)
        lo, hi = self.measure.lo, self.measure.hi
        s = math.sqrt(2.0) * l
        per_dim = (l * math.sqrt(math.pi / 2.0)
                   * (erf((hi - X) / s) - erf((lo - X) / s)) / (hi - lo))
        return tau2 * np.prod(per_dim, axis=1)

    def initial_error(self) -> float:
        tau2 = self.kernel.tau2
        if self.pair == EmbeddingPair.BROWNIAN_KERNEL_LEBESGUE_INTERVAL:
            return tau2 * self.measure.T ** 3 / 3.0
        l = self.kernel.lengthscale
        if self.pair == EmbeddingPair.GAUSSIAN_KERNEL_GAUSSIAN_MEASURE:
            d = self.measure.dim
            _, logdet = np.linalg.slogdet(np.eye(d) + 2.0 * self.measure.cov / l ** 2)
            return tau2 * math.exp(-0.5 * logdet)
        w = self.measure.hi - self.measure.lo
        s = math.sqrt(2.0) * l
        per_dim = 2.0 * (l * w * math.sqrt(math.pi / 2.0) * erf(w / s)
                         + l ** 2 * (np.exp(-w ** 2 / (2.0 * l ** 2)) - 1.0)) / w ** 2
        return tau2 * float(np.prod(per_dim))


def kme(kernel: KernelSpec, measure: Measure) -> EmbeddingClosedForm:
    """Closed-form embedding for a supported kernel/measure pair"""
    fam = kernel.family
    if fam == KernelFamily.GAUSSIAN and isinstance(measure, GaussianMeasure):
        pair = EmbeddingPair.GAUSSIAN_KERNEL_GAUSSIAN_MEASURE
    elif fam == KernelFamily.GAUSSIAN and isinstance(measure, UniformBox):
        pair = EmbeddingPair.GAUSSIAN_KERNEL_UNIFORM_BOX
    elif fam == KernelFamily.BROWNIAN and isinstance(measure, LebesgueInterval):
        pair = EmbeddingPair.BROWNIAN_KERNEL_LEBESGUE_INTERVAL
    else:
        raise UnsupportedEmbeddingError(
            f"no closed-form embedding for {fam.value} kernel and {type(measure).__name__}")
    return EmbeddingClosedForm(pair=pair, kernel=kernel, measure=measure)


def _closed_form(emb) -> EmbeddingClosedForm:
    if not isinstance(emb, EmbeddingClosedForm):
        raise UnsupportedEmbeddingError(
            f"{type(emb).__name__} is not a closed-form embedding; use its own methods explicitly")
    return emb


def kme_eval(emb: EmbeddingClosedForm, x) -> float:
    X = as_point(x)
    return float(_closed_form(emb).eval(X)[0])


def kme_initial_error(emb: EmbeddingClosedForm) -> float:
    return _closed_form(emb).initial_error()


@dataclass
class MonteCarloEmbedding:
    """Sample-average embedding for tests; never used in place of a closed form"""
    kernel: KernelSpec
    samples: np.ndarray = field(repr=False)
    pair_samples: np.ndarray = field(repr=False)
    seed: int = 0

    def eval(self, points) -> np.ndarray:
        X = as_points(points)
        total = np.zeros(X.shape[0])
        for j in range(0, self.samples.shape[0], 100_000):
            total += cross_gram(self.kernel, X, self.samples[j:j + 100_000]).sum(axis=1)
        return total / self.samples.shape[0]

    def initial_error(self) -> float:
        # independent pairs keep the double average unbiased
        return float(np.mean(paired(self.kernel, self.samples, self.pair_samples)))


def monte_carlo_embedding(kernel: KernelSpec, sampler: Callable[[RngStream, int], np.ndarray],
                          n: int, seed: int) -> MonteCarloEmbedding:
    stream = RngStream.root(seed)
    return MonteCarloEmbedding(kernel=kernel,
                               samples=as_points(sampler(stream.split('mc/samples'), n)),
                               pair_samples=as_points(sampler(stream.split('mc/pairs'), n)),
                               seed=seed)


# Bayesian quadrature

@dataclass
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    embedding: EmbeddingClosedForm
    kernel: KernelSpec

    def integrate(self, fvals) -> float:
        return float(self.weights @ np.asarray(fvals, dtype=float).reshape(-1))


def _check_kernel(kernel: KernelSpec, emb: EmbeddingClosedForm):
    if kernel != emb.kernel:
        raise ValueError(f"embedding was built for {emb.kernel.spec_id}, not {kernel.spec_id}")


def bq_posterior(kernel: KernelSpec, emb: EmbeddingClosedForm, nodes, fvals,
                 jitter: float = 0.0, jitter_policy: JitterPolicy = DEFAULT_JITTER,
                 context: Optional[str] = None) -> Tuple[float, float, QuadratureRule]:
    """
    Bayesian quadrature posterior mean and variance.

    Args:
        kernel: kernel of the GP prior
        emb: closed-form embedding of the integration measure for that kernel
        nodes: (N, d) evaluation points
        fvals: N integrand values
        jitter: regularizer lambda_X added to the Gram diagonal

    Returns:
        (I_BQ, var_BQ, rule) with rule.weights = (K + lambda I)^{-1} mu
    """
    emb = _closed_form(emb)
    _check_kernel(kernel, emb)
    X = as_points(nodes)
    f = np.asarray(fvals, dtype=float).reshape(-1)
    if f.shape[0] != X.shape[0]:
        raise ValueError(f"{X.shape[0]} nodes but {f.shape[0]} function values")
    if jitter < 0:
        raise ValueError(f"jitter must be >= 0, got {jitter}")
    K = gram(kernel, X).values + jitter * np.eye(X.shape[0])
    L, _ = jittered_cholesky(K, jitter_policy, context or 'bq_posterior')
    mu = emb.eval(X)
    w = cho_solve((L, True), mu)
    init = emb.initial_error()
    var = init - float(mu @ w)
    if var < 0:
        if var < -VARIANCE_CLAMP * max(init, 1.0):
            raise NegativeVarianceError(f"BQ variance {var:.3e} below round-off band")
        var = 0.0
    rule = QuadratureRule(nodes=X, weights=w, embedding=emb, kernel=kernel)
    return float(w @ f), var, rule


def rule_squared_error(rule: QuadratureRule) -> float:
    """initial_error - 2 w.mu + w^T K w, the squared MMD between measure and rule"""
    mu = rule.embedding.eval(rule.nodes)
    K = gram(rule.kernel, rule.nodes).values
    w = rule.weights
    return rule.embedding.initial_error() - 2.0 * float(w @ mu) + float(w @ K @ w)


# Optimally-weighted MMD

def ow_weights(kernel_c: KernelSpec, emb_on_base: EmbeddingClosedForm, base_nodes,
               jitter_policy: JitterPolicy = DEFAULT_JITTER) -> np.ndarray:
    """w* = c(u, u)^{-1} mu_c(u), the minimizer of MMD_c(base measure, sum w delta_u)"""
    emb_on_base = _closed_form(emb_on_base)
    _check_kernel(kernel_c, emb_on_base)
    U = as_points(base_nodes)
    try:
        L, _ = jittered_cholesky(gram(kernel_c, U).values, jitter_policy, 'ow_weights')
    except SingularMatrixError as exc:
        raise SingularMatrixError("Gram matrix of the base nodes is singular; add jitter or "
                                  "remove duplicate nodes", exc.condition, exc.jitter, exc.context) from exc
    return cho_solve((L, True), emb_on_base.eval(U))


def ow_mmd2(kernel_k: KernelSpec, kernel_c: KernelSpec, emb_on_base: EmbeddingClosedForm,
            generator: Callable[[np.ndarray], np.ndarray], base_nodes, Q,
            jitter_policy: JitterPolicy = DEFAULT_JITTER) -> float:
    """Weighted MMD^2 between generated points (with OW weights) and the data sample Q"""
    U = as_points(base_nodes)
    X = as_points(generator(U))
    if X.shape[0] != U.shape[0]:
        raise ValueError("generator must return one point per base node")
    w = ow_weights(kernel_c, emb_on_base, U, jitter_policy)
    return mmd2_weighted(kernel_k, EmpiricalMeasure(X, w), Q)


def standard_gaussian_base(kernel_c: KernelSpec, dim: int = 1) -> EmbeddingClosedForm:
    """Embedding of N(0, I) under a Gaussian kernel, the usual simulator base space"""
    return kme(kernel_c, GaussianMeasure(np.zeros(dim), np.eye(dim)))

