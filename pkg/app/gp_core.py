"""
Gaussian process posterior with jittered Cholesky factorization.

Zero prior mean throughout; callers center (or standardize) targets. Per-point
observation noise is supported natively, which is what the heteroscedastic second
stage of conditional Bayesian quadrature needs.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular

from app.exceptions import NegativeVarianceError, SingularMatrixError
from app.kernels import KernelSpec, as_point, as_points, cross_gram, diag, gram

logger = logging.getLogger(__name__)

# Round-off band for posterior variances, relative to the prior variance.
VARIANCE_CLAMP = 1e-10


@dataclass
class Dataset:
    """Training inputs, targets and per-point noise variances"""
    inputs: np.ndarray
    targets: np.ndarray
    noise: Optional[np.ndarray] = None

    def __post_init__(self):
        self.inputs = as_points(self.inputs)
        self.targets = np.asarray(self.targets, dtype=float).reshape(-1)
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n:
            raise ValueError(f"{n} inputs but {self.targets.shape[0]} targets")
        if self.noise is None:
            self.noise = np.zeros(n)
        else:
            self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float), (n,)).copy()
        if np.any(self.noise < 0) or not np.all(np.isfinite(self.noise)):
            raise ValueError("noise variances must be finite and >= 0")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True)
class JitterPolicy:
    """Relative jitter levels tried in order; each is multiplied by mean(diag K)"""
    schedule: Tuple[float, ...] = (0.0, 1e-12, 1e-10, 1e-8, 1e-6)

    @classmethod
    def none(cls) -> 'JitterPolicy':
        return cls(schedule=(0.0,))


DEFAULT_JITTER = JitterPolicy()


def jittered_cholesky(matrix: np.ndarray, policy: JitterPolicy = DEFAULT_JITTER,
                      context: Optional[str] = None) -> Tuple[np.ndarray, float]:
    """
    Lower Cholesky factor of matrix + jitter * I, escalating jitter on failure.

    Returns:
        (factor, absolute jitter used)
    """
    n = matrix.shape[0]
    scale = float(np.mean(np.diag(matrix))) if n else 1.0
    if not scale > 0:
        scale = 1.0
    jitter = 0.0
    for level in policy.schedule:
        jitter = level * scale
        try:
            L = cholesky(matrix + jitter * np.eye(n), lower=True, check_finite=True)
        except (LinAlgError, ValueError):
            logger.debug(f"Cholesky failed at relative jitter {level:g}" + (f" ({context})" if context else ''))
            continue
        if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0):
            continue
        if jitter > 0:
            logger.warning(f"Cholesky needed jitter {jitter:.3e}" + (f" ({context})" if context else ''))
        return L, jitter
    try:
        condition = float(np.linalg.cond(matrix))
    except LinAlgError:
        condition = float('inf')
    raise SingularMatrixError("matrix is not positive definite", condition, jitter, context)


@dataclass
class GpPosterior:
    spec: KernelSpec
    train: Dataset
    chol: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    jitter: float = 0.0

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """(K + diag(noise) + jitter I)^{-1} rhs"""
        return cho_solve((self.chol, True), rhs)

    def cross(self, query) -> np.ndarray:
        return cross_gram(self.spec, query, self.train.inputs)


def _system_matrix(spec: KernelSpec, data: Dataset) -> np.ndarray:
    return gram(spec, data.inputs).values + np.diag(data.noise)


def fit(spec: KernelSpec, data: Dataset, jitter_policy: JitterPolicy = DEFAULT_JITTER,
        context: Optional[str] = None) -> GpPosterior:
    """Factorize K + diag(noise) and solve for the residual weights"""
    if data.size < 1:
        raise ValueError("GP fit requires at least one observation")
    L, jitter = jittered_cholesky(_system_matrix(spec, data), jitter_policy, context)
    alpha = cho_solve((L, True), data.targets)
    return GpPosterior(spec=spec, train=data, chol=L, alpha=alpha, jitter=jitter)


def predict_mean_batch(post: GpPosterior, query) -> np.ndarray:
    return post.cross(query) @ post.alpha


def predict_mean(post: GpPosterior, x) -> float:
    return float(predict_mean_batch(post, as_point(x))[0])


def _clamp_variances(values: np.ndarray, prior: np.ndarray) -> np.ndarray:
    band = -VARIANCE_CLAMP * np.abs(prior)
    if np.any(values < band):
        worst = float(np.min(values))
        raise NegativeVarianceError(f"posterior variance {worst:.3e} below round-off band")
    return np.where(values < 0, 0.0, values)


def predict_cov_matrix(post: GpPosterior, query, query2=None) -> np.ndarray:
    """Posterior covariance between two query sets (the same set if query2 is None)"""
    A = as_points(query)
    B = A if query2 is None else as_points(query2)
    V_a = solve_triangular(post.chol, post.cross(A).T, lower=True)
    V_b = V_a if query2 is None else solve_triangular(post.chol, post.cross(B).T, lower=True)
    cov = cross_gram(post.spec, A, B) - V_a.T @ V_b
    if query2 is None:
        cov = 0.5 * (cov + cov.T)
        d = np.diag(cov).copy()
        np.fill_diagonal(cov, _clamp_variances(d, diag(post.spec, A)))
    return cov


def predict_var_batch(post: GpPosterior, query) -> np.ndarray:
    A = as_points(query)
    V = solve_triangular(post.chol, post.cross(A).T, lower=True)
    prior = diag(post.spec, A)
    return _clamp_variances(prior - np.sum(V * V, axis=0), prior)


def predict_cov(post: GpPosterior, x, x2) -> float:
    """k_N(x, x'); the diagonal is clamped to 0 inside the round-off band"""
    A = as_point(x)
    B = as_point(x2)
    if np.array_equal(A, B):
        return float(predict_var_batch(post, A)[0])
    return float(predict_cov_matrix(post, A, B)[0, 0])


def log_marginal_likelihood(spec: KernelSpec, data: Dataset,
                            jitter_policy: JitterPolicy = DEFAULT_JITTER) -> float:
    """-1/2 [y^T (K+D)^{-1} y + logdet(K+D) + N log 2 pi]"""
    post = fit(spec, data, jitter_policy)
    return posterior_log_marginal_likelihood(post)


def posterior_log_marginal_likelihood(post: GpPosterior) -> float:
    y = post.train.targets
    n = y.shape[0]
    logdet = 2.0 * float(np.sum(np.log(np.diag(post.chol))))
    return -0.5 * (float(y @ post.alpha) + logdet + n * math.log(2.0 * math.pi))


def loo_predictive(post: GpPosterior) -> Tuple[np.ndarray, np.ndarray]:
    """
    Leave-one-out predictive means and variances in closed form.

    With P = (K + D)^{-1}: mu_{-i} = y_i - alpha_i / P_ii, var_{-i} = 1 / P_ii.
    """
    n = post.train.size
    P = post.solve(np.eye(n))
    p_diag = np.diag(P)
    means = post.train.targets - post.alpha / p_diag
    return means, 1.0 / p_diag

