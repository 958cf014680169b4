"""
Conditional Bayesian quadrature and its regression baselines.

Estimates I(theta) = E_{X ~ P_theta}[f(X, theta)] from T parameter values, each
with N samples:
    Stage 1: Bayesian quadrature per theta_t -> I_BQ(theta_t), var_BQ(theta_t)
    Stage 2: GP regression over theta with per-point noise lambda_Theta + var_BQ
Baselines replace Stage 1 by the plain Monte Carlo mean and Stage 2 by a
polynomial least-squares fit (LSMC) or kernel ridge regression (KLSMC).
Targets are standardized before both stages and restored on prediction.
"""
import logging
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement, product
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import cho_solve

from app.bq import EmbeddingClosedForm, Measure, QuadratureRule, bq_posterior, kme
from app.exceptions import QuadratureFormError, RankDeficientError, SingularMatrixError
from app.gp_core import (DEFAULT_JITTER, Dataset, GpPosterior, JitterPolicy, fit, jittered_cholesky,
                         posterior_log_marginal_likelihood, predict_mean_batch, predict_var_batch)
from app.kernels import KernelSpec, as_points, cross_gram, gram
from utils.replicate_pool import ReplicatePool

logger = logging.getLogger(__name__)

# Default empirical Bayes grids
AMPLITUDE_GRID = (1.0, 10.0, 100.0, 1000.0)
LENGTHSCALE_GRID = (0.1, 0.3, 1.0, 3.0, 10.0)
NOISE_GRID = (0.01, 0.1, 1.0)
LSMC_DEGREES = (1, 2, 3, 4)
QUADRATURE_FORM_TOLERANCE = 1e-10


@dataclass
class ConditionalTask:
    """
    Parameter points with per-parameter samples and integrand values.

    measure_for maps one parameter point to the sampling measure P_theta; the
    Stage-1 embedding is kme(kernel_X, measure_for(theta)).
    """
    thetas: np.ndarray
    samples: List[np.ndarray]
    fvals: np.ndarray
    measure_for: Callable[[np.ndarray], Measure]
    kernel_X: KernelSpec
    kernel_Theta: KernelSpec

    def __post_init__(self):
        self.thetas = as_points(self.thetas)
        self.samples = [as_points(s) for s in self.samples]
        self.fvals = np.atleast_2d(np.asarray(self.fvals, dtype=float))
        T = self.thetas.shape[0]
        if T < 1:
            raise ValueError("conditional task needs at least one parameter point")
        if len(self.samples) != T or self.fvals.shape[0] != T:
            raise ValueError(f"{T} parameter points but {len(self.samples)} sample sets "
                             f"and {self.fvals.shape[0]} value rows")
        N = self.samples[0].shape[0]
        if any(s.shape[0] != N for s in self.samples) or self.fvals.shape[1] != N:
            raise ValueError("every parameter point needs the same number of samples N")

    @property
    def T(self) -> int:
        return self.thetas.shape[0]

    @property
    def N(self) -> int:
        return self.samples[0].shape[0]

    def x_embedding(self, t: int, kernel: Optional[KernelSpec] = None) -> EmbeddingClosedForm:
        return kme(kernel or self.kernel_X, self.measure_for(self.thetas[t]))

    def mc_means(self) -> np.ndarray:
        return self.fvals.mean(axis=1)

    def with_kernels(self, kernel_X: Optional[KernelSpec] = None,
                     kernel_Theta: Optional[KernelSpec] = None) -> 'ConditionalTask':
        return replace(self, kernel_X=kernel_X or self.kernel_X,
                       kernel_Theta=kernel_Theta or self.kernel_Theta)

    def truncated(self, n: int) -> 'ConditionalTask':
        """The first n samples of every parameter point"""
        return replace(self, samples=[s[:n] for s in self.samples], fvals=self.fvals[:, :n])

    def reordered(self, order: Sequence[int]) -> 'ConditionalTask':
        order = list(order)
        return replace(self, thetas=self.thetas[order], samples=[self.samples[i] for i in order],
                       fvals=self.fvals[order])


@dataclass(frozen=True)
class Standardization:
    mean: float = 0.0
    scale: float = 1.0

    @classmethod
    def fit(cls, values: np.ndarray) -> 'Standardization':
        values = np.asarray(values, dtype=float)
        mean = float(np.mean(values))
        std = float(np.std(values))
        if not std > 0:
            logger.warning("Integrand values have zero spread; standardization only centers them")
            std = 1.0
        return cls(mean=mean, scale=std)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=float) - self.mean) / self.scale

    def restore_mean(self, values):
        return values * self.scale + self.mean

    def restore_var(self, values):
        return values * self.scale ** 2


IDENTITY = Standardization()


# Conditional Bayesian quadrature

@dataclass
class CbqPosterior:
    stage1_means: np.ndarray
    stage1_vars: np.ndarray
    rules: List[QuadratureRule] = field(repr=False)
    stage2: GpPosterior = field(repr=False)
    lambda_theta: float
    targets: np.ndarray = field(repr=False)
    standardization: Standardization = IDENTITY

    def stage2_weights(self, theta) -> np.ndarray:
        """w_t with mean = sum_t w_t I_BQ(theta_t)"""
        k = cross_gram(self.stage2.spec, np.atleast_2d(np.asarray(theta, dtype=float)),
                       self.stage2.train.inputs)[0]
        return self.stage2.solve(k)

    def quadrature_weights(self, theta) -> np.ndarray:
        """Flattened weights w_t * v_n^t over all (t, n), for standardized integrand values"""
        w = self.stage2_weights(theta)
        return np.concatenate([w_t * rule.weights for w_t, rule in zip(w, self.rules)])


def _stage1(task: ConditionalTask, targets: np.ndarray, lambda_x: float, jitter_policy: JitterPolicy,
            pool: Optional[ReplicatePool] = None) -> List[Tuple[float, float, QuadratureRule]]:
    def run(t: int):
        try:
            return bq_posterior(task.kernel_X, task.x_embedding(t), task.samples[t], targets[t],
                                jitter=lambda_x, jitter_policy=jitter_policy)
        except SingularMatrixError as exc:
            raise exc.annotate(f"stage 1, t={t}") from exc

    indices = range(task.T)
    if pool is None:
        return [run(t) for t in indices]
    return pool.map_ordered(run, indices)


def cbq_fit(task: ConditionalTask, lambda_theta: float = 0.0, lambda_x: float = 0.0,
            standardize: bool = True, jitter_policy: JitterPolicy = DEFAULT_JITTER,
            pool: Optional[ReplicatePool] = None) -> CbqPosterior:
    """
    Two-stage CBQ fit.

    Args:
        task: parameter points, samples, integrand values and kernels
        lambda_theta: Stage-2 noise floor added to every BQ variance
        lambda_x: Stage-1 Gram regularizer
        standardize: renormalize integrand values by their mean and spread
        pool: optional pool for the independent Stage-1 problems
    """
    if lambda_theta < 0 or lambda_x < 0:
        raise ValueError("regularizers must be >= 0")
    stdz = Standardization.fit(task.fvals) if standardize else IDENTITY
    targets = stdz.apply(task.fvals)
    stage1 = _stage1(task, targets, lambda_x, jitter_policy, pool)
    means = np.array([s[0] for s in stage1])
    variances = np.array([s[1] for s in stage1])
    data = Dataset(task.thetas, means, lambda_theta + variances)
    try:
        stage2 = fit(task.kernel_Theta, data, jitter_policy)
    except SingularMatrixError as exc:
        raise exc.annotate('stage 2') from exc
    return CbqPosterior(stage1_means=means, stage1_vars=variances, rules=[s[2] for s in stage1],
                        stage2=stage2, lambda_theta=lambda_theta, targets=targets,
                        standardization=stdz)


def cbq_predict(post: CbqPosterior, theta) -> Tuple[float, float]:
    """Posterior mean and variance of I(theta) on the original scale"""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mean = float(predict_mean_batch(post.stage2, theta)[0])
    residual = quadrature_form_residual(post, theta)
    if residual > QUADRATURE_FORM_TOLERANCE * max(1.0, abs(mean)):
        raise QuadratureFormError(residual, theta)
    var = float(predict_var_batch(post.stage2, theta)[0])
    return post.standardization.restore_mean(mean), post.standardization.restore_var(var)


def cbq_predict_batch(post: CbqPosterior, thetas) -> np.ndarray:
    return post.standardization.restore_mean(predict_mean_batch(post.stage2, thetas))


def quadrature_form_residual(post: CbqPosterior, theta) -> float:
    """|sum_t sum_n w_t v_n^t f_std(x_n^t) - Stage-2 mean|, both on the standardized scale"""
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    mean = float(predict_mean_batch(post.stage2, theta)[0])
    return abs(float(post.quadrature_weights(theta) @ post.targets.reshape(-1)) - mean)


# Baselines

def polynomial_exponents(p: int, degree: int) -> np.ndarray:
    """Exponent rows of all monomials in p variables with total degree <= degree"""
    rows = [np.zeros(p, dtype=int)]
    for total in range(1, degree + 1):
        for combo in combinations_with_replacement(range(p), total):
            rows.append(np.bincount(np.asarray(combo, dtype=int), minlength=p))
    return np.array(rows)


@dataclass
class PolynomialModel:
    degree: int
    exponents: np.ndarray = field(repr=False)
    coef: np.ndarray

    def design(self, thetas) -> np.ndarray:
        X = as_points(thetas)
        return np.prod(X[:, None, :] ** self.exponents[None, :, :], axis=2)

    def predict(self, thetas) -> np.ndarray:
        return self.design(thetas) @ self.coef


def lsmc_fit(thetas, mc_estimates, degree: int, ridge: float = 0.0) -> PolynomialModel:
    """Least-squares polynomial regression of Monte Carlo means on theta"""
    X = as_points(thetas)
    y = np.asarray(mc_estimates, dtype=float).reshape(-1)
    exponents = polynomial_exponents(X.shape[1], degree)
    model = PolynomialModel(degree=degree, exponents=exponents, coef=np.zeros(len(exponents)))
    A = model.design(X)
    if A.shape[0] <= A.shape[1]:
        raise RankDeficientError(f"LSMC degree {degree} needs more than {A.shape[1]} parameter points, "
                                 f"got {A.shape[0]}")
    if ridge > 0:
        model.coef = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ y)
        return model
    coef, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < A.shape[1]:
        raise RankDeficientError(f"LSMC design of degree {degree} has rank {rank} < {A.shape[1]}")
    model.coef = coef
    return model


def _rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2)))


def select_lsmc_degree(thetas, mc_estimates, val_thetas, val_truth,
                       degrees: Sequence[int] = LSMC_DEGREES) -> Tuple[PolynomialModel, Dict[int, float]]:
    """Fit each degree and keep the one with the lowest held-out RMSE"""
    scores: Dict[int, float] = {}
    best = None
    for q in degrees:
        try:
            model = lsmc_fit(thetas, mc_estimates, q)
        except RankDeficientError as exc:
            logger.debug(f"Skipping LSMC degree {q}: {exc}")
            continue
        scores[q] = _rmse(model.predict(val_thetas), val_truth)
        if best is None or scores[q] < scores[best.degree]:
            best = model
    if best is None:
        raise RankDeficientError("no LSMC degree could be fitted")
    return best, scores


@dataclass
class KernelRidgeModel:
    kernel: KernelSpec
    inputs: np.ndarray = field(repr=False)
    coef: np.ndarray = field(repr=False)
    ridge: float = 0.0
    standardization: Standardization = IDENTITY

    def predict(self, thetas) -> np.ndarray:
        return self.standardization.restore_mean(cross_gram(self.kernel, thetas, self.inputs) @ self.coef)


def klsmc_fit(thetas, mc_estimates, kernel_Theta: KernelSpec, ridge: float,
              standardization: Standardization = IDENTITY) -> KernelRidgeModel:
    """Kernel ridge regression (K + ridge I)^{-1} y of Monte Carlo means on theta"""
    if ridge < 0:
        raise ValueError(f"ridge must be >= 0, got {ridge}")
    X = as_points(thetas)
    y = standardization.apply(np.asarray(mc_estimates, dtype=float).reshape(-1))
    K = gram(kernel_Theta, X).values + ridge * np.eye(X.shape[0])
    L, _ = jittered_cholesky(K, JitterPolicy.none(), context='klsmc')
    coef = cho_solve((L, True), y)
    return KernelRidgeModel(kernel=kernel_Theta, inputs=X, coef=coef, ridge=ridge,
                            standardization=standardization)


def select_klsmc(thetas, mc_estimates, val_thetas, val_truth, base_kernel: KernelSpec,
                 amplitudes: Sequence[float] = AMPLITUDE_GRID,
                 lengthscales: Sequence[float] = LENGTHSCALE_GRID,
                 ridges: Sequence[float] = NOISE_GRID) -> Tuple[KernelRidgeModel, float]:
    """Grid search of KLSMC hyperparameters by held-out RMSE (standardized targets)"""
    stdz = Standardization.fit(mc_estimates)
    best, best_score = None, float('inf')
    for amp, ls, lam in product(amplitudes, lengthscales, ridges):
        kernel = base_kernel.with_amplitude(amp).with_lengthscale(ls)
        try:
            model = klsmc_fit(thetas, mc_estimates, kernel, lam, stdz)
        except SingularMatrixError:
            continue
        score = _rmse(model.predict(val_thetas), val_truth)
        if score < best_score:
            best, best_score = model, score
    if best is None:
        raise SingularMatrixError("no KLSMC grid point could be factorized")
    return best, best_score


# Empirical Bayes

@dataclass
class EmpiricalBayesSelection:
    kernel_X: KernelSpec
    kernel_Theta: KernelSpec
    lambda_theta: float
    stage1_lml: float
    stage2_lml: float
    stage1_table: Dict[Tuple[float, float], float] = field(default_factory=dict, repr=False)
    stage2_table: Dict[Tuple[float, float, float], float] = field(default_factory=dict, repr=False)


def _safe_lml(spec: KernelSpec, data: Dataset, jitter_policy: JitterPolicy) -> float:
    try:
        return posterior_log_marginal_likelihood(fit(spec, data, jitter_policy))
    except SingularMatrixError:
        logger.warning(f"Marginal likelihood not evaluable for {spec.spec_id}; skipping grid point")
        return float('-inf')


def empirical_bayes_grid(task: ConditionalTask,
                         amplitude_grid: Sequence[float] = AMPLITUDE_GRID,
                         lengthscale_grid: Sequence[float] = LENGTHSCALE_GRID,
                         lambda_grid: Sequence[float] = NOISE_GRID,
                         lambda_x: float = 0.0,
                         jitter_policy: JitterPolicy = DEFAULT_JITTER) -> EmpiricalBayesSelection:
    """
    Grid-search empirical Bayes for both CBQ stages.

    Stage-1 (amplitude, lengthscale) maximize the marginal likelihood of the
    standardized integrand at the first parameter point and are reused for all
    t. Stage-2 (amplitude, lengthscale, lambda_Theta) then maximize the
    heteroscedastic marginal likelihood of the Stage-1 BQ means.
    """
    stdz = Standardization.fit(task.fvals)
    targets = stdz.apply(task.fvals)

    stage1_table = {}
    first = Dataset(task.samples[0], targets[0], lambda_x)
    for amp, ls in product(amplitude_grid, lengthscale_grid):
        spec = task.kernel_X.with_amplitude(amp).with_lengthscale(ls)
        stage1_table[(amp, ls)] = _safe_lml(spec, first, jitter_policy)
    (amp_x, ls_x), lml_x = max(stage1_table.items(), key=lambda kv: kv[1])
    kernel_X = task.kernel_X.with_amplitude(amp_x).with_lengthscale(ls_x)
    logger.info(f"Stage 1 selected amplitude={amp_x:g}, lengthscale={ls_x:g} (log ML {lml_x:.4f})")

    stage1 = _stage1(task.with_kernels(kernel_X=kernel_X), targets, lambda_x, jitter_policy)
    means = np.array([s[0] for s in stage1])
    variances = np.array([s[1] for s in stage1])

    stage2_table = {}
    for amp, ls, lam in product(amplitude_grid, lengthscale_grid, lambda_grid):
        spec = task.kernel_Theta.with_amplitude(amp).with_lengthscale(ls)
        stage2_table[(amp, ls, lam)] = _safe_lml(spec, Dataset(task.thetas, means, lam + variances),
                                                 jitter_policy)
    (amp_t, ls_t, lam_t), lml_t = max(stage2_table.items(), key=lambda kv: kv[1])
    logger.info(f"Stage 2 selected amplitude={amp_t:g}, lengthscale={ls_t:g}, "
                f"lambda={lam_t:g} (log ML {lml_t:.4f})")
    return EmpiricalBayesSelection(
        kernel_X=kernel_X,
        kernel_Theta=task.kernel_Theta.with_amplitude(amp_t).with_lengthscale(ls_t),
        lambda_theta=lam_t,
        stage1_lml=lml_x,
        stage2_lml=lml_t,
        stage1_table=stage1_table,
        stage2_table=stage2_table,
    )
