"""
Sample generators used by the experiment subcommands.

Samplers share the signature (stream, n) -> (n, d) array so the two-sample
loops can pre-split one stream per replicate and hand it over.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from app.bq import GaussianMeasure
from app.cbq import ConditionalTask
from app.kernels import KernelSpec, as_points
from utils.rng import RngStream

logger = logging.getLogger(__name__)

Sampler = Callable[[RngStream, int], np.ndarray]

GANDK_BENCHMARK = (3.0, 1.0, 0.1, 0.1)
GANDK_SKEW_CONSTANT = 0.8


# g-and-k distribution

def _gandk_params(theta):
    A, B, g, k = (float(v) for v in theta)
    if not B > 0:
        raise ValueError(f"g-and-k scale B must be positive, got {B}")
    return A, B, g, k


def gandk_generate(theta, u) -> np.ndarray:
    """
    Univariate g-and-k quantile transform of standard normal base draws.

    x = A + B [1 + 0.8 (1 - e^{-g z}) / (1 + e^{-g z})] (1 + z^2)^k z
    """
    A, B, g, k = _gandk_params(theta)
    z = np.asarray(u, dtype=float)
    skew = 1.0 + GANDK_SKEW_CONSTANT * np.tanh(0.5 * g * z)
    return A + B * skew * (1.0 + z ** 2) ** k * z


def gandk_generator(theta) -> Callable[[np.ndarray], np.ndarray]:
    """Base-space map U -> X for the optimally-weighted estimator"""
    _gandk_params(theta)

    def generate(base_nodes: np.ndarray) -> np.ndarray:
        U = as_points(base_nodes)
        return gandk_generate(theta, U[:, 0]).reshape(-1, 1)

    return generate


def gandk_sampler(theta) -> Sampler:
    generate = gandk_generator(theta)

    def sample(stream: RngStream, n: int) -> np.ndarray:
        return generate(stream.normal((n, 1)))

    return sample


# Moment-matched pairs

def gaussian_sampler(mean: float = 0.0, scale: float = 1.0, dim: int = 1) -> Sampler:
    def sample(stream: RngStream, n: int) -> np.ndarray:
        return mean + scale * stream.normal((n, dim))

    return sample


def laplace_sampler(scale: float = 1.0 / math.sqrt(2.0), dim: int = 1) -> Sampler:
    """Laplace(0, scale); the default scale matches the first two moments of N(0, 1)"""
    def sample(stream: RngStream, n: int) -> np.ndarray:
        u = stream.uniform((n, dim)) - 0.5
        return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))

    return sample


SAMPLERS = {
    'gaussian': gaussian_sampler,
    'laplace': laplace_sampler,
}


def named_sampler(name: str) -> Sampler:
    try:
        return SAMPLERS[name]()
    except KeyError:
        raise ValueError(f"unknown sampler '{name}'; expected one of {sorted(SAMPLERS)}") from None


# Bayesian linear regression task

@dataclass(eq=False)
class BayesLinearProblem:
    """
    Conjugate linear-Gaussian model with prior N(0, diag(theta)).

    The posterior over x given design Y and responses Z is N(m(theta), S(theta))
    with S^{-1} = diag(1/theta) + eta Y^T Y and m = eta S Y^T Z. The target is
    the posterior second moment I(theta) = m^T m + tr S.
    """
    design: np.ndarray = field(repr=False)
    responses: np.ndarray = field(repr=False)
    eta: float = 1.0

    def __post_init__(self):
        self.design = np.atleast_2d(np.asarray(self.design, dtype=float))
        self.responses = np.asarray(self.responses, dtype=float).reshape(-1)
        if self.design.shape[0] != self.responses.shape[0]:
            raise ValueError("design rows and responses must have the same length")
        if self.eta < 0:
            raise ValueError(f"eta must be >= 0, got {self.eta}")

    @classmethod
    def generate(cls, d: int = 2, n_obs: int = 10, eta: float = 1.0, seed: int = 0) -> 'BayesLinearProblem':
        """Draw a fixed design Y ~ N(0, 1), x_true ~ N(0, I) and Z = Y x_true + N(0, 1) noise"""
        stream = RngStream.root(seed).split('bayes-linear')
        Y = stream.split('design').normal((n_obs, d))
        x_true = stream.split('x-true').normal(d)
        Z = Y @ x_true + stream.split('noise').normal(n_obs)
        return cls(design=Y, responses=Z, eta=eta)

    @property
    def d(self) -> int:
        return self.design.shape[1]

    def _prior_variances(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        if theta.size == 1:
            theta = np.full(self.d, theta[0])
        if theta.shape != (self.d,) or np.any(theta <= 0):
            raise ValueError(f"theta must be a positive scalar or a {self.d}-vector")
        return theta

    def posterior_moments(self, theta):
        """(m, S) of the posterior under prior variances theta"""
        prior = self._prior_variances(theta)
        precision = np.diag(1.0 / prior) + self.eta * self.design.T @ self.design
        cov = np.linalg.inv(precision)
        cov = 0.5 * (cov + cov.T)
        mean = self.eta * cov @ self.design.T @ self.responses
        return mean, cov

    def measure(self, theta) -> GaussianMeasure:
        mean, cov = self.posterior_moments(theta)
        return GaussianMeasure(mean, cov)

    def true_integral(self, theta) -> float:
        mean, cov = self.posterior_moments(theta)
        return float(mean @ mean + np.trace(cov))

    def true_integrals(self, thetas) -> np.ndarray:
        return np.array([self.true_integral(t) for t in as_points(thetas)])

    def task(self, thetas, N: int, seed: int, kernel_X: Optional[KernelSpec] = None,
             kernel_Theta: Optional[KernelSpec] = None) -> ConditionalTask:
        """N posterior draws per parameter point with f(x) = x^T x"""
        thetas = as_points(thetas)
        root = RngStream.root(seed).split('bayes-linear/samples')
        samples = [self.measure(t).sample(root.split(f"t/{i}"), N) for i, t in enumerate(thetas)]
        fvals = np.array([np.sum(x ** 2, axis=1) for x in samples])
        return ConditionalTask(
            thetas=thetas,
            samples=samples,
            fvals=fvals,
            measure_for=self.measure,
            kernel_X=kernel_X or KernelSpec.gaussian(lengthscale=1.0),
            kernel_Theta=kernel_Theta or KernelSpec.matern(1.5, lengthscale=1.0),
        )


def uniform_thetas(n: int, dim: int, stream: RngStream, lo: float = 1.0, hi: float = 3.0) -> np.ndarray:
    """n parameter points drawn uniformly from (lo, hi)^dim"""
    return lo + (hi - lo) * stream.uniform((n, dim))


def bayes_linear_task(thetas, d: int = 2, N: int = 50, seed: int = 0, eta: float = 1.0,
                      n_obs: int = 10) -> ConditionalTask:
    """Conditional task over the Bayesian linear model; the model itself is seeded from seed"""
    problem = BayesLinearProblem.generate(d=d, n_obs=n_obs, eta=eta, seed=seed)
    return problem.task(thetas, N, seed)
