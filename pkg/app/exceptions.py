"""
Exception hierarchy for kernel_lab.

Every error derives from KernelLabError and from the closest builtin, so callers
that only know about ValueError / LinAlgError keep working.
"""
from typing import Optional

import numpy as np


class KernelLabError(Exception):
    """Base class for all kernel_lab errors"""


class KernelDomainError(KernelLabError, ValueError):
    """Input outside the kernel's domain (e.g. negative time for Brownian kernels)"""


class KernelShapeError(KernelLabError, ValueError):
    """Input has the wrong shape for the requested kernel or estimator"""


class SingularMatrixError(KernelLabError, np.linalg.LinAlgError):
    """Cholesky factorization failed even at the largest jitter"""

    def __init__(self, reason: str, condition: float = float('inf'),
                 jitter: float = 0.0, context: Optional[str] = None):
        self.reason = reason
        self.condition = condition
        self.jitter = jitter
        self.context = context
        detail = f"{reason} (condition estimate {condition:.3e}, last jitter {jitter:.3e})"
        if context:
            detail = f"{context}: {detail}"
        super().__init__(detail)

    def annotate(self, context: str) -> 'SingularMatrixError':
        """Return a copy carrying an extra location prefix (stage, t index, ...)"""
        prefix = f"{context}/{self.context}" if self.context else context
        return SingularMatrixError(self.reason, self.condition, self.jitter, prefix)


class NegativeVarianceError(KernelLabError, ArithmeticError):
    """Posterior variance more negative than the round-off clamp band"""


class UnsupportedEmbeddingError(KernelLabError, NotImplementedError):
    """No closed-form kernel mean embedding for the requested kernel/measure pair"""


class RankDeficientError(KernelLabError, ValueError):
    """Least-squares design matrix lacks full column rank"""


class DegenerateDirectionError(KernelLabError, RuntimeError):
    """Repeated zero-norm projection directions"""


class StatisticError(KernelLabError, RuntimeError):
    """A test statistic failed on one permutation of the pooled sample"""

    def __init__(self, message: str, permutation_index: int):
        self.permutation_index = permutation_index
        super().__init__(f"permutation {permutation_index}: {message}")


class ConfigError(KernelLabError, ValueError):
    """Invalid experiment configuration"""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(message)


class QuadratureFormError(KernelLabError, ArithmeticError):
    """The flattened quadrature weights disagree with the Stage-2 posterior mean"""

    def __init__(self, residual: float, theta):
        self.residual = residual
        self.theta = np.asarray(theta, dtype=float).reshape(-1)
        super().__init__(f"quadrature form differs from the Stage-2 mean by {residual:.3e} "
                         f"at theta={self.theta.tolist()}")
