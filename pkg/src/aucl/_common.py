from __future__ import annotations

import math

from .types import NumericalError

_SQRT_2PI = math.sqrt(2.0 * math.pi)


def gaussian_likelihood(innovation: float, S: float) -> float:
    """Scalar Gaussian density of ``innovation`` with variance ``S``."""
    if not S > 0.0:
        raise NumericalError(f"innovation variance must be positive, got {S}")
    if math.isinf(S):
        return 0.0
    return math.exp(-innovation * innovation / (2.0 * S)) / (_SQRT_2PI * math.sqrt(S))
