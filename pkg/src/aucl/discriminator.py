"""Power-metric based LoS/NLoS mode discriminator."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .types import ConstructionError, ModeProbabilities


@dataclass(frozen=True)
class SigmoidParams:
    """p_nlos = 1 / (a + b * exp(c - pm)), the fitted power-metric curve."""

    a: float = 1.068
    b: float = 1.013
    c: float = 6.934

    def __post_init__(self):
        if not self.a >= 1.0:
            raise ConstructionError("sigmoid parameter a must be >= 1")
        if not self.b > 0.0:
            raise ConstructionError("sigmoid parameter b must be positive")


DEFAULT_SIGMOID = SigmoidParams()


def _check(value: float, name: str) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value}")
    return value


def nlos_probability(pm: float, params: SigmoidParams = DEFAULT_SIGMOID) -> ModeProbabilities:
    pm = _check(pm, "power metric")
    exponent = params.c - pm
    # exp overflows for pm far below c; the probability is then zero anyway
    if exponent > 700.0:
        p = 0.0
    else:
        p = 1.0 / (params.a + params.b * math.exp(exponent))
    return ModeProbabilities.from_nlos(p)


def deterministic_mode(pm: float, threshold: float = DEFAULT_SIGMOID.c) -> ModeProbabilities:
    """Hard classification; a power metric exactly at the threshold is NLoS."""
    pm = _check(pm, "power metric")
    threshold = _check(threshold, "threshold")
    if pm < threshold:
        return ModeProbabilities(1.0, 0.0)
    return ModeProbabilities(0.0, 1.0)
