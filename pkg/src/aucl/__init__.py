"""Loosely coupled cooperative UWB localization with NLoS bias handling."""

from .discriminator import SigmoidParams, deterministic_mode, nlos_probability
from .dmv import los_correct, range_linearize
from .imm import process_measurement, sequential_update
from .skf import (beacon_los_correct, beacon_nlos_correct, nlos_correct,
                  nlos_correct_compact, predict_bias)
from .types import (LOS, NLOS, Beacon, Belief, BiasBook, BiasModel, ConstructionError,
                    DegenerateGeometryError, ModeProbabilities, NumericalError,
                    RangeMeasurement, UpdateOutcome)

__all__ = [
    "LOS", "NLOS", "Beacon", "Belief", "BiasBook", "BiasModel", "ConstructionError",
    "DegenerateGeometryError", "ModeProbabilities", "NumericalError", "RangeMeasurement",
    "SigmoidParams", "UpdateOutcome", "beacon_los_correct", "beacon_nlos_correct",
    "deterministic_mode", "los_correct", "nlos_correct", "nlos_correct_compact",
    "nlos_probability", "predict_bias", "process_measurement", "range_linearize",
    "sequential_update",
]
