"""Spiking approximations of ANN gates with at most one spike per neuron."""

from amos.core import (
    AmosUnitParams,
    UnitEvaluation,
    build_relu_unit,
    evaluate_batch,
    evaluate_unit,
    heaviside,
    parameter_count,
    reference_activation,
)

__all__ = [
    "AmosUnitParams",
    "UnitEvaluation",
    "build_relu_unit",
    "evaluate_batch",
    "evaluate_unit",
    "heaviside",
    "parameter_count",
    "reference_activation",
]
