"""Pretrained unit parameters shipped with the package."""

from __future__ import annotations

import json
from importlib import resources

from amos.compile import UnitLibrary
from amos.core import AmosUnitParams, build_relu_unit

PRETRAINED_KINDS = ("sigmoid", "swish", "mult")


def load_pretrained(kind: str) -> AmosUnitParams:
    if kind not in PRETRAINED_KINDS:
        raise KeyError(f"no pretrained {kind!r} unit; available: {', '.join(PRETRAINED_KINDS)}")
    text = resources.files("amos").joinpath("data", f"{kind}.json").read_text()
    return AmosUnitParams.from_dict(json.loads(text))


def default_library(relu_K: int = 10, relu_alpha: float | None = None) -> UnitLibrary:
    """Closed-form ReLU unit plus the shipped trained units.

    ``relu_alpha`` defaults to ``2**relu_K`` so the quantization step is one.
    """
    alpha = float(2**relu_K) if relu_alpha is None else relu_alpha
    lib = UnitLibrary({"relu": build_relu_unit(relu_K, alpha)})
    for kind in PRETRAINED_KINDS:
        lib[kind] = load_pretrained(kind)
    return lib
