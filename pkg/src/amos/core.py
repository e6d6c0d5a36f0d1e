"""AMOS unit parameters, reference forward semantics and the closed-form ReLU unit.

An AMOS unit is a chain of ``K`` threshold gates.  Gate ``i`` sees the analog
input(s) scaled by its own coefficient, minus the lateral inhibition coming from
the gates before it, and fires at most once.  The unit output is the
``d``-weighted count of the gates that fired.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.special import expit

ACTIVATION_KINDS = ("relu", "sigmoid", "swish", "mult", "identity")
UNIT_ARITY = {"relu": 1, "sigmoid": 1, "swish": 1, "mult": 2}


def _as_vector(name: str, values: Any, length: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if arr.shape != (length,):
        raise ValueError(f"{name} must have length {length}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(eq=False)
class AmosUnitParams:
    """Parameters of one AMOS unit.

    ``h`` is kept as a full ``K x K`` matrix whose entries on and above the
    diagonal are zero; ``h[i, j]`` (``j < i``) is the weight with which a spike
    of gate ``j`` is subtracted from the net input of gate ``i``.
    """

    arity: int
    K: int
    c: np.ndarray
    d: np.ndarray
    h: np.ndarray
    T: np.ndarray
    c2: np.ndarray | None = None
    kind: str = "custom"
    domain: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        if self.arity not in (1, 2):
            raise ValueError(f"arity must be 1 or 2, got {self.arity}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K}")
        self.K = int(self.K)
        K = self.K
        self.c = _as_vector("c", self.c, K)
        self.d = _as_vector("d", self.d, K)
        self.T = _as_vector("T", self.T, K)
        if self.arity == 2:
            if self.c2 is None:
                raise ValueError("c2 is required for a two-input unit")
            self.c2 = _as_vector("c2", self.c2, K)
        elif self.c2 is not None:
            raise ValueError("c2 given for a single-input unit")
        h = np.array(self.h, dtype=np.float64)
        if h.shape != (K, K):
            raise ValueError(f"h must be {K}x{K}, got {h.shape}")
        if np.any(np.triu(h) != 0.0):
            raise ValueError("h must be strictly lower triangular")
        if not np.all(np.isfinite(h)):
            raise ValueError("h contains non-finite values")
        self.h = h
        if self.domain is not None:
            self.domain = tuple((float(lo), float(hi)) for lo, hi in self.domain)

    @property
    def n_params(self) -> int:
        return parameter_count(self.arity, self.K)

    def copy(self) -> AmosUnitParams:
        return AmosUnitParams(
            arity=self.arity,
            K=self.K,
            c=self.c.copy(),
            d=self.d.copy(),
            h=self.h.copy(),
            T=self.T.copy(),
            c2=None if self.c2 is None else self.c2.copy(),
            kind=self.kind,
            domain=self.domain,
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AmosUnitParams):
            return NotImplemented
        same_c2 = (self.c2 is None and other.c2 is None) or (
            self.c2 is not None and other.c2 is not None and np.array_equal(self.c2, other.c2)
        )
        return (
            self.arity == other.arity
            and self.K == other.K
            and self.kind == other.kind
            and self.domain == other.domain
            and same_c2
            and all(
                np.array_equal(getattr(self, name), getattr(other, name))
                for name in ("c", "d", "h", "T")
            )
        )

    def to_dict(self) -> dict[str, Any]:
        rows, cols = np.tril_indices(self.K, k=-1)
        out: dict[str, Any] = {
            "kind": self.kind,
            "arity": self.arity,
            "K": self.K,
            "c": self.c.tolist(),
        }
        if self.c2 is not None:
            out["c2"] = self.c2.tolist()
        out["d"] = self.d.tolist()
        out["h"] = self.h[rows, cols].tolist()
        out["T"] = self.T.tolist()
        if self.domain is not None:
            out["domain"] = [list(b) for b in self.domain]
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AmosUnitParams:
        try:
            K = int(data["K"])
            arity = int(data["arity"])
            flat = np.array(data["h"], dtype=np.float64).reshape(-1)
        except KeyError as exc:
            raise ValueError(f"unit params missing field {exc.args[0]!r}") from None
        if K < 1:
            raise ValueError(f"K must be a positive integer, got {K}")
        if flat.shape[0] != K * (K - 1) // 2:
            raise ValueError(f"h must hold {K * (K - 1) // 2} entries, got {flat.shape[0]}")
        h = np.zeros((K, K))
        h[np.tril_indices(K, k=-1)] = flat
        for name in ("c", "d", "T"):
            if name not in data:
                raise ValueError(f"unit params missing field {name!r}")
        return cls(
            arity=arity,
            K=K,
            c=data["c"],
            d=data["d"],
            h=h,
            T=data["T"],
            c2=data.get("c2"),
            kind=data.get("kind", "custom"),
            domain=data.get("domain"),
        )


@dataclass(frozen=True)
class UnitEvaluation:
    y: float
    z: tuple[int, ...]
    spike_count: int = field(init=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "spike_count", int(sum(self.z)))


def heaviside(v: float) -> int:
    """Return 1 for ``v >= 0`` and 0 otherwise."""
    if not math.isfinite(v):
        raise ValueError(f"heaviside input must be finite, got {v}")
    return 1 if v >= 0 else 0


def evaluate_unit(params: AmosUnitParams, x: float, x2: float | None = None) -> UnitEvaluation:
    """Evaluate one AMOS unit gate by gate.

    This is the scalar reference the vectorised paths and the clocked simulator
    are checked against.
    """
    if (x2 is None) != (params.arity == 1):
        raise ValueError(f"unit of arity {params.arity} called with {1 if x2 is None else 2} inputs")
    x = float(x)
    z: list[int] = []
    y = 0.0
    for i in range(params.K):
        H = 0.0
        for j in range(i):
            H += params.h[i, j] * z[j]
        drive = params.c[i] * x
        if x2 is not None:
            drive = drive + params.c2[i] * float(x2)
        z.append(heaviside(drive - H - params.T[i]))
        y += params.d[i] * z[i]
    return UnitEvaluation(y=float(y), z=tuple(z))


def evaluate_batch(
    params: AmosUnitParams, x: np.ndarray, x2: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised forward pass; returns ``(y, z)`` with ``z`` of shape ``(n, K)``."""
    if (x2 is None) != (params.arity == 1):
        raise ValueError(f"unit of arity {params.arity} called with wrong number of inputs")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x2 is not None:
        x2 = np.asarray(x2, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    z = np.zeros((n, params.K))
    for i in range(params.K):
        # accumulate in the same order as evaluate_unit
        H = np.zeros(n)
        for j in range(i):
            if params.h[i, j] != 0.0:
                H = H + params.h[i, j] * z[:, j]
        drive = params.c[i] * x
        if x2 is not None:
            drive = drive + params.c2[i] * x2
        z[:, i] = (drive - H - params.T[i]) >= 0
    y = np.zeros(n)
    for i in range(params.K):
        y = y + params.d[i] * z[:, i]
    return y, z


def build_relu_unit(K: int, alpha: float) -> AmosUnitParams:
    """Closed-form ReLU unit: binary analog-to-digital conversion of ``clamp(x, 0, alpha)``.

    Thresholds and readout weights are ``alpha * 2**-i``, and every spike of gate
    ``j`` inhibits later gates by its own weight ``alpha * 2**-j``.  For
    ``x <= alpha`` the output undershoots ``relu(x)`` by at most ``alpha * 2**-K``.
    """
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    if not alpha > 0 or not math.isfinite(alpha):
        raise ValueError(f"alpha must be a positive finite number, got {alpha}")
    K = int(K)
    weights = np.array([alpha * 2.0 ** -(i + 1) for i in range(K)])
    h = np.tril(np.tile(weights, (K, 1)), k=-1)
    return AmosUnitParams(
        arity=1,
        K=K,
        c=np.ones(K),
        d=weights.copy(),
        h=h,
        T=weights.copy(),
        kind="relu",
        domain=((-float(alpha), float(alpha)),),
    )


def parameter_count(arity: int, K: int) -> int:
    if arity not in (1, 2):
        raise ValueError(f"arity must be 1 or 2, got {arity}")
    if int(K) != K or K < 1:
        raise ValueError(f"K must be a positive integer, got {K}")
    return (2 + arity) * K + K * (K - 1) // 2


def reference_activation(kind: str, *inputs: Any) -> Any:
    """Exact target value of an ANN gate; works elementwise on arrays."""
    expected = 2 if kind == "mult" else 1
    if kind not in ACTIVATION_KINDS:
        raise ValueError(f"unknown activation kind {kind!r}")
    if len(inputs) != expected:
        raise ValueError(f"{kind} takes {expected} input(s), got {len(inputs)}")
    x = inputs[0]
    if kind == "relu":
        return np.maximum(x, 0.0) if isinstance(x, np.ndarray) else max(float(x), 0.0)
    if kind == "sigmoid":
        return expit(x) if isinstance(x, np.ndarray) else float(expit(float(x)))
    if kind == "swish":
        return x * expit(x) if isinstance(x, np.ndarray) else float(x) * float(expit(float(x)))
    if kind == "mult":
        return x * inputs[1]
    return x


def unit_from_arrays(
    c: Sequence[float],
    d: Sequence[float],
    h: Sequence[Sequence[float]],
    T: Sequence[float],
    c2: Sequence[float] | None = None,
    kind: str = "custom",
) -> AmosUnitParams:
    K = len(c)
    return AmosUnitParams(
        arity=1 if c2 is None else 2, K=K, c=c, d=d, h=np.array(h, dtype=float), T=T, c2=c2, kind=kind
    )


def save_unit(params: AmosUnitParams, path: str | Path) -> None:
    Path(path).write_text(json.dumps(params.to_dict(), indent=1) + "\n")


def load_unit(path: str | Path) -> AmosUnitParams:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed unit file {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError(f"unit file {path} must hold a JSON object")
    return AmosUnitParams.from_dict(data)
