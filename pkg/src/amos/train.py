"""Surrogate-gradient training of AMOS units.

The forward pass is the exact threshold-gate chain.  In the backward pass the
derivative of each Heaviside step is replaced by a triangle of unit area
(``pseudo_derivative``), and the dependence of later gates on earlier spikes
through the lateral weights is differentiated exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from amos.core import AmosUnitParams, evaluate_batch, reference_activation

log = logging.getLogger(__name__)

TARGET_KINDS = ("relu", "sigmoid", "swish", "mult", "tabulated")

DEFAULT_DOMAINS = {
    "relu": ((-4.0, 4.0),),
    "sigmoid": ((-8.0, 8.0),),
    "swish": ((-6.0, 6.0),),
    "mult": ((-1.0, 1.0), (-1.0, 1.0)),
}

DEFAULT_K = {"relu": 10, "sigmoid": 8, "swish": 12, "mult": 40}

class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss


@dataclass(frozen=True)
class TargetFunction:
    """A function to approximate together with its sampling domain.

    ``tabulated`` targets carry sample values on a grid: ``table`` is
    ``(xs, values)`` for one input or ``(xs, ys, values)`` for two, and values
    in between are linearly interpolated.
    """

    kind: str
    domain: tuple[tuple[float, float], ...]
    table: tuple[Any, ...] | None = None
    fn: Callable[..., Any] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        domain = tuple((float(lo), float(hi)) for lo, hi in self.domain)
        if len(domain) not in (1, 2):
            raise ValueError("domain must give one interval per input (1 or 2 inputs)")
        for lo, hi in domain:
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError("domain bounds must be finite")
            if not lo < hi:
                raise ValueError(f"empty domain [{lo}, {hi}]")
        if self.kind == "mult" and len(domain) != 2:
            raise ValueError("mult needs a two-input domain")
        if self.kind in ("relu", "sigmoid", "swish") and len(domain) != 1:
            raise ValueError(f"{self.kind} needs a one-input domain")
        if self.kind == "tabulated" and self.table is None and self.fn is None:
            raise ValueError("tabulated target needs a table or a callable")
        object.__setattr__(self, "domain", domain)

    @property
    def arity(self) -> int:
        return len(self.domain)

    def __call__(self, x: np.ndarray, x2: np.ndarray | None = None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.fn is not None:
            return np.asarray(self.fn(x) if x2 is None else self.fn(x, x2), dtype=np.float64)
        if self.kind != "tabulated":
            args = (x,) if x2 is None else (x, np.asarray(x2, dtype=np.float64))
            return reference_activation(self.kind, *args)
        if self.arity == 1:
            xs, values = self.table
            return np.interp(x, xs, values)
        xs, ys, values = self.table
        interp = RegularGridInterpolator((xs, ys), np.asarray(values, dtype=np.float64))
        return interp(np.stack([x, x2], axis=-1))


def default_target(kind: str) -> TargetFunction:
    return TargetFunction(kind=kind, domain=DEFAULT_DOMAINS[kind])


@dataclass(frozen=True)
class TrainConfig:
    K: int
    sample_count: int = 4096
    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 64
    gamma: float = 1.0
    rng_seed: int = 0
    init_scheme: str = "spread"
    anneal_at: float = 2.0 / 3.0
    anneal_factor: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_grid: int | None = None

    def __post_init__(self) -> None:
        for name in ("K", "sample_count", "epochs", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init_scheme {self.init_scheme!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> TrainConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainReport:
    params: AmosUnitParams
    mse_history: list[float]
    final_mse: float
    config: TrainConfig
    target_kind: str
    domain: tuple[tuple[float, float], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target_kind,
            "domain": [list(b) for b in self.domain],
            "config": self.config.to_dict(),
            "final_mse": self.final_mse,
            "mse_history": list(self.mse_history),
            "params": self.params.to_dict(),
        }


def default_config(kind: str, K: int | None = None, **overrides: Any) -> TrainConfig:
    """Hyperparameters that reach the acceptance MSE for each built-in kind."""
    K = DEFAULT_K.get(kind, 8) if K is None else K
    base: dict[str, Any] = dict(K=K)
    base.update(KIND_OVERRIDES.get(kind, {}))
    base.update(overrides)
    return TrainConfig(**base)


KIND_OVERRIDES: dict[str, dict[str, Any]] = {
    "sigmoid": {"epochs": 200},
    "swish": {"epochs": 600},
    "mult": {"epochs": 150},
}


def sample_dataset(
    target: TargetFunction, n: int, seed: int | np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` uniform points from the domain; returns ``(inputs, values)``.

    ``inputs`` has shape ``(n, arity)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    lo = np.array([b[0] for b in target.domain])
    hi = np.array([b[1] for b in target.domain])
    inputs = rng.uniform(lo, hi, size=(n, target.arity))
    values = target(*inputs.T)
    return inputs, np.asarray(values, dtype=np.float64)


def pseudo_derivative(v: Any, gamma: float) -> Any:
    """Triangle of unit area centred at 0 with half-width ``gamma``."""
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    return np.maximum(0.0, 1.0 - np.abs(v) / gamma) / gamma


def batch_forward_backward(
    params: AmosUnitParams,
    x: np.ndarray,
    x2: np.ndarray | None,
    target: np.ndarray,
    gamma: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean squared error over a batch and its surrogate gradient."""
    K = params.K
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    B = x.shape[0]
    z = np.zeros((B, K))
    v = np.zeros((B, K))
    for i in range(K):
        drive = params.c[i] * x
        if x2 is not None:
            drive = drive + params.c2[i] * x2
        v[:, i] = drive - z[:, :i] @ params.h[i, :i] - params.T[i]
        z[:, i] = v[:, i] >= 0
    y = z @ params.d
    err = y - target
    loss = float(np.mean(err**2))

    g_y = 2.0 * err / B
    gz = g_y[:, None] * params.d[None, :]
    gv = np.zeros((B, K))
    slope = pseudo_derivative(v, gamma)
    for i in range(K - 1, -1, -1):
        gv[:, i] = gz[:, i] * slope[:, i]
        if i:
            gz[:, :i] -= gv[:, i : i + 1] * params.h[i, :i][None, :]
    grads = {
        "c": gv.T @ x,
        "d": z.T @ g_y,
        "T": -gv.sum(axis=0),
        "h": np.tril(-(gv.T @ z), k=-1),
    }
    if x2 is not None:
        grads["c2"] = gv.T @ x2
    return loss, grads


def unit_forward_backward(
    params: AmosUnitParams,
    x: float,
    x2: float | None,
    target: float,
    gamma: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Squared error ``(y - target)**2`` of one sample and its surrogate gradient."""
    if not (math.isfinite(x) and (x2 is None or math.isfinite(x2))):
        raise ValueError("inputs must be finite")
    return batch_forward_backward(
        params,
        np.array([x]),
        None if x2 is None else np.array([x2]),
        np.array([target]),
        gamma,
    )


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: AmosUnitParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            s = self.v.setdefault(name, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            s *= self.beta2
            s += (1.0 - self.beta2) * g * g
            update = self.lr * (m / b1t) / (np.sqrt(s / b2t) + self.eps)
            setattr(params, name, getattr(params, name) - update)
        params.h = np.tril(params.h, k=-1)


def _grid(target: TargetFunction, points: int) -> tuple[np.ndarray, ...]:
    axes = [np.linspace(lo, hi, points) for lo, hi in target.domain]
    if target.arity == 1:
        return (axes[0],)
    gx, gy = np.meshgrid(axes[0], axes[1], indexing="ij")
    return gx.ravel(), gy.ravel()


def eval_mse(params: AmosUnitParams, target: TargetFunction, grid_points_per_axis: int) -> float:
    """Mean squared error of the unit against the target on an even grid."""
    if grid_points_per_axis < 2:
        raise ValueError("need at least 2 grid points per axis")
    if params.arity != target.arity:
        raise ValueError("unit and target arity differ")
    pts = _grid(target, grid_points_per_axis)
    y, _ = evaluate_batch(params, *pts)
    ref = target(*pts)
    return float(np.mean((y - ref) ** 2))


def _default_grid(arity: int) -> int:
    return 1001 if arity == 1 else 101


def _init_spread(target: TargetFunction, K: int, rng: np.random.Generator) -> AmosUnitParams:
    c = rng.uniform(0.5, 1.5, size=K)
    c2 = rng.uniform(0.5, 1.5, size=K) if target.arity == 2 else None
    frac = (np.arange(K) + 1.0) / (K + 1.0)
    (lo, hi) = target.domain[0]
    if c2 is None:
        T = c * (lo + frac * (hi - lo))
    else:
        (lo2, hi2) = target.domain[1]
        vmin = c * lo + c2 * lo2
        vmax = c * hi + c2 * hi2
        T = vmin + frac * (vmax - vmin)
    ref = target(*_grid(target, 101 if target.arity == 1 else 21))
    r = float(np.max(ref) - np.min(ref)) / K
    d = rng.uniform(-r, r, size=K)
    return AmosUnitParams(
        arity=target.arity, K=K, c=c, c2=c2, d=d, h=np.zeros((K, K)), T=T, kind=target.kind
    )


INIT_SCHEMES: dict[str, Callable[[TargetFunction, int, np.random.Generator], AmosUnitParams]] = {
    "spread": _init_spread,
}


def train_unit(target: TargetFunction, cfg: TrainConfig) -> TrainReport:
    """Fit an AMOS unit to ``target`` by minibatch Adam on fresh samples each epoch."""
    rng = np.random.default_rng(cfg.rng_seed)
    params = INIT_SCHEMES[cfg.init_scheme](target, cfg.K, rng)
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    anneal_epoch = int(math.floor(cfg.anneal_at * cfg.epochs))
    history: list[float] = []
    for epoch in range(cfg.epochs):
        gamma = cfg.gamma * (cfg.anneal_factor if epoch >= anneal_epoch else 1.0)
        inputs, values = sample_dataset(target, cfg.sample_count, rng)
        order = rng.permutation(cfg.sample_count)
        total = 0.0
        for start in range(0, cfg.sample_count, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x2 = inputs[idx, 1] if target.arity == 2 else None
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = batch_forward_backward(params, inputs[idx, 0], x2, values[idx], gamma)
            if not math.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            opt.step(params, grads)
            total += loss * len(idx)
        mse = total / cfg.sample_count
        if not all(np.all(np.isfinite(getattr(params, n))) for n in ("c", "d", "h", "T")):
            raise TrainingDiverged(epoch, math.nan)
        history.append(mse)
        if epoch % 50 == 0:
            log.debug("epoch %d mse %.6f gamma %.3g", epoch, mse, gamma)
    params.domain = target.domain
    grid = cfg.eval_grid or _default_grid(target.arity)
    final = eval_mse(params, target, grid)
    if not math.isfinite(final):
        raise TrainingDiverged(cfg.epochs, final)
    return TrainReport(
        params=params,
        mse_history=history,
        final_mse=final,
        config=cfg,
        target_kind=target.kind,
        domain=target.domain,
    )
