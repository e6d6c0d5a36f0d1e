"""Lowering of an ANN graph to a clocked network of threshold gates.

Every nonlinear gate of the graph (relu, sigmoid, swish, and elementwise
multiply) becomes an AMOS unit; all linear nodes are folded into *sums*,
non-spiking weighted sums that collect unit outputs and analog inputs.

Timing, for a unit whose input sum is formed at step ``tau``::

    sum -> gate i          weight c_i (and c2_i), delay i
    gate j -> gate i       weight -h_ij,          delay i - j
    gate i -> next sum     weight w * d_i,        delay K - i + 1 (+ padding)

so gate ``i`` evaluates at ``tau + i`` and all contributions reach the next sum
at ``tau + K + 1``.  Paths that merge are padded to equal delay, which lets the
network accept a new input every step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from amos.core import UNIT_ARITY, AmosUnitParams, evaluate_unit
from amos.graph import (
    Activation,
    Add,
    AnnGraph,
    Dense,
    GlobalAvgPool,
    Input,
    Multiply,
    Output,
    ann_forward,
    expand_se_blocks,
    pool_matrix,
)

SOURCE_KINDS = ("input", "gate", "sum")
_PREFIX = {"input": "x", "gate": "g", "sum": "s"}
_FROM_PREFIX = {v: k for k, v in _PREFIX.items()}


class CompileError(ValueError):
    pass


@dataclass(frozen=True)
class Synapse:
    kind: str
    src: int
    w: float
    delay: int

    def to_dict(self) -> dict[str, Any]:
        return {"src": f"{_PREFIX[self.kind]}{self.src}", "w": self.w, "delay": self.delay}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Synapse:
        ref = data["src"]
        return cls(_FROM_PREFIX[ref[0]], int(ref[1:]), float(data["w"]), int(data["delay"]))


@dataclass
class Gate:
    threshold: float
    synapses: list[Synapse]
    stage: int | None = None
    unit: int | None = None


@dataclass
class Sum:
    """Non-spiking weighted sum; its value is available in the step it is formed."""

    synapses: list[Synapse]
    bias: float = 0.0
    stage: int | None = None


@dataclass(frozen=True)
class UnitInstance:
    kind: str
    node: str
    component: int
    gates: tuple[int, ...]
    inputs: tuple[int, ...]
    stage: int


@dataclass
class SpikingNetwork:
    """Feedforward network of threshold gates and sums with integer delays.

    ``readout`` lists the sums that form the network output; they are read
    ``latency`` steps after an input is presented.  ``library`` holds the unit
    parameters shared by every instance of a kind.
    """

    input_dim: int
    gates: list[Gate]
    sums: list[Sum]
    readout: list[int]
    latency: int
    units: list[UnitInstance] = field(default_factory=list)
    library: dict[str, AmosUnitParams] = field(default_factory=dict)

    def __post_init__(self) -> None:
        validate_network(self)

    @property
    def neuron_count(self) -> int:
        return len(self.gates)

    @property
    def synapse_count(self) -> int:
        return sum(len(g.synapses) for g in self.gates) + sum(len(s.synapses) for s in self.sums)

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_taps": self.input_dim,
            "latency": self.latency,
            "readout": list(self.readout),
            "gates": [
                {
                    "id": i,
                    "threshold": g.threshold,
                    "stage": g.stage,
                    "unit": g.unit,
                    "synapses": [s.to_dict() for s in g.synapses],
                }
                for i, g in enumerate(self.gates)
            ],
            "sums": [
                {
                    "id": i,
                    "bias": s.bias,
                    "stage": s.stage,
                    "synapses": [syn.to_dict() for syn in s.synapses],
                }
                for i, s in enumerate(self.sums)
            ],
            "units": [
                {
                    "kind": u.kind,
                    "node": u.node,
                    "component": u.component,
                    "gates": list(u.gates),
                    "inputs": list(u.inputs),
                    "stage": u.stage,
                }
                for u in self.units
            ],
            "library": {k: p.to_dict() for k, p in sorted(self.library.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> SpikingNetwork:
        try:
            gates = []
            for i, g in enumerate(data["gates"]):
                if g.get("id", i) != i:
                    raise CompileError(f"gate ids must be consecutive, got {g.get('id')} at {i}")
                gates.append(
                    Gate(
                        float(g["threshold"]),
                        [Synapse.from_dict(s) for s in g["synapses"]],
                        g.get("stage"),
                        g.get("unit"),
                    )
                )
            sums = []
            for i, s in enumerate(data.get("sums", [])):
                if s.get("id", i) != i:
                    raise CompileError(f"sum ids must be consecutive, got {s.get('id')} at {i}")
                sums.append(
                    Sum(
                        [Synapse.from_dict(x) for x in s["synapses"]],
                        float(s.get("bias", 0.0)),
                        s.get("stage"),
                    )
                )
            units = [
                UnitInstance(
                    u["kind"], u["node"], u["component"], tuple(u["gates"]), tuple(u["inputs"]), u["stage"]
                )
                for u in data.get("units", [])
            ]
            library = {k: AmosUnitParams.from_dict(v) for k, v in data.get("library", {}).items()}
            return cls(
                input_dim=int(data["input_taps"]),
                gates=gates,
                sums=sums,
                readout=[int(r) for r in data["readout"]],
                latency=int(data["latency"]),
                units=units,
                library=library,
            )
        except (KeyError, IndexError, TypeError) as exc:
            raise CompileError(f"malformed network document: {exc!r}") from None


def validate_network(net: SpikingNetwork) -> None:
    """Check delay rules, reference ranges and that the network is feedforward."""
    counts = {"input": net.input_dim, "gate": len(net.gates), "sum": len(net.sums)}
    deps: dict[tuple[str, int], set[tuple[str, int]]] = {}
    for kind, items in (("gate", net.gates), ("sum", net.sums)):
        for idx, item in enumerate(items):
            node = (kind, idx)
            deps[node] = set()
            for syn in item.synapses:
                if syn.kind not in counts or not 0 <= syn.src < counts[syn.kind]:
                    raise CompileError(f"{kind} {idx}: bad source {syn.kind}{syn.src}")
                if syn.delay < 0 or int(syn.delay) != syn.delay:
                    raise CompileError(f"{kind} {idx}: delay must be a non-negative integer")
                if kind == "sum" and syn.kind == "sum":
                    raise CompileError(f"sum {idx}: sums cannot feed sums")
                if syn.kind != "input" and syn.delay < 1:
                    raise CompileError(f"{kind} {idx}: internal synapses need delay >= 1")
                if not np.isfinite(syn.w):
                    raise CompileError(f"{kind} {idx}: non-finite weight")
                if syn.kind != "input":
                    deps[node].add((syn.kind, syn.src))
    for r in net.readout:
        if not 0 <= r < len(net.sums):
            raise CompileError(f"readout references missing sum {r}")
    if net.latency < 0:
        raise CompileError("latency must be >= 0")
    try:
        tuple(TopologicalSorter(deps).static_order())
    except CycleError as exc:
        raise CompileError(f"network is not feedforward: {exc.args[1]}") from None


def save_network(net: SpikingNetwork, path: str | Path) -> None:
    Path(path).write_text(json.dumps(net.to_dict(), indent=1) + "\n")


def load_network(path: str | Path) -> SpikingNetwork:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CompileError(f"malformed JSON: {exc}") from None
    return SpikingNetwork.from_dict(data)


# -- unit library -----------------------------------------------------------------


class UnitLibrary(dict):
    """Mapping from gate kind to the unit parameters shared by all its instances."""

    def __init__(self, units: Mapping[str, AmosUnitParams] | None = None):
        super().__init__()
        for kind, params in (units or {}).items():
            self[kind] = params

    def __setitem__(self, kind: str, params: AmosUnitParams) -> None:
        if kind not in UNIT_ARITY:
            raise CompileError(f"unknown unit kind {kind!r}")
        if params.arity != UNIT_ARITY[kind]:
            raise CompileError(f"{kind} unit must have arity {UNIT_ARITY[kind]}, got {params.arity}")
        super().__setitem__(kind, params)

    def require(self, kind: str) -> AmosUnitParams:
        if kind not in self:
            raise CompileError(f"unit library has no {kind!r} unit")
        return self[kind]


# -- compilation ----------------------------------------------------------------------


@dataclass
class ConversionReport:
    gate_count: int
    neuron_count: int
    synapse_count: int
    sum_count: int
    latency: int
    layers: list[dict[str, Any]]
    unit_K: dict[str, int]
    unit_parameters: dict[str, int]
    distinct_delays: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "gate_count": self.gate_count,
            "neuron_count": self.neuron_count,
            "synapse_count": self.synapse_count,
            "sum_count": self.sum_count,
            "latency": self.latency,
            "layers": self.layers,
            "unit_K": dict(sorted(self.unit_K.items())),
            "unit_parameters": dict(sorted(self.unit_parameters.items())),
            "distinct_delays": self.distinct_delays,
        }


@dataclass
class _Signal:
    """Affine map from unit outputs and network inputs to a node's output vector."""

    coef: dict[str, np.ndarray]
    bias: np.ndarray

    def map(self, W: np.ndarray) -> _Signal:
        return _Signal({k: W @ m for k, m in self.coef.items()}, W @ self.bias)

    def __add__(self, other: _Signal) -> _Signal:
        coef = dict(self.coef)
        for k, m in other.coef.items():
            coef[k] = coef[k] + m if k in coef else m
        return _Signal(coef, self.bias + other.bias)


@dataclass
class _Group:
    """Outputs of one graph node's units, or the network input (``params is None``)."""

    ready: int
    params: AmosUnitParams | None = None
    gates: list[list[int]] = field(default_factory=list)


class _Builder:
    def __init__(self, input_dim: int):
        self.input_dim = input_dim
        self.gates: list[Gate] = []
        self.sums: list[Sum] = []
        self.units: list[UnitInstance] = []
        self.groups: dict[str, _Group] = {"input": _Group(ready=0)}

    def add_sum(self, signal: _Signal, row: int, stage: int, bias: float) -> int:
        synapses: list[Synapse] = []
        for key, m in signal.coef.items():
            group = self.groups[key]
            pad = stage - group.ready
            if pad < 0:
                raise CompileError(f"internal: source {key!r} ready after its consumer")
            weights = m[row]
            for col in np.flatnonzero(weights):
                w = float(weights[col])
                if group.params is None:
                    synapses.append(Synapse("input", int(col), w, pad))
                    continue
                K = group.params.K
                for k, gid in enumerate(group.gates[col], start=1):
                    dk = group.params.d[k - 1]
                    if dk != 0.0:
                        synapses.append(Synapse("gate", gid, w * dk, K - k + 1 + pad))
        self.sums.append(Sum(synapses, bias, stage))
        return len(self.sums) - 1

    def add_unit(
        self,
        params: AmosUnitParams,
        in_sums: list[int],
        biases: list[float],
        stage: int,
        node: str,
        component: int,
    ) -> list[int]:
        unit_id = len(self.units)
        first = len(self.gates)
        coeffs = [params.c] + ([params.c2] if params.arity == 2 else [])
        for i in range(params.K):
            synapses = [
                Synapse("sum", s, float(coef[i]), i + 1) for s, coef in zip(in_sums, coeffs)
            ]
            for j in range(i):
                if params.h[i, j] != 0.0:
                    synapses.append(Synapse("gate", first + j, -float(params.h[i, j]), i - j))
            threshold = float(params.T[i])
            for coef, b in zip(coeffs, biases):
                threshold -= float(coef[i]) * b
            self.gates.append(Gate(threshold, synapses, stage + i + 1, unit_id))
        ids = list(range(first, first + params.K))
        self.units.append(UnitInstance(params.kind, node, component, tuple(ids), tuple(in_sums), stage))
        return ids

    def ready_time(self, *signals: _Signal) -> int:
        keys = {k for s in signals for k in s.coef}
        return max((self.groups[k].ready for k in keys), default=0)

    def add_unit_group(self, node: str, params: AmosUnitParams, operands: list[_Signal]) -> _Signal:
        stage = self.ready_time(*operands)
        width = operands[0].bias.shape[0]
        group = _Group(ready=stage + params.K + 1, params=params)
        for j in range(width):
            # unit biases are folded into thresholds, so the input sums carry none
            in_sums = [self.add_sum(op, j, stage, 0.0) for op in operands]
            biases = [float(op.bias[j]) for op in operands]
            group.gates.append(self.add_unit(params, in_sums, biases, stage, node, j))
        self.groups[node] = group
        return _Signal({node: np.eye(width)}, np.zeros(width))


def compile_unit(
    params: AmosUnitParams,
    fanin: Iterable[tuple[int, float]],
    fanin2: Iterable[tuple[int, float]] | None = None,
    input_dim: int | None = None,
    bias: float = 0.0,
    bias2: float = 0.0,
) -> SpikingNetwork:
    """Stand-alone network for one unit fed by weighted network inputs.

    ``fanin`` lists ``(input index, weight)`` pairs forming ``x``; ``fanin2``
    forms ``x'`` for two-input units.  The single readout carries the unit's
    output ``K + 1`` steps after each presentation.
    """
    fanin = list(fanin)
    fanin2 = None if fanin2 is None else list(fanin2)
    if (fanin2 is None) != (params.arity == 1):
        raise CompileError(f"unit of arity {params.arity} needs {params.arity} fan-in list(s)")
    used = [i for i, _ in fanin] + [i for i, _ in (fanin2 or [])]
    dim = input_dim if input_dim is not None else (max(used) + 1 if used else 1)
    b = _Builder(dim)
    operands = []
    for pairs, bb in ((fanin, bias), (fanin2, bias2)):
        if pairs is None:
            continue
        row = np.zeros((1, dim))
        for idx, w in pairs:
            row[0, idx] += w
        operands.append(_Signal({"input": row}, np.array([bb])))
    out = b.add_unit_group("unit", params, operands)
    latency = params.K + 1
    readout = [b.add_sum(out, 0, latency, 0.0)]
    return SpikingNetwork(dim, b.gates, b.sums, readout, latency, b.units, {params.kind: params})


def _live_nodes(g: AnnGraph) -> set[str]:
    live = {g.output_id}
    for node in reversed(g.nodes):
        if node.id in live:
            live.update(node.inputs)
    return live


def compile_graph(g: AnnGraph, lib: Mapping[str, AmosUnitParams]) -> tuple[SpikingNetwork, ConversionReport]:
    """Convert an ANN graph into a pipelined spiking network.

    SE macro nodes are expanded first.  Nodes that do not reach the output are
    dropped.
    """
    lib = lib if isinstance(lib, UnitLibrary) else UnitLibrary(lib)
    g = expand_se_blocks(g)
    live = _live_nodes(g)
    b = _Builder(g.input_dim)
    signals: dict[str, _Signal] = {}
    layers: list[dict[str, Any]] = []
    for node in g.nodes:
        if node.id not in live:
            continue
        if isinstance(node, Input):
            sig = _Signal({"input": np.eye(node.dim)}, np.zeros(node.dim))
        elif isinstance(node, Dense):
            src = signals[node.input]
            sig = src.map(node.W)
            sig.bias = sig.bias + node.b
        elif isinstance(node, GlobalAvgPool):
            sig = signals[node.input].map(pool_matrix(g.dims[node.input], node.channels))
        elif isinstance(node, Add):
            sig = signals[node.a] + signals[node.b]
        elif isinstance(node, Activation) and node.activation == "identity":
            sig = signals[node.input]
        elif isinstance(node, (Activation, Multiply)):
            kind = "mult" if isinstance(node, Multiply) else node.activation
            params = lib.require(kind)
            operands = [signals[r] for r in node.inputs]
            sig = b.add_unit_group(node.id, params, operands)
            group = b.groups[node.id]
            layers.append(
                {
                    "node": node.id,
                    "kind": kind,
                    "K": params.K,
                    "width": g.dims[node.id],
                    "start": group.ready - params.K - 1,
                    "latency": params.K + 1,
                }
            )
        elif isinstance(node, Output):
            sig = signals[node.input]
        else:
            raise CompileError(f"cannot compile node {node.id!r} of type {type(node).__name__}")
        signals[node.id] = sig

    out = signals[g.output_id]
    latency = b.ready_time(out)
    readout = [b.add_sum(out, j, latency, float(out.bias[j])) for j in range(g.output_dim)]
    used = {layer["kind"] for layer in layers}
    library = {k: lib[k] for k in sorted(used)}
    net = SpikingNetwork(g.input_dim, b.gates, b.sums, readout, latency, b.units, library)
    report = ConversionReport(
        gate_count=len(b.units),
        neuron_count=net.neuron_count,
        synapse_count=net.synapse_count,
        sum_count=len(net.sums),
        latency=latency,
        layers=layers,
        unit_K={k: p.K for k, p in library.items()},
        unit_parameters={k: p.n_params for k, p in library.items()},
        distinct_delays=len(distinct_delays(net)),
    )
    return net, report


def distinct_delays(net: SpikingNetwork) -> set[int]:
    out: set[int] = set()
    for item in (*net.gates, *net.sums):
        out.update(s.delay for s in item.synapses)
    return out


def amos_forward(g: AnnGraph, lib: Mapping[str, AmosUnitParams], x: Any) -> np.ndarray:
    """Graph output with every nonlinear gate replaced by its AMOS unit.

    Evaluates units one scalar at a time with ``evaluate_unit``; this is the
    reference a compiled network must reproduce.
    """

    def gate(kind: str, *operands: np.ndarray) -> np.ndarray:
        params = lib[kind]
        flat = [np.asarray(op, dtype=np.float64) for op in operands]
        out = np.empty(flat[0].shape)
        for idx in np.ndindex(out.shape):
            args = [float(op[idx]) for op in flat]
            out[idx] = evaluate_unit(params, *args).y
        return out

    return ann_forward(g, x, gate_fn=gate)


def check_balance(net: SpikingNetwork) -> list[str]:
    """Return violations of the equal-delay rule; empty when every path is balanced.

    Each gate and sum carries the step at which it works on presentation 0;
    every synapse must bridge exactly the gap between source and target stages.
    """
    problems = []
    for kind, items in (("gate", net.gates), ("sum", net.sums)):
        for idx, item in enumerate(items):
            for syn in item.synapses:
                if syn.kind == "input":
                    src_stage = 0
                elif syn.kind == "gate":
                    src_stage = net.gates[syn.src].stage
                else:
                    src_stage = net.sums[syn.src].stage
                if item.stage is None or src_stage is None:
                    problems.append(f"{kind} {idx}: missing stage")
                elif src_stage + syn.delay != item.stage:
                    problems.append(
                        f"{kind} {idx}: {syn.kind}{syn.src} at {src_stage} + delay {syn.delay} != {item.stage}"
                    )
    for r in net.readout:
        if net.sums[r].stage != net.latency:
            problems.append(f"readout sum {r} formed at {net.sums[r].stage}, latency {net.latency}")
    return problems
