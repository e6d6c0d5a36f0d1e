"""Layered ANN description used as the conversion source and as the reference model.

A graph is an ordered tuple of nodes; each node names its predecessors by id and
every predecessor must appear earlier in the tuple, which rules out cycles.
Node outputs are flat vectors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from amos.core import reference_activation

GRAPH_ACTIVATIONS = ("relu", "sigmoid", "swish", "identity")


class GraphError(ValueError):
    """Invalid graph structure or a JSON document that violates the schema."""

    def __init__(self, message: str, node_index: int | None = None, field: str | None = None):
        where = []
        if node_index is not None:
            where.append(f"node {node_index}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.node_index = node_index
        self.field = field


def _matrix(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    return arr


def _vector(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected a vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Input:
    id: str
    dim: int
    kind = "input"

    @property
    def inputs(self) -> tuple[str, ...]:
        return ()


@dataclass(frozen=True, eq=False)
class Dense:
    id: str
    input: str
    W: np.ndarray
    b: np.ndarray

    kind = "dense"

    def __post_init__(self) -> None:
        object.__setattr__(self, "W", _matrix(self.W))
        object.__setattr__(self, "b", _vector(self.b))

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.input,)


@dataclass(frozen=True, eq=False)
class Activation:
    id: str
    input: str
    activation: str
    kind = "activation"

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.input,)


@dataclass(frozen=True, eq=False)
class Add:
    id: str
    a: str
    b: str
    kind = "add"

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.a, self.b)


@dataclass(frozen=True, eq=False)
class Multiply:
    id: str
    a: str
    b: str
    kind = "multiply"

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.a, self.b)


@dataclass(frozen=True, eq=False)
class GlobalAvgPool:
    """Average over positions; element ``i`` of the input belongs to channel ``i % channels``."""

    id: str
    input: str
    channels: int
    kind = "global_avg_pool"

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.input,)


@dataclass(frozen=True, eq=False)
class SeBlock:
    """Squeeze-and-excitation gate: ``trunk * tile(expand(sigmoid(reduce(pool(trunk)))))``."""

    id: str
    input: str
    channels: int
    reduce_W: np.ndarray
    reduce_b: np.ndarray
    expand_W: np.ndarray
    expand_b: np.ndarray
    kind = "se_block"

    def __post_init__(self) -> None:
        for name in ("reduce_W", "expand_W"):
            object.__setattr__(self, name, _matrix(getattr(self, name)))
        for name in ("reduce_b", "expand_b"):
            object.__setattr__(self, name, _vector(getattr(self, name)))

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.input,)


@dataclass(frozen=True, eq=False)
class Output:
    id: str
    input: str
    kind = "output"

    @property
    def inputs(self) -> tuple[str, ...]:
        return (self.input,)


Node = Input | Dense | Activation | Add | Multiply | GlobalAvgPool | SeBlock | Output


def pool_matrix(dim: int, channels: int) -> np.ndarray:
    positions = dim // channels
    P = np.zeros((channels, dim))
    for i in range(dim):
        P[i % channels, i] = 1.0 / positions
    return P


def _out_dim(node: Node, dims: dict[str, int], index: int) -> int:
    if isinstance(node, Input):
        if int(node.dim) < 1:
            raise GraphError("input dim must be >= 1", index, "dim")
        return int(node.dim)
    ins = [dims[i] for i in node.inputs]
    if isinstance(node, Dense):
        rows, cols = node.W.shape
        if cols != ins[0]:
            raise GraphError(f"W has {cols} columns but input has dim {ins[0]}", index, "W")
        if node.b.shape[0] != rows:
            raise GraphError(f"b has length {node.b.shape[0]}, expected {rows}", index, "b")
        return rows
    if isinstance(node, Activation):
        if node.activation not in GRAPH_ACTIVATIONS:
            raise GraphError(f"unknown activation {node.activation!r}", index, "activation")
        return ins[0]
    if isinstance(node, (Add, Multiply)):
        if ins[0] != ins[1]:
            raise GraphError(f"operand dims differ ({ins[0]} vs {ins[1]})", index, "inputs")
        return ins[0]
    if isinstance(node, GlobalAvgPool):
        if node.channels < 1 or ins[0] % node.channels:
            raise GraphError(f"input dim {ins[0]} not a multiple of channels", index, "channels")
        return node.channels
    if isinstance(node, SeBlock):
        C = node.channels
        if C < 1 or ins[0] % C:
            raise GraphError(f"input dim {ins[0]} not a multiple of channels", index, "channels")
        r, c = node.reduce_W.shape
        if c != C or node.reduce_b.shape[0] != r:
            raise GraphError("reduce weights do not match channels", index, "reduce_W")
        if node.expand_W.shape != (C, r) or node.expand_b.shape[0] != C:
            raise GraphError("expand weights do not match reduce/channels", index, "expand_W")
        return ins[0]
    if isinstance(node, Output):
        return ins[0]
    raise GraphError(f"unsupported node type {type(node).__name__}", index)


@dataclass(frozen=True, eq=False)
class AnnGraph:
    nodes: tuple[Node, ...]
    output_id: str
    dims: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        dims: dict[str, int] = {}
        n_inputs = 0
        for index, node in enumerate(nodes):
            if node.id in dims:
                raise GraphError(f"duplicate node id {node.id!r}", index, "id")
            for ref in node.inputs:
                if ref not in dims:
                    raise GraphError(
                        f"predecessor {ref!r} is not an earlier node (cycle or dangling reference)",
                        index,
                        "inputs",
                    )
            if isinstance(node, Input):
                n_inputs += 1
            dims[node.id] = _out_dim(node, dims, index)
        if n_inputs != 1:
            raise GraphError(f"graph needs exactly one input node, found {n_inputs}")
        if self.output_id not in dims:
            raise GraphError(f"output id {self.output_id!r} not found", field="output_id")
        object.__setattr__(self, "dims", dims)

    @property
    def input_node(self) -> Input:
        return next(n for n in self.nodes if isinstance(n, Input))

    @property
    def input_dim(self) -> int:
        return self.input_node.dim

    @property
    def output_dim(self) -> int:
        return self.dims[self.output_id]

    def node(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for ref in n.inputs:
                out[ref].append(n.id)
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnGraph):
            return NotImplemented
        return graph_to_dict(self) == graph_to_dict(other)


GateFn = Callable[..., np.ndarray]


def ann_forward(g: AnnGraph, x: Any, gate_fn: GateFn | None = None) -> np.ndarray:
    """Evaluate the graph on one input vector or a batch of shape ``(n, input_dim)``.

    ``gate_fn(kind, *operands)`` replaces the nonlinear gates (relu, sigmoid,
    swish, mult); by default the exact activation functions are used.
    """
    gate = gate_fn or reference_activation
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.shape[1] != g.input_dim:
        raise ValueError(f"input has dim {batch.shape[1]}, graph expects {g.input_dim}")
    values: dict[str, np.ndarray] = {}
    for node in g.nodes:
        if isinstance(node, Input):
            out = batch
        elif isinstance(node, Dense):
            out = values[node.input] @ node.W.T + node.b
        elif isinstance(node, Activation):
            v = values[node.input]
            out = v if node.activation == "identity" else gate(node.activation, v)
        elif isinstance(node, Add):
            out = values[node.a] + values[node.b]
        elif isinstance(node, Multiply):
            out = gate("mult", values[node.a], values[node.b])
        elif isinstance(node, GlobalAvgPool):
            out = values[node.input] @ pool_matrix(g.dims[node.input], node.channels).T
        elif isinstance(node, SeBlock):
            trunk = values[node.input]
            pooled = trunk @ pool_matrix(trunk.shape[1], node.channels).T
            s = gate("sigmoid", pooled @ node.reduce_W.T + node.reduce_b)
            e = s @ node.expand_W.T + node.expand_b
            out = gate("mult", trunk, np.tile(e, (1, trunk.shape[1] // node.channels)))
        else:
            out = values[node.input]
        values[node.id] = out
    result = values[g.output_id]
    return result[0] if single else result


def expand_se_blocks(g: AnnGraph) -> AnnGraph:
    """Replace every SE macro node by pool, reduce, sigmoid, expand and multiply nodes.

    The expand layer's rows are tiled over positions so the gate has the trunk's
    dimension; the final multiply keeps the macro's id.
    """
    nodes: list[Node] = []
    for node in g.nodes:
        if not isinstance(node, SeBlock):
            nodes.append(node)
            continue
        positions = g.dims[node.input] // node.channels
        base = node.id
        nodes.extend(
            [
                GlobalAvgPool(f"{base}/pool", node.input, node.channels),
                Dense(f"{base}/reduce", f"{base}/pool", node.reduce_W, node.reduce_b),
                Activation(f"{base}/sigmoid", f"{base}/reduce", "sigmoid"),
                Dense(
                    f"{base}/expand",
                    f"{base}/sigmoid",
                    np.tile(node.expand_W, (positions, 1)),
                    np.tile(node.expand_b, positions),
                ),
                Multiply(base, node.input, f"{base}/expand"),
            ]
        )
    return AnnGraph(tuple(nodes), g.output_id)


def collapse_linear(g: AnnGraph) -> AnnGraph:
    """Merge chains ``Dense -> [identity ...] -> Dense`` into one Dense layer.

    A chain is merged only when the first Dense and every identity activation in
    between have no other consumer.
    """
    nodes = list(g.nodes)
    while True:
        by_id = {n.id: n for n in nodes}
        consumers: dict[str, list[str]] = {n.id: [] for n in nodes}
        for n in nodes:
            for ref in n.inputs:
                consumers[ref].append(n.id)
        merged = False
        for idx, node in enumerate(nodes):
            if not isinstance(node, Dense):
                continue
            chain: list[str] = []
            cur = by_id[node.input]
            while isinstance(cur, Activation) and cur.activation == "identity":
                if len(consumers[cur.id]) != 1 or cur.id == g.output_id:
                    break
                chain.append(cur.id)
                cur = by_id[cur.input]
            if not isinstance(cur, Dense) or len(consumers[cur.id]) != 1 or cur.id == g.output_id:
                continue
            fused = Dense(node.id, cur.input, node.W @ cur.W, node.W @ cur.b + node.b)
            dropped = set(chain) | {cur.id}
            nodes = [fused if n.id == node.id else n for n in nodes if n.id not in dropped]
            merged = True
            break
        if not merged:
            return AnnGraph(tuple(nodes), g.output_id)


# -- JSON ---------------------------------------------------------------------

_PARAM_FIELDS = {
    "input": ("dim",),
    "dense": ("W", "b"),
    "activation": ("activation",),
    "add": (),
    "multiply": (),
    "global_avg_pool": ("channels",),
    "se_block": ("channels", "reduce_W", "reduce_b", "expand_W", "expand_b"),
    "output": (),
}
_ARITY = {
    "input": 0,
    "dense": 1,
    "activation": 1,
    "add": 2,
    "multiply": 2,
    "global_avg_pool": 1,
    "se_block": 1,
    "output": 1,
}


def _jsonable(value: Any) -> Any:
    return value.tolist() if isinstance(value, np.ndarray) else value


def node_to_dict(node: Node) -> dict[str, Any]:
    out: dict[str, Any] = {"id": node.id, "kind": node.kind, "inputs": list(node.inputs)}
    for name in _PARAM_FIELDS[node.kind]:
        out[name] = _jsonable(getattr(node, name))
    return out


def graph_to_dict(g: AnnGraph) -> dict[str, Any]:
    return {
        "input_dim": g.input_dim,
        "output_id": g.output_id,
        "nodes": [node_to_dict(n) for n in g.nodes],
    }


def _node_from_dict(data: Any, index: int) -> Node:
    if not isinstance(data, dict):
        raise GraphError("node must be a JSON object", index)
    for name in ("id", "kind", "inputs"):
        if name not in data:
            raise GraphError("missing required field", index, name)
    kind = data["kind"]
    if kind not in _PARAM_FIELDS:
        raise GraphError(f"unknown node kind {kind!r}", index, "kind")
    if not isinstance(data["id"], str):
        raise GraphError("id must be a string", index, "id")
    inputs = data["inputs"]
    if not isinstance(inputs, list) or len(inputs) != _ARITY[kind]:
        raise GraphError(f"{kind} takes {_ARITY[kind]} input(s)", index, "inputs")
    params = {}
    for name in _PARAM_FIELDS[kind]:
        if name not in data:
            raise GraphError("missing required field", index, name)
        params[name] = data[name]
    nid = data["id"]
    try:
        if kind == "input":
            return Input(nid, int(params["dim"]))
        if kind == "dense":
            return Dense(nid, inputs[0], params["W"], params["b"])
        if kind == "activation":
            return Activation(nid, inputs[0], params["activation"])
        if kind == "add":
            return Add(nid, inputs[0], inputs[1])
        if kind == "multiply":
            return Multiply(nid, inputs[0], inputs[1])
        if kind == "global_avg_pool":
            return GlobalAvgPool(nid, inputs[0], int(params["channels"]))
        if kind == "se_block":
            return SeBlock(
                nid,
                inputs[0],
                int(params["channels"]),
                params["reduce_W"],
                params["reduce_b"],
                params["expand_W"],
                params["expand_b"],
            )
        return Output(nid, inputs[0])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, GraphError):
            raise
        raise GraphError(str(exc), index) from None


def graph_from_dict(data: Any) -> AnnGraph:
    if not isinstance(data, dict):
        raise GraphError("graph document must be a JSON object")
    for name in ("nodes", "output_id"):
        if name not in data:
            raise GraphError("missing required field", field=name)
    if not isinstance(data["nodes"], list):
        raise GraphError("nodes must be a list", field="nodes")
    nodes = tuple(_node_from_dict(d, i) for i, d in enumerate(data["nodes"]))
    g = AnnGraph(nodes, data["output_id"])
    if "input_dim" in data and data["input_dim"] != g.input_dim:
        raise GraphError(
            f"input_dim {data['input_dim']} disagrees with input node dim {g.input_dim}",
            field="input_dim",
        )
    return g


def save_graph(g: AnnGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g), indent=1) + "\n")


def load_graph(path: str | Path) -> AnnGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphError(f"malformed JSON: {exc}") from None
    return graph_from_dict(data)


# -- construction helpers ---------------------------------------------------------


def mlp(
    weights: Iterable[tuple[np.ndarray, np.ndarray]],
    activation: str = "relu",
    final_activation: str | None = None,
) -> AnnGraph:
    """Chain of Dense layers with ``activation`` between them."""
    layers = list(weights)
    nodes: list[Node] = [Input("x", np.asarray(layers[0][0]).shape[1])]
    prev = "x"
    for i, (W, b) in enumerate(layers):
        nodes.append(Dense(f"dense{i}", prev, W, b))
        prev = f"dense{i}"
        act = activation if i < len(layers) - 1 else final_activation
        if act is not None:
            nodes.append(Activation(f"act{i}", prev, act))
            prev = f"act{i}"
    nodes.append(Output("out", prev))
    return AnnGraph(tuple(nodes), "out")

