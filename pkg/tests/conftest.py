import numpy as np
import pytest

from amos.compile import UnitLibrary
from amos.core import AmosUnitParams, build_relu_unit
from amos.graph import Activation, Add, AnnGraph, Dense, Input, Multiply, Output, SeBlock, expand_se_blocks


def random_unit(rng, K, arity=1, kind="custom"):
    return AmosUnitParams(
        arity=arity,
        K=K,
        c=rng.uniform(0.5, 1.5, size=K),
        c2=rng.uniform(-1.5, 1.5, size=K) if arity == 2 else None,
        d=rng.normal(size=K) * 0.5,
        h=np.tril(rng.normal(size=(K, K)) * 0.3, k=-1),
        T=rng.normal(size=K),
        kind=kind,
    )


def small_library(seed=0, K=None):
    """Library with small units so equivalence tests stay quick."""
    rng = np.random.default_rng(seed)
    K = K or {"relu": 5, "sigmoid": 4, "swish": 6, "mult": 3}
    return UnitLibrary(
        {
            "relu": build_relu_unit(K["relu"], 4.0),
            "sigmoid": random_unit(rng, K["sigmoid"], kind="sigmoid"),
            "swish": random_unit(rng, K["swish"], kind="swish"),
            "mult": random_unit(rng, K["mult"], arity=2, kind="mult"),
        }
    )


def random_graph(rng, kinds=("relu", "sigmoid", "swish"), allow_se=True, allow_residual=True):
    """Small random graph mixing dense layers, residual adds and SE blocks."""
    in_dim = int(rng.integers(1, 5))
    nodes = [Input("x", in_dim)]
    prev, dim = "x", in_dim
    n_layers = int(rng.integers(1, 4))
    for i in range(n_layers):
        width = int(rng.integers(1, 5))
        nodes.append(Dense(f"d{i}", prev, rng.normal(size=(width, dim)), rng.normal(size=width) * 0.5))
        act = str(rng.choice(list(kinds)))
        nodes.append(Activation(f"a{i}", f"d{i}", act))
        prev, dim = f"a{i}", width
        choice = rng.random()
        if allow_residual and choice < 0.3:
            nodes.append(Dense(f"r{i}", prev, rng.normal(size=(dim, dim)), rng.normal(size=dim) * 0.5))
            nodes.append(Activation(f"ra{i}", f"r{i}", str(rng.choice(list(kinds)))))
            nodes.append(Add(f"add{i}", prev, f"ra{i}"))
            prev = f"add{i}"
        elif allow_se and choice < 0.55:
            channels = dim
            reduced = int(rng.integers(1, channels + 1))
            nodes.append(
                SeBlock(
                    f"se{i}",
                    prev,
                    channels,
                    rng.normal(size=(reduced, channels)),
                    rng.normal(size=reduced),
                    rng.normal(size=(channels, reduced)),
                    rng.normal(size=channels),
                )
            )
            prev = f"se{i}"
    out_dim = int(rng.integers(1, 4))
    nodes.append(Dense("head", prev, rng.normal(size=(out_dim, dim)), rng.normal(size=out_dim)))
    nodes.append(Output("out", "head"))
    return AnnGraph(tuple(nodes), "out")


def close_rel(a, b, rtol=1e-9):
    """Relative agreement with a unit floor so outputs near zero are compared absolutely."""
    a = np.asarray(a)
    b = np.asarray(b)
    return np.all(np.abs(a - b) <= rtol * np.maximum(1.0, np.maximum(np.abs(a), np.abs(b))))


@pytest.fixture
def lib():
    return small_library()


def structural_latency(g, lib):
    """Longest path counting K + 1 per nonlinear gate, straight from the graph."""
    g = expand_se_blocks(g)
    depth = {}
    for node in g.nodes:
        base = max((depth[r] for r in node.inputs), default=0)
        if isinstance(node, Multiply):
            base += lib["mult"].K + 1
        elif isinstance(node, Activation) and node.activation != "identity":
            base += lib[node.activation].K + 1
        depth[node.id] = base
    return depth[g.output_id]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
