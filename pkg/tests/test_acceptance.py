"""Acceptance suite: one PASS/FAIL line per criterion, listed at the end of the run."""

import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES, close_rel, random_graph, small_library, structural_latency
from test_train import fd_gradients, random_instance

from amos.compile import UnitLibrary, amos_forward, compile_graph, compile_unit
from amos.core import build_relu_unit, evaluate_batch, evaluate_unit, parameter_count
from amos.graph import ann_forward, mlp
from amos.sim import Simulator, run_stream
from amos.train import default_config, default_target, train_unit, unit_forward_backward

N_GRAPHS = 20


def record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def graphs():
    """Random toy graphs shared by the structural criteria, each with its own library."""
    rng = np.random.default_rng(2025)
    out = []
    for i in range(N_GRAPHS):
        lib = small_library(seed=i)
        out.append((random_graph(rng), lib))
    return out


def test_parameter_counts():
    table = {(1, 8): 52, (1, 10): 75, (1, 12): 102, (2, 40): 940}
    got = {key: parameter_count(*key) for key in table}
    record(1, "parameter counts", got == table, ", ".join(f"{a},{k}->{n}" for (a, k), n in got.items()))


def test_relu_error_bound():
    start = time.perf_counter()
    worst = 0.0
    ok = True
    for K in (4, 8, 10, 12):
        for alpha in (1.0, 8.0, float(2**K)):
            x = np.linspace(-alpha, alpha, 10_001)
            y, _ = evaluate_batch(build_relu_unit(K, alpha), x)
            gap = np.maximum(x, 0) - y
            bound = alpha * 2.0**-K
            ok &= bool(np.all(gap >= 0) and np.all(gap <= bound))
            worst = max(worst, float(gap.max() / bound))
    elapsed = time.perf_counter() - start
    record(2, "relu error bound", ok and elapsed < 1.0, f"max gap / bound = {worst:.4f}, {elapsed:.2f}s")


@pytest.mark.slow
def test_mult_unit_mse():
    start = time.perf_counter()
    report = train_unit(default_target("mult"), default_config("mult", 40))
    elapsed = time.perf_counter() - start
    ok = report.final_mse <= 5e-2 and report.params.n_params == 940 and elapsed <= 600
    record(3, "mult K=40 grid mse <= 5e-2", ok, f"mse {report.final_mse:.4g}, {elapsed:.0f}s")


@pytest.mark.slow
@pytest.mark.parametrize("kind,K", [("sigmoid", 8), ("swish", 12)])
def test_sigmoid_swish_mse(kind, K):
    start = time.perf_counter()
    report = train_unit(default_target(kind), default_config(kind, K))
    elapsed = time.perf_counter() - start
    ok = report.final_mse <= 1e-2 and elapsed <= 300
    record(4, f"{kind} K={K} grid mse <= 1e-2", ok, f"mse {report.final_mse:.4g}, {elapsed:.0f}s")


def test_latency_law(graphs):
    ok = True
    # a lone unit answers exactly K + 1 steps after its input
    for kind, params in small_library().items():
        fanin2 = [(1, 1.0)] if params.arity == 2 else None
        net = compile_unit(params, [(0, 1.0)], fanin2, input_dim=2)
        X = np.random.default_rng(0).uniform(-1, 1, size=(3, 2))
        r = run_stream(net, X)
        args = [(a, b) if params.arity == 2 else (a,) for a, b in X]
        ok &= net.latency == params.K + 1 and r.first_output_step == params.K + 1
        ok &= bool(np.all(r.outputs[:, 0] == [evaluate_unit(params, *a).y for a in args]))
    for g, lib in graphs:
        net, report = compile_graph(g, lib)
        ok &= all(layer["latency"] == layer["K"] + 1 for layer in report.layers)
        ok &= net.latency == structural_latency(g, lib)
    record(5, "latency law", ok, f"{len(graphs)} random graphs plus one unit per kind")


def test_pipelining(graphs):
    ok = True
    rng = np.random.default_rng(6)
    for g, lib in graphs:
        net, _ = compile_graph(g, lib)
        sim = Simulator(net)
        X = rng.normal(size=(100, g.input_dim)) * 1.5
        p = run_stream(sim, X, mode="pipelined")
        s = run_stream(sim, X, mode="single")
        ok &= p.steps == net.latency + 99
        ok &= bool(np.array_equal(p.outputs, s.outputs))
        ok &= bool(np.array_equal(p.spikes_per_inference, s.spikes_per_inference))
    record(6, "pipelining N=100", ok, f"{len(graphs)} graphs, steps = L + 99, bit-exact vs single")


def test_amos_property(graphs):
    # run_stream already raises on any neuron firing twice for one presentation;
    # here the per-presentation spike count must also equal the count the
    # sequential unit semantics produce for the same unit inputs
    ok = True
    rng = np.random.default_rng(7)
    checked = 0
    for g, lib in graphs:
        net, _ = compile_graph(g, lib)
        X = rng.normal(size=(40, g.input_dim)) * 1.5
        counts = np.zeros(X.shape[0], dtype=np.int64)

        def gate(kind, *ops):
            params = lib[kind]
            flat = [np.asarray(op, dtype=np.float64).ravel() for op in ops]
            y, z = evaluate_batch(params, *flat)
            counts[:] += z.reshape(ops[0].shape[0], -1).sum(axis=1).astype(np.int64)
            return y.reshape(ops[0].shape)

        ann_forward(g, X, gate_fn=gate)
        r = run_stream(net, X, record_raster=True)
        ok &= bool(np.array_equal(r.spikes_per_inference, counts))
        ok &= int(r.spikes_per_inference.max(initial=0)) <= net.neuron_count
        sim = Simulator(net)
        pres = [(g_, t - sim.gate_stage[g_]) for t, g_ in r.raster]
        ok &= len(pres) == len(set(pres))
        checked += len(pres)
    record(7, "at most one spike per neuron per presentation", ok, f"{checked} spikes checked")


@pytest.fixture(scope="module")
def digits_model():
    from sklearn.datasets import load_digits
    from sklearn.model_selection import train_test_split
    from sklearn.neural_network import MLPClassifier

    X, y = load_digits(return_X_y=True)
    X = X / 16.0
    X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=0.25, random_state=0, stratify=y)
    clf = MLPClassifier(hidden_layer_sizes=(64, 32), activation="relu", max_iter=600, random_state=0)
    clf.fit(X_tr, y_tr)
    g = mlp(list(zip([W.T for W in clf.coefs_], clf.intercepts_)))
    # largest hidden pre-activation on the training data sets the relu input range
    h, alpha = X_tr, 0.0
    for W, b in zip(clf.coefs_[:-1], clf.intercepts_[:-1]):
        pre = h @ W + b
        alpha = max(alpha, float(pre.max()))
        h = np.maximum(pre, 0)
    return clf, g, alpha, X_te, y_te


@pytest.mark.slow
def test_digits_equivalence(digits_model):
    start = time.perf_counter()
    clf, g, alpha, X_te, y_te = digits_model
    accuracy = clf.score(X_te, y_te)
    ann_pred = np.argmax(ann_forward(g, X_te), axis=1)
    agreement = {}
    for K in range(12, 5, -1):
        net, _ = compile_graph(g, UnitLibrary({"relu": build_relu_unit(K, alpha)}))
        snn = run_stream(net, X_te).outputs
        agreement[K] = float(np.mean(np.argmax(snn, axis=1) == ann_pred))
    elapsed = time.perf_counter() - start
    trend = [agreement[K] for K in range(12, 5, -1)]
    monotone = all(a >= b for a, b in zip(trend, trend[1:]))
    checks = {
        "accuracy>=0.9": accuracy >= 0.9,
        "K12>=0.99": agreement[12] >= 0.99,
        "monotone": monotone,
        "K6<K12": agreement[6] < agreement[12],
        "time<=120s": elapsed <= 120,
    }
    ok = all(checks.values())
    failed = [name for name, passed in checks.items() if not passed]
    detail = (
        f"ANN accuracy {accuracy:.3f}, alpha {alpha:.2f}, agreement K=12..6: "
        + " ".join(f"{a:.3f}" for a in trend)
        + f", {len(y_te)} test digits, {elapsed:.0f}s"
        + (f"; failed: {', '.join(failed)}" if failed else "")
    )
    record(8, "digits ANN/SNN argmax agreement", ok, detail)


def test_gradient_finite_differences():
    start = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    ok = True
    for n in range(100):
        K = int(rng.integers(1, 6))
        arity = 1 + n % 2
        unit = random_instance(rng, K, arity)
        x = float(rng.normal())
        x2 = float(rng.normal()) if arity == 2 else None
        t = float(rng.normal())
        gamma = float(rng.uniform(0.5, 2.0))
        _, analytic = unit_forward_backward(unit, x, x2, t, gamma)
        for name, num in fd_gradients(unit, x, x2, t, gamma).items():
            a = analytic[name]
            err = np.abs(a - num) / np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-4)
            worst = max(worst, float(err.max(initial=0)))
            ok &= bool(np.all(np.abs(a - num) <= 1e-5 * np.maximum(np.abs(a), np.abs(num)) + 1e-9))
    elapsed = time.perf_counter() - start
    record(9, "surrogate gradients vs finite differences", ok and elapsed < 10, f"worst rel err {worst:.2e}, {elapsed:.1f}s")


def test_simulator_reference_agreement(graphs):
    ok = True
    rng = np.random.default_rng(10)
    worst = 0.0
    for g, lib in graphs:
        net, _ = compile_graph(g, lib)
        X = rng.normal(size=(1000, g.input_dim)) * 1.5
        sim = run_stream(net, X).outputs
        ref = amos_forward(g, lib, X)
        ok &= bool(close_rel(sim, ref))
        worst = max(worst, float(np.max(np.abs(sim - ref) / np.maximum(1.0, np.abs(ref)))))
    record(10, "simulator vs composed unit reference", ok, f"{len(graphs)} graphs x 1000 inputs, worst rel dev {worst:.1e}")
