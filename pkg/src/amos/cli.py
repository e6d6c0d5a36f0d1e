"""Command-line entry point: ``amos <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 bad data or schema, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from amos.compile import (
    CompileError,
    UnitLibrary,
    compile_graph,
    load_network,
    save_network,
)
from amos.core import AmosUnitParams, build_relu_unit, evaluate_batch, load_unit, save_unit
from amos.graph import GraphError, ann_forward, load_graph
from amos.sim import AmosViolation, Simulator, run_stream, save_report, write_raster_csv
from amos.train import (
    DEFAULT_DOMAINS,
    DEFAULT_K,
    TargetFunction,
    TrainingDiverged,
    default_config,
    eval_mse,
    train_unit,
)
from amos.units import default_library

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- file helpers -------------------------------------------------------------------


def _dump(data: Any) -> str:
    return json.dumps(data, indent=1) + "\n"


def _write_json(path: Path, data: dict[str, Any]) -> None:
    text = _dump(data)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    if _dump(json.loads(path.read_text())) != text:
        raise DataError(f"{path} did not survive a re-read")


def _write_unit(path: Path, params: AmosUnitParams) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_unit(params, path)
    if load_unit(path) != params:
        raise DataError(f"{path} did not survive a re-read")


def _write_csv(path: Path, header: Sequence[str], rows: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _seed(args: argparse.Namespace) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("AMOS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"AMOS_SEED must be an integer, got {env!r}") from None


def _parse_domain(text: str) -> tuple[tuple[float, float], ...]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"bad --domain {text!r}; expected lo,hi or lo,hi,lo2,hi2") from None
    if len(values) not in (2, 4):
        raise UsageError(f"bad --domain {text!r}; expected lo,hi or lo,hi,lo2,hi2")
    return tuple(zip(values[::2], values[1::2]))


def load_dataset(path: Path) -> np.ndarray:
    """Rows of inputs from ``.npy`` or headerless ``.csv`` (lines starting with ``#`` skipped)."""
    try:
        if path.suffix == ".npy":
            X = np.load(path, allow_pickle=False)
        else:
            X = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except FileNotFoundError:
        raise
    except ValueError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from None
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise DataError(f"dataset must be a 2-d array, got shape {X.shape}")
    return X


def _unit_domain(params: AmosUnitParams) -> tuple[tuple[float, float], ...]:
    if params.domain is not None:
        return params.domain
    if params.kind in DEFAULT_DOMAINS:
        return DEFAULT_DOMAINS[params.kind]
    raise DataError(f"unit of kind {params.kind!r} has no domain; pass --domain")


def _unit_target(params: AmosUnitParams, domain) -> TargetFunction:
    if params.kind not in DEFAULT_DOMAINS:
        raise DataError(f"no reference function for unit kind {params.kind!r}")
    return TargetFunction(params.kind, domain)


# -- subcommands ----------------------------------------------------------------------


def cmd_train_unit(args: argparse.Namespace) -> int:
    kind = args.kind
    K = args.k if args.k is not None else DEFAULT_K[kind]
    out = Path(args.out or f"{kind}_K{K}.json")
    if args.closed_form:
        if kind != "relu":
            raise UsageError("--closed-form is only available for --kind relu")
        alpha = args.alpha if args.alpha is not None else float(2**K)
        params = build_relu_unit(K, alpha)
        params.domain = ((-alpha, alpha),)
        _write_unit(out, params)
        print(f"wrote {out}: closed-form relu K={K} alpha={alpha:g}, {params.n_params} parameters")
        return EXIT_OK
    if args.alpha is not None:
        raise UsageError("--alpha only applies with --closed-form")

    overrides: dict[str, Any] = {}
    if args.config:
        try:
            overrides.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed config {args.config}: {exc}") from None
    if args.k is not None:
        overrides["K"] = K
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    overrides["rng_seed"] = _seed(args)
    cfg_K = overrides.pop("K", K)
    try:
        cfg = default_config(kind, cfg_K, **overrides)
    except TypeError as exc:
        raise DataError(f"bad config: {exc}") from None

    domain = _parse_domain(args.domain) if args.domain else DEFAULT_DOMAINS[kind]
    target = TargetFunction(kind, domain)
    report = train_unit(target, cfg)
    report.params.kind = kind
    _write_unit(out, report.params)
    stem = out.with_suffix("")
    _write_json(Path(args.report or f"{stem}_report.json"), report.to_dict())
    _write_csv(
        Path(args.history or f"{stem}_mse.csv"),
        ["epoch", "mse"],
        enumerate(report.mse_history),
    )
    print(f"wrote {out}: {kind} K={cfg.K}, {report.params.n_params} parameters, final mse {report.final_mse:.3e}")
    return EXIT_OK


def cmd_build_relu(args: argparse.Namespace) -> int:
    alpha = args.alpha if args.alpha is not None else float(2**args.k)
    params = build_relu_unit(args.k, alpha)
    params.domain = ((-alpha, alpha),)
    out = Path(args.out or f"relu_K{args.k}.json")
    _write_unit(out, params)
    print(f"wrote {out}: relu K={args.k} alpha={alpha:g}, {params.n_params} parameters")
    return EXIT_OK


def cmd_curve(args: argparse.Namespace) -> int:
    params = load_unit(args.params)
    domain = _parse_domain(args.domain) if args.domain else _unit_domain(params)
    if len(domain) != params.arity:
        raise UsageError(f"unit has arity {params.arity} but the domain has {len(domain)} intervals")
    target = _unit_target(params, domain)
    out = Path(args.out)
    if params.arity == 1:
        n = args.points or 1001
        xs = np.linspace(*domain[0], n)
        rows = zip(xs, target(xs), evaluate_batch(params, xs)[0])
        _write_csv(out, ["x", "target", "amos"], rows)
    else:
        n = args.points or 101
        gx = np.linspace(*domain[0], n)
        gy = np.linspace(*domain[1], n)
        X, Y = (a.ravel() for a in np.meshgrid(gx, gy, indexing="ij"))
        err = np.abs(target(X, Y) - evaluate_batch(params, X, Y)[0])
        _write_csv(out, ["x", "y", "abs_error"], zip(X, Y, err))
    print(f"wrote {out}")
    return EXIT_OK


def _library(args: argparse.Namespace) -> UnitLibrary:
    lib = UnitLibrary() if args.no_defaults else default_library(args.relu_k, args.relu_alpha)
    for entry in args.unit or []:
        kind, sep, path = entry.partition("=")
        if not sep or not path:
            raise UsageError(f"--unit expects kind=path, got {entry!r}")
        lib[kind] = load_unit(path)
    return lib


def cmd_convert(args: argparse.Namespace) -> int:
    g = load_graph(args.graph)
    lib = _library(args)
    net, report = compile_graph(g, lib)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_network(net, out)
    if load_network(out).to_dict() != net.to_dict():
        raise DataError(f"{out} did not survive a re-read")
    _write_json(Path(args.report or f"{out.with_suffix('')}_report.json"), report.to_dict())
    print(f"wrote {out}: {report.neuron_count} neurons, latency {report.latency}")
    return EXIT_OK


@dataclass
class EquivalenceReport:
    samples: int
    max_abs_deviation: float
    mean_abs_deviation: float
    agreement: float
    unit_mse: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "samples": self.samples,
            "max_abs_deviation": self.max_abs_deviation,
            "mean_abs_deviation": self.mean_abs_deviation,
            "agreement": self.agreement,
            "unit_mse": dict(sorted(self.unit_mse.items())),
        }


def equivalence_report(g, net, X: np.ndarray) -> EquivalenceReport:
    """Compare the analog graph with the compiled network on the rows of ``X``."""
    ann = ann_forward(g, X).reshape(X.shape[0], -1)
    snn = run_stream(net, X).outputs
    if ann.shape != snn.shape:
        raise DataError(f"graph gives {ann.shape[1]} outputs but the network reads out {snn.shape[1]}")
    dev = np.abs(ann - snn)
    agree = float(np.mean(np.argmax(ann, axis=1) == np.argmax(snn, axis=1)))
    mses = {}
    for kind, params in net.library.items():
        domain = params.domain or DEFAULT_DOMAINS[kind]
        mses[kind] = eval_mse(params, TargetFunction(kind, domain), 1001 if params.arity == 1 else 101)
    return EquivalenceReport(X.shape[0], float(dev.max()), float(dev.mean()), agree, mses)


def cmd_verify(args: argparse.Namespace) -> int:
    g = load_graph(args.graph)
    net = load_network(args.network)
    X = load_dataset(Path(args.data))
    if args.n is not None:
        X = X[: args.n]
    if X.shape[0] == 0:
        raise UsageError("dataset is empty")
    if X.shape[1] != g.input_dim or net.input_dim != g.input_dim:
        raise DataError(
            f"dataset rows have {X.shape[1]} values; graph expects {g.input_dim}, network {net.input_dim}"
        )
    report = equivalence_report(g, net, X)
    if args.out:
        _write_json(Path(args.out), report.to_dict())
    print(
        f"samples {report.samples}  agreement {report.agreement:.4f}  "
        f"max |dev| {report.max_abs_deviation:.3e}  mean |dev| {report.mean_abs_deviation:.3e}"
    )
    return EXIT_OK


def _inputs(args: argparse.Namespace, input_dim: int) -> np.ndarray:
    if args.data:
        X = load_dataset(Path(args.data))
        if X.shape[1] != input_dim:
            raise DataError(f"dataset rows have {X.shape[1]} values, network expects {input_dim}")
        if args.n is not None:
            X = X[: args.n]
    else:
        X = np.random.default_rng(_seed(args)).normal(size=(args.n or 1000, input_dim))
    if X.shape[0] == 0:
        raise UsageError("no inputs to run")
    return X


def cmd_bench(args: argparse.Namespace) -> int:
    net = load_network(args.network)
    X = _inputs(args, net.input_dim)
    sim = Simulator(net)
    modes = ["pipelined", "single"] if args.mode == "both" else [args.mode]
    results = {}
    for mode in modes:
        r = run_stream(sim, X, mode=mode)
        results[mode] = {
            "steps": r.steps,
            "throughput": r.throughput,
            "latency": r.latency,
            "neuron_count": r.neuron_count,
            "mean_spikes_per_inference": float(np.mean(r.spikes_per_inference)),
            "max_spikes_per_inference": int(np.max(r.spikes_per_inference)),
            "idle_spikes": r.idle_spikes,
        }
        print(
            f"{mode:9s}  n {X.shape[0]}  steps {r.steps}  throughput {r.throughput:.4f}/step  "
            f"spikes/inference {np.mean(r.spikes_per_inference):.2f} (max {np.max(r.spikes_per_inference)}"
            f" of {r.neuron_count} neurons)"
        )
    if args.out:
        _write_json(Path(args.out), {"n_inputs": int(X.shape[0]), "modes": results})
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    net = load_network(args.network)
    X = _inputs(args, net.input_dim)
    r = run_stream(net, X, mode=args.mode, record_raster=bool(args.raster))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_report(r, out)
    if _dump(json.loads(out.read_text())) != _dump(r.to_dict()):
        raise DataError(f"{out} did not survive a re-read")
    if args.raster:
        write_raster_csv(r, args.raster)
    print(f"wrote {out}: {r.n_inputs} inputs, {r.steps} steps, {r.total_spikes} spikes")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-unit", help="train an AMOS unit on a target activation")
    p.add_argument("--kind", required=True, choices=sorted(DEFAULT_DOMAINS))
    p.add_argument("--k", type=_positive_int, help="number of gates (default per kind)")
    p.add_argument("--domain", help="training domain lo,hi (lo,hi,lo2,hi2 for mult)")
    p.add_argument("--config", help="JSON file with TrainConfig fields")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--closed-form", action="store_true", help="relu only: build the unit without training")
    p.add_argument("--alpha", type=float, help="input range of the closed-form relu unit (default 2**K)")
    p.add_argument("--seed", type=int, help="RNG seed (falls back to $AMOS_SEED, then 0)")
    p.add_argument("--out", help="params JSON (default <kind>_K<K>.json)")
    p.add_argument("--report", help="training report JSON (default <out>_report.json)")
    p.add_argument("--history", help="epoch,mse CSV (default <out>_mse.csv)")
    p.set_defaults(func=cmd_train_unit)

    p = sub.add_parser("build-relu", help="write the closed-form relu unit")
    p.add_argument("--k", type=_positive_int, required=True)
    p.add_argument("--alpha", type=float, help="input range (default 2**K)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_build_relu)

    p = sub.add_parser("curve", help="sweep a unit against its target and write a CSV")
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--points", type=_positive_int, help="points (per axis for two inputs)")
    p.add_argument("--domain", help="override the sweep domain")
    p.set_defaults(func=cmd_curve)

    def library_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--unit", action="append", metavar="KIND=PATH", help="unit params to use for KIND")
        p.add_argument("--relu-k", type=_positive_int, default=10, help="K of the default relu unit")
        p.add_argument("--relu-alpha", type=float, help="input range of the default relu unit (default 2**K)")
        p.add_argument("--no-defaults", action="store_true", help="use only the --unit files")

    p = sub.add_parser("convert", help="compile an ANN graph to a spiking network")
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    library_flags(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify", help="compare a graph with its compiled network on a dataset")
    p.add_argument("--graph", required=True)
    p.add_argument("--network", required=True)
    p.add_argument("--data", required=True, help=".npy or .csv with one input per row")
    p.add_argument("--n", type=_positive_int, help="use the first N rows")
    p.add_argument("--out")
    p.set_defaults(func=cmd_verify)

    for name, func, text in (
        ("bench", cmd_bench, "measure steps, throughput and spikes"),
        ("simulate", cmd_simulate, "run a network and write the SimReport"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--network", required=True)
        p.add_argument("--data", help="inputs (.npy or .csv); random normal inputs otherwise")
        p.add_argument("--n", type=_positive_int, help="number of inputs (default 1000 random)")
        p.add_argument("--seed", type=int, help="RNG seed for random inputs (falls back to $AMOS_SEED)")
        modes = ("pipelined", "single", "both") if name == "bench" else ("pipelined", "single")
        p.add_argument("--mode", choices=modes, default=modes[0])
        if name == "simulate":
            p.add_argument("--out", required=True)
            p.add_argument("--raster", help="write the spike raster CSV here")
        else:
            p.add_argument("--out")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"amos {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, AmosViolation, FloatingPointError) as exc:
        print(f"amos {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GraphError, CompileError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"amos {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
