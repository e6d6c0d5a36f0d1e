"""Clocked simulation of compiled spiking networks.

All gates update synchronously once per step.  A synapse with delay ``k``
delivers the value its source had ``k`` steps earlier; analog inputs and sums
travel through the same delay machinery as spikes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from scipy import sparse

from amos.compile import SpikingNetwork


class AmosViolation(AssertionError):
    """A neuron fired more than once for one presentation."""


@dataclass
class SimState:
    """Mutable run state: ring buffers of past source values plus counters."""

    t: int
    inputs: np.ndarray
    gates: np.ndarray
    sums: np.ndarray
    total_spikes: int = 0
    raster: list[tuple[int, int]] = field(default_factory=list)


def infer_stages(net: SpikingNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Step offset at which each gate and sum works on the presentation made at step 0.

    Uses the stored stages when present; otherwise the longest delay path from
    the inputs.
    """
    gate_stage = [g.stage for g in net.gates]
    sum_stage = [s.stage for s in net.sums]
    if all(s is not None for s in gate_stage) and all(s is not None for s in sum_stage):
        return np.array(gate_stage, dtype=np.int64), np.array(sum_stage, dtype=np.int64)
    memo: dict[tuple[str, int], int] = {}

    def stage(kind: str, idx: int) -> int:
        key = (kind, idx)
        if key not in memo:
            item = net.gates[idx] if kind == "gate" else net.sums[idx]
            best = 0
            for syn in item.synapses:
                src = 0 if syn.kind == "input" else stage(syn.kind, syn.src)
                best = max(best, src + syn.delay)
            memo[key] = best
        return memo[key]

    return (
        np.array([stage("gate", i) for i in range(len(net.gates))], dtype=np.int64),
        np.array([stage("sum", i) for i in range(len(net.sums))], dtype=np.int64),
    )


class Simulator:
    """Precomputed per-delay connection matrices for one network."""

    def __init__(self, net: SpikingNetwork):
        self.net = net
        self.n_in = net.input_dim
        self.n_gates = len(net.gates)
        self.n_sums = len(net.sums)
        delays = [s.delay for item in (*net.gates, *net.sums) for s in item.synapses]
        self.ring = max(delays, default=0) + 1
        self.thresholds = np.array([g.threshold for g in net.gates])
        self.bias = np.array([s.bias for s in net.sums])
        self.readout = np.array(net.readout, dtype=np.int64)
        sizes = {"input": self.n_in, "gate": self.n_gates, "sum": self.n_sums}
        self.to_gates = self._matrices(net.gates, self.n_gates, sizes)
        self.to_sums = self._matrices(net.sums, self.n_sums, sizes)
        self.gate_stage, self.sum_stage = infer_stages(net)

    @staticmethod
    def _matrices(items, n_rows, sizes) -> list[tuple[str, int, sparse.csr_matrix]]:
        entries: dict[tuple[str, int], tuple[list, list, list]] = {}
        for row, item in enumerate(items):
            for syn in item.synapses:
                rows, cols, vals = entries.setdefault((syn.kind, syn.delay), ([], [], []))
                rows.append(row)
                cols.append(syn.src)
                vals.append(syn.w)
        out = []
        for (kind, delay), (rows, cols, vals) in sorted(entries.items()):
            m = sparse.csr_matrix((vals, (rows, cols)), shape=(n_rows, sizes[kind]))
            out.append((kind, delay, m))
        return out

    def reset(self) -> SimState:
        return SimState(
            t=0,
            inputs=np.zeros((self.ring, self.n_in)),
            gates=np.zeros((self.ring, self.n_gates)),
            sums=np.zeros((self.ring, self.n_sums)),
        )

    def _gather(self, state: SimState, mats, base: np.ndarray) -> np.ndarray:
        t, R = state.t, self.ring
        hist = {"input": state.inputs, "gate": state.gates, "sum": state.sums}
        acc = base.copy()
        for kind, delay, m in mats:
            acc += m @ hist[kind][(t - delay) % R]
        return acc

    def step(self, state: SimState, x: Iterable[float] | None = None, record: bool = False) -> np.ndarray:
        """Advance one clock step; returns the indices of gates that fired.

        ``x`` is presented at the current step; ``None`` presents zeros.
        """
        slot = state.t % self.ring
        if x is None:
            state.inputs[slot] = 0.0
        else:
            vec = np.asarray(x, dtype=np.float64).reshape(-1)
            if vec.shape[0] != self.n_in:
                raise ValueError(f"input has dim {vec.shape[0]}, network expects {self.n_in}")
            state.inputs[slot] = vec
        # history slots for times not yet reached still hold zeros, or values
        # from exactly one ring length ago which are overwritten right here
        state.sums[slot] = 0.0
        state.gates[slot] = 0.0
        state.sums[slot] = self._gather(state, self.to_sums, self.bias)
        potential = self._gather(state, self.to_gates, -self.thresholds)
        fired = potential >= 0
        state.gates[slot] = fired
        idx = np.flatnonzero(fired)
        state.total_spikes += idx.size
        if record:
            state.raster.extend((state.t, int(g)) for g in idx)
        state.t += 1
        return idx

    def readout_values(self, state: SimState) -> np.ndarray:
        """Readout sums formed in the most recent step."""
        return state.sums[(state.t - 1) % self.ring][self.readout].copy()


@dataclass
class SimReport:
    mode: str
    outputs: np.ndarray
    latency: int
    first_output_step: int
    steps: int
    total_spikes: int
    spikes_per_inference: np.ndarray
    idle_spikes: int
    peak_simultaneous_spikes: int
    neuron_count: int
    raster: list[tuple[int, int]] | None = None

    @property
    def n_inputs(self) -> int:
        return self.outputs.shape[0]

    @property
    def throughput(self) -> float:
        """Inputs completed per clock step."""
        return self.n_inputs / self.steps if self.steps else float("inf")

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "n_inputs": self.n_inputs,
            "latency": self.latency,
            "first_output_step": self.first_output_step,
            "steps": self.steps,
            "throughput": self.throughput,
            "neuron_count": self.neuron_count,
            "total_spikes": self.total_spikes,
            "idle_spikes": self.idle_spikes,
            "peak_simultaneous_spikes": self.peak_simultaneous_spikes,
            "mean_spikes_per_inference": float(np.mean(self.spikes_per_inference)),
            "max_spikes_per_inference": int(np.max(self.spikes_per_inference)),
            "spikes_per_inference": self.spikes_per_inference.tolist(),
            "outputs": self.outputs.tolist(),
        }


def _attribute(sim: Simulator, t: int, fired: np.ndarray, n: int, per_gate: np.ndarray) -> int:
    """Charge spikes fired at step ``t`` to presentations; returns the unattributed count."""
    pres = t - sim.gate_stage[fired]
    ok = (pres >= 0) & (pres < n)
    np.add.at(per_gate, (fired[ok], pres[ok]), 1)
    return int(np.count_nonzero(~ok))


def assert_amos(per_gate: np.ndarray) -> None:
    """Raise if any entry of a (gate, presentation) spike-count table exceeds one."""
    per_gate = np.asarray(per_gate)
    if per_gate.size and per_gate.max() > 1:
        gate, pres = np.unravel_index(np.argmax(per_gate), per_gate.shape)
        raise AmosViolation(f"gate {gate} fired {per_gate.max()} times for presentation {pres}")


def run_stream(
    net: SpikingNetwork | Simulator,
    inputs: Any,
    mode: str = "pipelined",
    record_raster: bool = False,
    check_amos: bool = True,
) -> SimReport:
    """Present ``inputs`` (shape ``(N, input_dim)``) and collect one output per input.

    In pipelined mode input ``k`` enters at step ``k`` and its output is read at
    step ``k + L``, so ``steps = L + N - 1``.  In single mode every input gets a
    fresh network and ``L`` steps of its own.  Spikes are charged to the
    presentation whose wavefront the firing gate was working on; spikes of
    gates reacting to the empty input before the first or after the last
    presentation are reported as ``idle_spikes``.
    """
    sim = net if isinstance(net, Simulator) else Simulator(net)
    X = np.asarray(inputs, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    N = X.shape[0]
    if N < 1:
        raise ValueError("need at least one input")
    if mode not in ("pipelined", "single"):
        raise ValueError(f"unknown mode {mode!r}")
    L = sim.net.latency
    outputs = np.zeros((N, len(sim.net.readout)))
    per_gate = np.zeros((sim.n_gates, N), dtype=np.int64)
    idle = 0
    peak = 0
    raster: list[tuple[int, int]] | None = [] if record_raster else None
    steps = 0
    total = 0

    if mode == "pipelined":
        state = sim.reset()
        for t in range(N + L):
            fired = sim.step(state, X[t] if t < N else None, record=record_raster)
            peak = max(peak, fired.size)
            idle += _attribute(sim, t, fired, N, per_gate)
            if t >= L:
                outputs[t - L] = sim.readout_values(state)
        steps = N + L - 1
        total = state.total_spikes
        if raster is not None:
            raster.extend(state.raster)
    else:
        for k in range(N):
            state = sim.reset()
            for t in range(L + 1):
                fired = sim.step(state, X[k] if t == 0 else None, record=record_raster)
                peak = max(peak, fired.size)
                column = np.zeros((sim.n_gates, 1), dtype=np.int64)
                idle += _attribute(sim, t, fired, 1, column)
                per_gate[:, k] += column[:, 0]
            outputs[k] = sim.readout_values(state)
            steps += L
            total += state.total_spikes
            if raster is not None:
                raster.extend((t + k * (L + 1), g) for t, g in state.raster)

    if check_amos:
        assert_amos(per_gate)
    spikes = per_gate.sum(axis=0)
    return SimReport(
        mode=mode,
        outputs=outputs,
        latency=L,
        first_output_step=L,
        steps=steps,
        total_spikes=int(total),
        spikes_per_inference=spikes,
        idle_spikes=idle,
        peak_simultaneous_spikes=peak,
        neuron_count=sim.n_gates,
        raster=raster,
    )


def count_spikes(report: SimReport) -> tuple[np.ndarray, int]:
    """Per-presentation spike counts and their total (idle spikes excluded)."""
    per = np.asarray(report.spikes_per_inference, dtype=np.int64)
    return per, int(per.sum())


def write_raster_csv(report: SimReport, path: str | Path) -> None:
    if report.raster is None:
        raise ValueError("report was produced without record_raster=True")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "gate"])
        writer.writerows(report.raster)


def save_report(report: SimReport, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1) + "\n")
