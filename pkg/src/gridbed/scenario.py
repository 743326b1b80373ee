"""Scenario runner: the six bundled attack/mitigation cases, end to end.

Each case starts a fresh in-process server on a loopback socket, drives the
attack (replay mode writes the case's terminal setpoint pattern directly;
live mode runs the adaptive loop), snapshots metrics through a client
connection, runs one mitigation cycle through a second connection, snapshots
again, and tears down.  All cross-activity traffic goes over real TCP; the
server's internal state is touched only to cross-check that client-read
metrics agree with the solver to within register quantization.

Runs are deterministic for a given config: no randomness, fixed iteration
orders, and CSV outputs carry no timestamps.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy

from . import __version__
from .attack import AttackParams, run_attack
from .feeder import FeederModel, load_default_feeder, load_feeder_file
from .mitigate import MitigationPlan, Weights, mitigate_once
from .modbus.client import ModbusClient
from .modbus.server import FeederServer
from .powerflow import (
    DEFAULT_BAND,
    count_violations_from_magnitudes,
    unbalance_from_magnitudes,
)
from .regmap import MeterMap, VOLTAGE_BLOCK_START

log = logging.getLogger("gridbed.scenario")

# Case catalog: overloaded phase group and its per-node level in MW; the six
# other controllable nodes drop to the off level.
CASE_PATTERNS: dict[int, tuple[str, float]] = {
    1: ("C", 0.08),
    2: ("B", 0.08),
    3: ("A", 0.08),
    4: ("C", 0.16),
    5: ("B", 0.16),
    6: ("A", 0.16),
}
OFF_LEVEL_MW = 0.001

QUANTIZATION_PU = 5e-5


@dataclass
class ScenarioConfig:
    feeder: str | None = None  # None = bundled fixture
    allow_meshed: bool = True  # the bundled cases operate ties into loops
    use_oracle: bool = False
    band: tuple[float, float] = DEFAULT_BAND
    weights: Weights = field(default_factory=Weights)
    attack_params: AttackParams = field(default_factory=AttackParams)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        doc = json.loads(text)
        cfg = cls()
        cfg.feeder = doc.get("feeder")
        cfg.allow_meshed = bool(doc.get("allow_meshed", cfg.allow_meshed))
        cfg.use_oracle = bool(doc.get("oracle", cfg.use_oracle))
        if "band" in doc:
            cfg.band = tuple(doc["band"])
        if "weights" in doc:
            cfg.weights = Weights(
                violation=float(doc["weights"].get("violation", 1000.0)),
                cost=float(doc["weights"].get("cost", 1.0)),
            )
        if "attack_params" in doc:
            cfg.attack_params = AttackParams.from_json(json.dumps(doc["attack_params"]))
        return cfg

    def load_model(self) -> FeederModel:
        if self.feeder:
            return load_feeder_file(self.feeder)
        return load_default_feeder()


def case_vector(meter_map: MeterMap, case: int) -> dict[str, int]:
    """Terminal setpoint pattern for a case, in kW per controllable node."""
    group, level = CASE_PATTERNS[case]
    return {
        node: int(round((level if phase == group else OFF_LEVEL_MW) * 1000.0))
        for node, phase in meter_map.setpoints
    }


@dataclass
class CaseResult:
    case: int
    status: str
    group: str
    level_mw: float
    violations_baseline: int = -1
    violations_pre: int = -1
    unbalance_pre_pct: float = 0.0
    toggles: tuple[str, ...] = ()
    violations_post: int = -1
    unbalance_post_pct: float = 0.0
    attack_status: str = ""
    attack_steps: int = 0
    budget_spent_mw: float = 0.0
    max_read_error_pu: float = 0.0
    wall_ms: float = 0.0
    profile_pre: dict[tuple[str, str], float] = field(default_factory=dict)
    profile_post: dict[tuple[str, str], float] = field(default_factory=dict)
    plan: MitigationPlan | None = None


@dataclass
class ScenarioReport:
    results: list[CaseResult]
    environment: dict

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.results)


def _environment_stamp(config: ScenarioConfig) -> dict:
    return {
        "package": f"gridbed {__version__}",
        "python": sys.version.split()[0],
        "numpy": numpy.__version__,
        "platform": platform.platform(),
        "allow_meshed": config.allow_meshed,
        "oracle": config.use_oracle,
        "band": list(config.band),
    }


def _check_read_consistency(
    server: FeederServer, magnitudes: dict[tuple[str, str], float]
) -> float:
    """Max |client-read - solver| over meters; must be within quantization."""
    state = server.snapshot()
    worst = 0.0
    for (bus, phase), read in magnitudes.items():
        direct = state.solution.magnitude(bus, phase)
        worst = max(worst, abs(direct - read))
    return worst


def run_case(config: ScenarioConfig, case: int, live: bool = False) -> CaseResult:
    group, level = CASE_PATTERNS[case]
    result = CaseResult(case=case, status="ok", group=group, level_mw=level)
    started = time.monotonic()
    stage = "load-feeder"
    try:
        model = config.load_model()
        meter_map = MeterMap.for_model(model)
        stage = "server-start"
        with FeederServer(model, meter_map, bind=("127.0.0.1", 0)).start() as server:
            host, port = server.address
            stage = "baseline"
            with ModbusClient(host, port) as attacker:
                mags = attacker.read_all_voltages(meter_map)
                result.violations_baseline = count_violations_from_magnitudes(
                    mags, config.band
                )

                stage = "attack"
                if live:
                    trace = run_attack(attacker, meter_map, config.attack_params, group)
                    result.attack_status = trace.status
                    result.attack_steps = len(trace.steps)
                    result.budget_spent_mw = trace.budget_spent_mw
                else:
                    attacker.write_setpoints(meter_map, case_vector(meter_map, case))
                    result.attack_status = "replayed"

                stage = "pre-snapshot"
                mags = attacker.read_all_voltages(meter_map)
                result.profile_pre = dict(mags)
                result.violations_pre = count_violations_from_magnitudes(mags, config.band)
                result.unbalance_pre_pct = unbalance_from_magnitudes(mags)
                result.max_read_error_pu = max(
                    result.max_read_error_pu, _check_read_consistency(server, mags)
                )

            stage = "mitigation"
            with ModbusClient(host, port) as defender:
                plan = mitigate_once(
                    defender,
                    model,
                    meter_map,
                    weights=config.weights,
                    use_oracle=config.use_oracle,
                    allow_meshed=config.allow_meshed,
                    band=config.band,
                )
                result.plan = plan
                if plan is not None:
                    result.toggles = plan.toggles

                stage = "post-snapshot"
                mags = defender.read_all_voltages(meter_map)
                result.profile_post = dict(mags)
                result.violations_post = count_violations_from_magnitudes(mags, config.band)
                result.unbalance_post_pct = unbalance_from_magnitudes(mags)
                result.max_read_error_pu = max(
                    result.max_read_error_pu, _check_read_consistency(server, mags)
                )
    except Exception as exc:  # stage-tagged diagnostic, partial result kept
        log.error("case %d failed during %s: %s", case, stage, exc)
        result.status = f"failed:{stage}"
        return result
    if result.max_read_error_pu > QUANTIZATION_PU + 1e-12:
        result.status = "failed:read-consistency"
    result.wall_ms = (time.monotonic() - started) * 1000.0
    return result


def run_scenario(
    config: ScenarioConfig, cases: list[int], live: bool = False
) -> ScenarioReport:
    results = [run_case(config, case, live) for case in cases]
    return ScenarioReport(results=results, environment=_environment_stamp(config))


def emit_report(report: ScenarioReport, out_dir, meter_map: MeterMap) -> list[Path]:
    """Write summary CSV, detail JSON, and per-case voltage profiles."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    summary = out / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["case", "status", "violations_pre", "unbalance_pct", "toggles", "violations_post"]
        )
        for r in report.results:
            writer.writerow(
                [
                    r.case,
                    r.status,
                    r.violations_pre,
                    f"{r.unbalance_pre_pct:.4f}",
                    ";".join(r.toggles),
                    r.violations_post,
                ]
            )
    written.append(summary)

    detail = out / "detail.json"
    doc = {
        "environment": report.environment,
        "cases": [
            {
                "case": r.case,
                "status": r.status,
                "group": r.group,
                "level_mw": r.level_mw,
                "violations_baseline": r.violations_baseline,
                "violations_pre": r.violations_pre,
                "unbalance_pre_pct": r.unbalance_pre_pct,
                "toggles": list(r.toggles),
                "violations_post": r.violations_post,
                "unbalance_post_pct": r.unbalance_post_pct,
                "attack_status": r.attack_status,
                "attack_steps": r.attack_steps,
                "budget_spent_mw": r.budget_spent_mw,
                "max_read_error_pu": r.max_read_error_pu,
                "wall_ms": r.wall_ms,
            }
            for r in report.results
        ],
    }
    with open(detail, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
    written.append(detail)

    for r in report.results:
        for tag, profile in (("pre", r.profile_pre), ("post", r.profile_post)):
            if not profile:
                continue
            path = out / f"voltage_case{r.case}_{tag}.csv"
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["register", "bus", "phase", "magnitude_pu"])
                for k, (bus, phase) in enumerate(meter_map.meters):
                    writer.writerow(
                        [VOLTAGE_BLOCK_START + k, bus, phase, f"{profile[(bus, phase)]:.4f}"]
                    )
            written.append(path)
    return written


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridbed-scenario", description="Run the bundled attack/mitigation cases"
    )
    parser.add_argument("--config", help="scenario config JSON (defaults built in)")
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--case", type=int, choices=sorted(CASE_PATTERNS), help="single case")
    group.add_argument("--all", action="store_true", help="run all six cases")
    mode = parser.add_mutually_exclusive_group()
    mode.add_argument("--replay", action="store_true", help="write terminal patterns (default)")
    mode.add_argument("--live", action="store_true", help="run the adaptive attack loop")
    parser.add_argument("--out-dir", required=True, help="directory for report files")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            config = ScenarioConfig.from_json(fh.read())
    else:
        config = ScenarioConfig()
    cases = [args.case] if args.case else sorted(CASE_PATTERNS)

    report = run_scenario(config, cases, live=args.live)
    meter_map = MeterMap.for_model(config.load_model())
    emit_report(report, args.out_dir, meter_map)

    for r in report.results:
        print(
            f"case {r.case}: status={r.status} pre={r.violations_pre} "
            f"unbalance={r.unbalance_pre_pct:.3f}% toggles={list(r.toggles)} "
            f"post={r.violations_post}"
        )
    return 0 if report.ok else 1


if __name__ == "__main__":
    raise SystemExit(main())
