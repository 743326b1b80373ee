"""Distribution feeder model: document ingestion, switch topology, radiality.

A feeder is described by a JSON document listing buses with per-phase
constant-power spot loads, branches with 3x3 series impedance matrices, and
named switches (zero-impedance branches with a normal open/closed state).
See ``docs/feeder_format.md`` for the schema.

:class:`FeederModel` and :class:`TopologyView` are immutable after
construction and safe to share across threads; switching actions are
expressed as new :class:`SwitchConfig` values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from typing import Iterable, Mapping

PHASES = ("A", "B", "C")
PHASE_INDEX = {"A": 0, "B": 1, "C": 2}

DEFAULT_FEEDER_RESOURCE = "ieee123.json"


class FeederError(ValueError):
    """Invalid feeder document, switch name, or switch configuration."""


@dataclass(frozen=True)
class Bus:
    """Network node with a per-phase constant-power spot load.

    ``load_kw`` / ``load_kvar`` are indexed (A, B, C); entries for phases the
    bus does not carry must be zero.
    """

    id: str
    phases: tuple[str, ...]
    load_kw: tuple[float, float, float]
    load_kvar: tuple[float, float, float]

    def has_load(self) -> bool:
        return any(v != 0.0 for v in self.load_kw) or any(
            v != 0.0 for v in self.load_kvar
        )


@dataclass(frozen=True)
class Branch:
    """Series element between two buses.

    ``z_ohm`` is a 3x3 complex impedance matrix indexed (A, B, C); entries for
    phases absent at either endpoint are ignored.  A branch with a ``switch``
    name is an operable zero-impedance switch; ``normal_closed`` records its
    normal state.
    """

    from_bus: str
    to_bus: str
    z_ohm: tuple[tuple[complex, ...], ...]
    switch: str | None = None
    normal_closed: bool = True

    @property
    def is_switch(self) -> bool:
        return self.switch is not None

    def other(self, bus_id: str) -> str:
        return self.to_bus if bus_id == self.from_bus else self.from_bus


@dataclass(frozen=True)
class FeederModel:
    """Validated feeder: buses, branches, switches, and the slack source."""

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    source_bus: str
    base_volts_ln: float
    base_va: float

    @cached_property
    def bus_map(self) -> Mapping[str, Bus]:
        return {b.id: b for b in self.buses}

    @cached_property
    def switch_names(self) -> tuple[str, ...]:
        return tuple(b.switch for b in self.branches if b.is_switch)

    @cached_property
    def switch_branch(self) -> Mapping[str, Branch]:
        return {b.switch: b for b in self.branches if b.is_switch}

    @cached_property
    def load_buses(self) -> frozenset[str]:
        return frozenset(b.id for b in self.buses if b.has_load())

    def bus(self, bus_id: str) -> Bus:
        try:
            return self.bus_map[bus_id]
        except KeyError:
            raise FeederError(f"unknown bus {bus_id!r}") from None

    def meter_points(self) -> tuple[tuple[str, str], ...]:
        """All (bus, phase) measurement points, in document order."""
        return tuple((b.id, p) for b in self.buses for p in b.phases)


def conduction_phases(model: FeederModel, branch: Branch) -> tuple[str, ...]:
    """Phases a branch can carry: those present at both endpoints."""
    common = set(model.bus(branch.from_bus).phases) & set(
        model.bus(branch.to_bus).phases
    )
    return tuple(p for p in PHASES if p in common)


@dataclass(frozen=True)
class SwitchConfig:
    """Ordered open/closed assignment over a model's named switches."""

    states: tuple[tuple[str, bool], ...]

    @cached_property
    def _map(self) -> Mapping[str, bool]:
        return dict(self.states)

    @classmethod
    def from_mapping(cls, model: FeederModel, states: Mapping[str, bool]) -> "SwitchConfig":
        missing = [n for n in model.switch_names if n not in states]
        extra = [n for n in states if n not in model.switch_names]
        if missing:
            raise FeederError(f"switch config missing switches: {missing}")
        if extra:
            raise FeederError(f"switch config names unknown switches: {extra}")
        return cls(tuple((n, bool(states[n])) for n in model.switch_names))

    @classmethod
    def normal(cls, model: FeederModel) -> "SwitchConfig":
        return cls(
            tuple(
                (b.switch, b.normal_closed)
                for b in model.branches
                if b.is_switch
            )
        )

    def closed(self, name: str) -> bool:
        try:
            return self._map[name]
        except KeyError:
            raise FeederError(f"unknown switch {name!r}") from None

    def as_dict(self) -> dict[str, bool]:
        return dict(self.states)

    def with_switch(self, name: str, closed: bool) -> "SwitchConfig":
        if name not in self._map:
            raise FeederError(f"unknown switch {name!r}")
        return SwitchConfig(
            tuple((n, closed if n == name else s) for n, s in self.states)
        )

    def toggled_from(self, other: "SwitchConfig") -> tuple[str, ...]:
        """Names whose state differs from ``other``, in this config's order."""
        return tuple(n for n, s in self.states if other.closed(n) != s)


@dataclass(frozen=True)
class TopologyView:
    """Active edge set and energization derived from one switch config."""

    model: FeederModel
    config: SwitchConfig | None
    active_branches: tuple[int, ...]
    energized: frozenset[str]
    components: tuple[frozenset[str], ...]


def apply_switch_config(model: FeederModel, config: SwitchConfig) -> TopologyView:
    """Resolve a switch config into active edges and the energized bus set.

    Active edges are all lines plus closed switches; energization is graph
    reachability from the source over active edges.
    """
    missing = [n for n in model.switch_names if n not in config.as_dict()]
    extra = [n for n in config.as_dict() if n not in model.switch_names]
    if missing or extra:
        raise FeederError(
            f"switch config does not cover model switch set "
            f"(missing={missing}, extra={extra})"
        )
    active = tuple(
        i
        for i, b in enumerate(model.branches)
        if not b.is_switch or config.closed(b.switch)
    )
    adjacency: dict[str, list[str]] = {b.id: [] for b in model.buses}
    for i in active:
        br = model.branches[i]
        adjacency[br.from_bus].append(br.to_bus)
        adjacency[br.to_bus].append(br.from_bus)

    seen: set[str] = set()
    components: list[frozenset[str]] = []
    for start in adjacency:
        if start in seen:
            continue
        stack = [start]
        comp = {start}
        seen.add(start)
        while stack:
            u = stack.pop()
            for v in adjacency[u]:
                if v not in comp:
                    comp.add(v)
                    seen.add(v)
                    stack.append(v)
        components.append(frozenset(comp))

    energized = next(c for c in components if model.source_bus in c)
    return TopologyView(
        model=model,
        config=config,
        active_branches=active,
        energized=energized,
        components=tuple(components),
    )


def is_radial(view: TopologyView) -> bool:
    """True iff the energized subgraph is a tree spanning every load bus."""
    model = view.model
    if not model.load_buses <= view.energized:
        return False
    live_edges = sum(
        1
        for i in view.active_branches
        if model.branches[i].from_bus in view.energized
        and model.branches[i].to_bus in view.energized
    )
    return live_edges == len(view.energized) - 1


def radiality_indicator(
    magnitudes: Mapping[str, float],
    config: SwitchConfig,
    pairs: Iterable[tuple[str, str, str | None]],
) -> int:
    """Dead-island indicator over adjacent node pairs.

    Evaluates, literally, the product over pairs (i, j) of
    ``1 - [Vi == 0][Vj == 0](1 - Sij)`` where Sij is 1 for lines and closed
    switches, 0 for open switches.  Returns 0 only when some pair has both
    endpoint magnitudes exactly zero across an open switch.  Note this is an
    after-the-fact island detector: it stays 1 on meshed networks, so the
    operative radiality constraint elsewhere is :func:`is_radial`.
    """
    for i, j, switch in pairs:
        if switch is None:
            s_ij = 1
        else:
            s_ij = 1 if config.closed(switch) else 0
        if magnitudes[i] == 0.0 and magnitudes[j] == 0.0 and s_ij == 0:
            return 0
    return 1


def model_pairs(model: FeederModel) -> tuple[tuple[str, str, str | None], ...]:
    """Adjacent (from, to, switch-or-None) pairs for every branch."""
    return tuple((b.from_bus, b.to_bus, b.switch) for b in model.branches)


# ---------------------------------------------------------------------------
# Document ingestion / serialization
# ---------------------------------------------------------------------------


def _require(doc: Mapping, key: str, kind, where: str):
    if key not in doc:
        raise FeederError(f"{where}: missing required key {key!r}")
    value = doc[key]
    if kind is float:
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise FeederError(f"{where}: key {key!r} must be a number")
        return float(value)
    if not isinstance(value, kind):
        raise FeederError(f"{where}: key {key!r} must be {kind.__name__}")
    return value


def _parse_phases(raw, where: str) -> tuple[str, ...]:
    if not isinstance(raw, str) or not raw:
        raise FeederError(f"{where}: phases must be a non-empty string of A/B/C")
    seen = []
    for ch in raw:
        if ch not in PHASES:
            raise FeederError(f"{where}: unknown phase {ch!r}")
        if ch in seen:
            raise FeederError(f"{where}: duplicate phase {ch!r}")
        seen.append(ch)
    return tuple(p for p in PHASES if p in seen)


def _parse_triplet(raw, key: str, where: str) -> tuple[float, float, float]:
    if not isinstance(raw, list) or len(raw) != 3:
        raise FeederError(f"{where}: {key} must be a list of 3 numbers")
    out = []
    for v in raw:
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise FeederError(f"{where}: {key} entries must be numbers")
        out.append(float(v))
    return tuple(out)  # type: ignore[return-value]


def _parse_matrix(raw, key: str, where: str) -> list[list[float]]:
    if not isinstance(raw, list) or len(raw) != 3:
        raise FeederError(f"{where}: {key} must be a 3x3 matrix")
    rows = []
    for row in raw:
        if not isinstance(row, list) or len(row) != 3:
            raise FeederError(f"{where}: {key} must be a 3x3 matrix")
        rows.append([float(v) for v in row])
    for i in range(3):
        for j in range(3):
            if rows[i][j] != rows[j][i]:
                raise FeederError(f"{where}: {key} is not symmetric at [{i}][{j}]")
    return rows


def load_feeder(text: str) -> FeederModel:
    """Parse and validate a feeder description document (JSON text)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FeederError(f"feeder document is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FeederError("feeder document must be a JSON object")

    base_kv_ln = _require(doc, "base_kv_ln", float, "document")
    base_kva = _require(doc, "base_kva", float, "document")
    if base_kv_ln <= 0 or base_kva <= 0:
        raise FeederError("base_kv_ln and base_kva must be positive")
    source = _require(doc, "source", str, "document")
    raw_buses = _require(doc, "buses", list, "document")
    raw_branches = _require(doc, "branches", list, "document")

    buses: list[Bus] = []
    ids: set[str] = set()
    for n, raw in enumerate(raw_buses):
        where = f"buses[{n}]"
        if not isinstance(raw, dict):
            raise FeederError(f"{where}: must be an object")
        bus_id = _require(raw, "id", str, where)
        if bus_id in ids:
            raise FeederError(f"duplicate bus id {bus_id!r}")
        ids.add(bus_id)
        phases = _parse_phases(_require(raw, "phases", str, where), f"bus {bus_id!r}")
        load_kw = _parse_triplet(raw.get("load_kw", [0, 0, 0]), "load_kw", f"bus {bus_id!r}")
        load_kvar = _parse_triplet(
            raw.get("load_kvar", [0, 0, 0]), "load_kvar", f"bus {bus_id!r}"
        )
        for p, kw, kvar in zip(PHASES, load_kw, load_kvar):
            if (kw != 0 or kvar != 0) and p not in phases:
                raise FeederError(
                    f"bus {bus_id!r}: load on phase {p} not carried by the bus"
                )
            if kw < 0:
                raise FeederError(f"bus {bus_id!r}: negative load_kw on phase {p}")
        buses.append(Bus(bus_id, phases, load_kw, load_kvar))

    if source not in ids:
        raise FeederError(f"source bus {source!r} is not in the bus list")

    branches: list[Branch] = []
    switch_names: set[str] = set()
    for n, raw in enumerate(raw_branches):
        where = f"branches[{n}]"
        if not isinstance(raw, dict):
            raise FeederError(f"{where}: must be an object")
        from_bus = _require(raw, "from", str, where)
        to_bus = _require(raw, "to", str, where)
        for endpoint in (from_bus, to_bus):
            if endpoint not in ids:
                raise FeederError(
                    f"{where}: endpoint references unknown bus {endpoint!r}"
                )
        if from_bus == to_bus:
            raise FeederError(f"{where}: self-loop at bus {from_bus!r}")
        r = _parse_matrix(raw.get("r_ohm", [[0] * 3] * 3), "r_ohm", where)
        x = _parse_matrix(raw.get("x_ohm", [[0] * 3] * 3), "x_ohm", where)
        z = tuple(
            tuple(complex(r[i][j], x[i][j]) for j in range(3)) for i in range(3)
        )
        switch = raw.get("switch")
        normal_closed = True
        if switch is not None:
            if not isinstance(switch, str) or not switch:
                raise FeederError(f"{where}: switch name must be a non-empty string")
            if switch in switch_names:
                raise FeederError(f"duplicate switch name {switch!r}")
            switch_names.add(switch)
            normal = raw.get("normal", "closed")
            if normal not in ("open", "closed"):
                raise FeederError(
                    f"switch {switch!r}: normal state must be 'open' or 'closed'"
                )
            normal_closed = normal == "closed"
            if any(v != 0 for row in z for v in row):
                raise FeederError(f"switch {switch!r}: impedance must be zero")
        branches.append(Branch(from_bus, to_bus, z, switch, normal_closed))

    model = FeederModel(
        buses=tuple(buses),
        branches=tuple(branches),
        source_bus=source,
        base_volts_ln=base_kv_ln * 1000.0,
        base_va=base_kva * 1000.0,
    )
    for br in model.branches:
        if not conduction_phases(model, br):
            raise FeederError(
                f"branch {br.from_bus!r}-{br.to_bus!r}: endpoints share no phase"
            )
    return model


def serialize_feeder(model: FeederModel) -> str:
    """Inverse of :func:`load_feeder`: loading the output reproduces the model."""
    doc = {
        "base_kv_ln": model.base_volts_ln / 1000.0,
        "base_kva": model.base_va / 1000.0,
        "source": model.source_bus,
        "buses": [
            {
                "id": b.id,
                "phases": "".join(b.phases),
                "load_kw": list(b.load_kw),
                "load_kvar": list(b.load_kvar),
            }
            for b in model.buses
        ],
        "branches": [
            _branch_doc(b) for b in model.branches
        ],
    }
    return json.dumps(doc, indent=1)


def _branch_doc(b: Branch) -> dict:
    doc: dict = {
        "from": b.from_bus,
        "to": b.to_bus,
        "r_ohm": [[b.z_ohm[i][j].real for j in range(3)] for i in range(3)],
        "x_ohm": [[b.z_ohm[i][j].imag for j in range(3)] for i in range(3)],
    }
    if b.is_switch:
        doc["switch"] = b.switch
        doc["normal"] = "closed" if b.normal_closed else "open"
    return doc


def load_feeder_file(path) -> FeederModel:
    with open(path, "r", encoding="utf-8") as fh:
        return load_feeder(fh.read())


def default_feeder_text() -> str:
    """Text of the bundled IEEE-123-like feeder description."""
    return (
        resources.files("gridbed")
        .joinpath("data", DEFAULT_FEEDER_RESOURCE)
        .read_text(encoding="utf-8")
    )


def load_default_feeder() -> FeederModel:
    return load_feeder(default_feeder_text())
