"""Codec between simulation state and the Modbus-visible register image.

Layout (1-based register numbers; wire addresses are register - 1):

* holding 1..N_meters      scaled voltage magnitudes, pu x 10^4
* holding 207..206+K       commanded load setpoints, integer kW
* holding 500              solver status (0 fresh, 1 stale)
* holding 1001..1000+2N    FLOAT32 mirror of the voltages, two words each
* coils 1..S               switch states, closed = 1

On the bundled feeder N_meters is 206 and K is 9; the layout constants stay
fixed for smaller models so client code never recomputes bases.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Mapping, Sequence

from .feeder import FeederModel, SwitchConfig
from .powerflow import VoltageSolution

VOLTAGE_BLOCK_START = 1
SETPOINT_BLOCK_START = 207
STATUS_REGISTER = 500
FLOAT_BLOCK_START = 1001
READ_LIMIT = 125

VOLTAGE_SCALE = 10_000.0
MAX_SCALED_PU = 6.5535

# Controllable load points served by setpoint registers, in register order.
DEFAULT_SETPOINT_NODES: tuple[tuple[str, str], ...] = (
    ("N102", "C"),
    ("N103", "C"),
    ("N104", "C"),
    ("N106", "B"),
    ("N107", "B"),
    ("N99", "B"),
    ("N109", "A"),
    ("N111", "A"),
    ("N114", "A"),
)


class RegisterMapError(ValueError):
    """Value out of codec range or map/solution mismatch."""


def encode_voltage_word(pu: float) -> int:
    """Scale a pu magnitude into a 16-bit word (round half up)."""
    if not 0.0 <= pu <= MAX_SCALED_PU:
        raise RegisterMapError(f"magnitude {pu} outside encodable range [0, {MAX_SCALED_PU}]")
    return int(math.floor(pu * VOLTAGE_SCALE + 0.5))


def decode_voltage_word(word: int) -> float:
    if not 0 <= word <= 0xFFFF:
        raise RegisterMapError(f"word {word} is not a 16-bit value")
    return word / VOLTAGE_SCALE


def encode_float_pair(value: float, high_word_first: bool = True) -> tuple[int, int]:
    """Split a real into the two 16-bit halves of its FLOAT32 bit pattern."""
    if not math.isfinite(value):
        raise RegisterMapError(f"cannot encode non-finite value {value!r}")
    raw = struct.pack(">f", value)
    hi, lo = struct.unpack(">HH", raw)
    return (hi, lo) if high_word_first else (lo, hi)


def decode_float_pair(words: Sequence[int], high_word_first: bool = True) -> float:
    if len(words) != 2:
        raise RegisterMapError("float decode needs exactly two words")
    for w in words:
        if not 0 <= w <= 0xFFFF:
            raise RegisterMapError(f"word {w} is not a 16-bit value")
    hi, lo = words if high_word_first else (words[1], words[0])
    return struct.unpack(">f", struct.pack(">HH", hi, lo))[0]


def plan_chunked_read(start: int, count: int, limit: int = READ_LIMIT) -> list[tuple[int, int]]:
    """Partition [start, start+count) into consecutive spans of at most limit."""
    if count < 1:
        raise RegisterMapError("count must be >= 1")
    if limit < 1:
        raise RegisterMapError("limit must be >= 1")
    spans = []
    remaining = count
    at = start
    while remaining > 0:
        take = min(limit, remaining)
        spans.append((at, take))
        at += take
        remaining -= take
    return spans


@dataclass(frozen=True)
class MeterMap:
    """Register assignment: meters to voltage registers, controllable nodes
    to setpoint registers."""

    meters: tuple[tuple[str, str], ...]
    setpoints: tuple[tuple[str, str], ...]

    @classmethod
    def for_model(
        cls,
        model: FeederModel,
        setpoint_nodes: Sequence[tuple[str, str]] = DEFAULT_SETPOINT_NODES,
    ) -> "MeterMap":
        meters = model.meter_points()
        for node, phase in setpoint_nodes:
            bus = model.bus(node)
            if phase not in bus.phases:
                raise RegisterMapError(
                    f"setpoint node {node!r} does not carry phase {phase}"
                )
        return cls(meters=meters, setpoints=tuple(setpoint_nodes))

    def voltage_register(self, bus: str, phase: str) -> int:
        try:
            return VOLTAGE_BLOCK_START + self.meters.index((bus, phase))
        except ValueError:
            raise RegisterMapError(f"({bus}, {phase}) is not a metered point") from None

    def setpoint_register(self, node: str) -> int:
        for k, (n, _) in enumerate(self.setpoints):
            if n == node:
                return SETPOINT_BLOCK_START + k
        raise RegisterMapError(f"{node!r} has no setpoint register")

    def setpoint_phase(self, node: str) -> str:
        for n, p in self.setpoints:
            if n == node:
                return p
        raise RegisterMapError(f"{node!r} has no setpoint register")

    @property
    def float_pairs(self) -> int:
        return len(self.meters)

    def float_register(self, meter_index: int) -> int:
        return FLOAT_BLOCK_START + 2 * meter_index


@dataclass(frozen=True)
class RegisterImage:
    """Immutable snapshot of the Modbus-visible state."""

    holding: tuple[int, ...]  # index = register number; [0] unused
    coils: tuple[bool, ...]  # index = coil number; [0] unused
    float_block_base: int = FLOAT_BLOCK_START


def build_image(
    solution: VoltageSolution,
    setpoints_kw: Mapping[str, int],
    config: SwitchConfig,
    meter_map: MeterMap,
    stale: bool = False,
    high_word_first: bool = True,
) -> RegisterImage:
    """Render a solved state into the register image.

    Pure function of its inputs: equal arguments produce identical images.
    """
    top = FLOAT_BLOCK_START + 2 * len(meter_map.meters)
    holding = [0] * top
    for k, (bus, phase) in enumerate(meter_map.meters):
        try:
            mag = solution.magnitude(bus, phase)
        except KeyError:
            raise RegisterMapError(f"solution lacks metered point ({bus}, {phase})") from None
        holding[VOLTAGE_BLOCK_START + k] = encode_voltage_word(mag)
        hi, lo = encode_float_pair(mag, high_word_first)
        holding[FLOAT_BLOCK_START + 2 * k] = hi
        holding[FLOAT_BLOCK_START + 2 * k + 1] = lo
    for k, (node, _) in enumerate(meter_map.setpoints):
        kw = int(setpoints_kw.get(node, 0))
        if not 0 <= kw <= 0xFFFF:
            raise RegisterMapError(f"setpoint {kw} kW for {node!r} not a 16-bit value")
        holding[SETPOINT_BLOCK_START + k] = kw
    holding[STATUS_REGISTER] = 1 if stale else 0

    coils = [False] * (len(config.states) + 1)
    for k, (_, closed) in enumerate(config.states):
        coils[1 + k] = closed
    return RegisterImage(holding=tuple(holding), coils=tuple(coils))


def render_register_map(meter_map: MeterMap) -> str:
    """Markdown reference for the register layout (the repo's map document)."""
    lines = [
        "# Register map reference",
        "",
        "Holding registers are 16-bit unsigned words; numbers below are",
        "1-based register numbers (wire address = number - 1).",
        "",
        "| Entity | Range | Contents | Units / scaling |",
        "|---|---|---|---|",
        f"| Holding | {VOLTAGE_BLOCK_START}..{len(meter_map.meters)} | "
        "per-meter voltage magnitude | pu x 10^4 |",
        f"| Holding | {SETPOINT_BLOCK_START}..{SETPOINT_BLOCK_START + len(meter_map.setpoints) - 1} | "
        "load setpoints | kW, unsigned |",
        f"| Holding | {STATUS_REGISTER} | solver status | 0 fresh, 1 stale |",
        f"| Holding | {FLOAT_BLOCK_START}..{FLOAT_BLOCK_START + 2 * len(meter_map.meters) - 1} | "
        "FLOAT32 voltage mirror | IEEE 754 single, two words per meter |",
        "| Coils | 1..8 | switch states S1..S8 | closed = 1 |",
        "",
        "## Voltage registers",
        "",
        "| Register | Float pair | Bus | Phase |",
        "|---|---|---|---|",
    ]
    for k, (bus, phase) in enumerate(meter_map.meters):
        lines.append(
            f"| {VOLTAGE_BLOCK_START + k} | "
            f"{FLOAT_BLOCK_START + 2 * k}-{FLOAT_BLOCK_START + 2 * k + 1} | {bus} | {phase} |"
        )
    lines += ["", "## Setpoint registers", "", "| Register | Node | Phase |", "|---|---|---|"]
    for k, (node, phase) in enumerate(meter_map.setpoints):
        lines.append(f"| {SETPOINT_BLOCK_START + k} | {node} | {phase} |")
    lines.append("")
    return "\n".join(lines)
