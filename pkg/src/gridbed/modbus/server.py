"""Modbus/TCP server fronting a live power-flow simulation.

The register store is bound to a feeder model: coil writes reconfigure
switches, setpoint-register writes change controllable loads, and (in the
default on-write refresh mode) the solver re-runs synchronously so the
voltage registers already reflect the new state when the write response goes
out.  All request processing is serialized through one lock, which gives
per-request atomicity and a total order over writes.

If a write produces a non-converging state the write is still accepted; the
voltage registers keep the last converged values and the status register is
set to 1 (stale) until a later write converges again.
"""

from __future__ import annotations

import argparse
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass

from .. import regmap
from ..feeder import (
    PHASE_INDEX,
    FeederModel,
    SwitchConfig,
    apply_switch_config,
    load_feeder_file,
)
from ..powerflow import VoltageSolution, effective_overrides, solve
from ..regmap import MeterMap, RegisterImage, build_image
from . import frames
from .frames import (
    EXC_ILLEGAL_ADDRESS,
    EXC_ILLEGAL_FUNCTION,
    EXC_ILLEGAL_VALUE,
    ExceptionResponse,
    ReadCoilsRequest,
    ReadCoilsResponse,
    ReadHoldingRequest,
    ReadHoldingResponse,
    WriteCoilRequest,
    WriteCoilsRequest,
    WriteCoilsResponse,
    WriteRegisterRequest,
    WriteRegistersRequest,
    WriteRegistersResponse,
)

log = logging.getLogger("gridbed.server")

DEFAULT_PORT = 1502


def _merge_blocks(blocks: list[tuple[int, int]]) -> list[tuple[int, int]]:
    blocks = sorted(blocks)
    merged = [blocks[0]]
    for lo, hi in blocks[1:]:
        if lo <= merged[-1][1] + 1:
            merged[-1] = (merged[-1][0], max(hi, merged[-1][1]))
        else:
            merged.append((lo, hi))
    return merged


@dataclass
class ServerState:
    """Mutable simulation + register state; callers must hold the lock."""

    model: FeederModel
    meter_map: MeterMap
    config: SwitchConfig
    setpoints_kw: dict[str, int]
    image: RegisterImage
    solution: VoltageSolution
    stale: bool


class FeederServer:
    """Threaded Modbus/TCP server over one feeder simulation."""

    def __init__(
        self,
        model: FeederModel,
        meter_map: MeterMap | None = None,
        bind: tuple[str, int] = ("127.0.0.1", 0),
        refresh: str = "on-write",
        high_word_first: bool = True,
    ):
        self.model = model
        self.meter_map = meter_map or MeterMap.for_model(model)
        self.high_word_first = high_word_first
        self._lock = threading.RLock()
        self._refresh = refresh
        self._tick_ms = 0
        if refresh.startswith("tick:"):
            self._tick_ms = int(refresh.split(":", 1)[1])
            if self._tick_ms <= 0:
                raise ValueError("tick interval must be positive")
        elif refresh != "on-write":
            raise ValueError(f"unknown refresh mode {refresh!r}")

        config = SwitchConfig.normal(model)
        setpoints = {}
        for node, phase in self.meter_map.setpoints:
            bus = model.bus(node)
            setpoints[node] = int(round(bus.load_kw[PHASE_INDEX[phase]]))
        solution = self._solve(config, setpoints)
        if not solution.converged:
            raise RuntimeError("base state does not converge; refusing to serve")
        self.state = ServerState(
            model=model,
            meter_map=self.meter_map,
            config=config,
            setpoints_kw=setpoints,
            image=build_image(
                solution, setpoints, config, self.meter_map, False, high_word_first
            ),
            solution=solution,
            stale=False,
        )

        self._holding_blocks = _merge_blocks(
            [
                (regmap.VOLTAGE_BLOCK_START, len(self.meter_map.meters)),
                (
                    regmap.SETPOINT_BLOCK_START,
                    regmap.SETPOINT_BLOCK_START + len(self.meter_map.setpoints) - 1,
                ),
                (regmap.STATUS_REGISTER, regmap.STATUS_REGISTER),
                (
                    regmap.FLOAT_BLOCK_START,
                    regmap.FLOAT_BLOCK_START + 2 * len(self.meter_map.meters) - 1,
                ),
            ]
        )
        self._writable_registers = (
            regmap.SETPOINT_BLOCK_START,
            regmap.SETPOINT_BLOCK_START + len(self.meter_map.setpoints) - 1,
        )
        self._coil_range = (1, len(model.switch_names))

        outer = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                outer._serve_connection(self.request)

        class _Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._tcp = _Server(bind, _Handler)
        self.address = self._tcp.server_address
        self._thread = threading.Thread(target=self._tcp.serve_forever, daemon=True)
        self._ticker: threading.Thread | None = None
        self._stop = threading.Event()

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "FeederServer":
        if self._thread.is_alive():
            return self
        self._thread.start()
        if self._tick_ms:
            self._ticker = threading.Thread(target=self._tick_loop, daemon=True)
            self._ticker.start()
        log.info("serving %s:%d", *self.address)
        return self

    def close(self):
        self._stop.set()
        self._tcp.shutdown()
        self._tcp.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    # -- simulation --------------------------------------------------------

    def _solve(self, config: SwitchConfig, setpoints: dict[str, int]) -> VoltageSolution:
        view = apply_switch_config(self.model, config)
        overrides = {}
        for node, phase in self.meter_map.setpoints:
            bus = self.model.bus(node)
            kvar = bus.load_kvar[PHASE_INDEX[phase]]
            overrides[node] = {phase: (float(setpoints[node]), kvar)}
        return solve(self.model, view, effective_overrides(view, overrides))

    def _refresh_image(self):
        solution = self._solve(self.state.config, self.state.setpoints_kw)
        if solution.converged:
            self.state.solution = solution
            self.state.stale = False
        else:
            self.state.stale = True
        self.state.image = build_image(
            self.state.solution,
            self.state.setpoints_kw,
            self.state.config,
            self.meter_map,
            self.state.stale,
            self.high_word_first,
        )

    def _tick_loop(self):
        while not self._stop.wait(self._tick_ms / 1000.0):
            with self._lock:
                self._refresh_image()

    def snapshot(self) -> ServerState:
        """Consistent copy of the live state (for tests and the orchestrator)."""
        with self._lock:
            return ServerState(
                model=self.model,
                meter_map=self.meter_map,
                config=self.state.config,
                setpoints_kw=dict(self.state.setpoints_kw),
                image=self.state.image,
                solution=self.state.solution,
                stale=self.state.stale,
            )

    # -- protocol ----------------------------------------------------------

    def _serve_connection(self, sock: socket.socket):
        try:
            while True:
                head = _read_exact(sock, frames.MBAP_SIZE)
                if head is None:
                    return
                txn, proto, length, unit = struct.unpack(">HHHB", head)
                if proto != 0 or not 2 <= length <= 254:
                    log.warning("dropping connection: bad MBAP (proto=%d len=%d)", proto, length)
                    return
                pdu = _read_exact(sock, length - 1)
                if pdu is None:
                    return
                response = self._dispatch(pdu)
                header = frames.MbapHeader(transaction_id=txn, unit_id=unit)
                sock.sendall(frames.encode_frame(header, frames.encode_pdu(response)))
        except (ConnectionError, OSError):
            return

    def _dispatch(self, pdu: bytes):
        function = pdu[0]
        if function not in frames.SUPPORTED_FUNCTIONS:
            return ExceptionResponse(function & 0x7F, EXC_ILLEGAL_FUNCTION)
        try:
            request = frames.decode_request(pdu)
        except frames.FrameError:
            return ExceptionResponse(function & 0x7F, EXC_ILLEGAL_VALUE)
        with self._lock:
            return self._execute(request)

    def _execute(self, request):
        if isinstance(request, ReadHoldingRequest):
            return self._read_holding(request)
        if isinstance(request, ReadCoilsRequest):
            return self._read_coils(request)
        if isinstance(request, WriteRegisterRequest):
            return self._write_registers(
                request.function, request.address + 1, [request.value], request
            )
        if isinstance(request, WriteRegistersRequest):
            return self._write_registers(
                request.function,
                request.start + 1,
                list(request.words),
                WriteRegistersResponse(request.start, len(request.words)),
            )
        if isinstance(request, WriteCoilRequest):
            if request.value not in (frames.COIL_ON, frames.COIL_OFF):
                return ExceptionResponse(request.function, EXC_ILLEGAL_VALUE)
            return self._write_coils(
                request.function,
                request.address + 1,
                [request.value == frames.COIL_ON],
                request,
            )
        if isinstance(request, WriteCoilsRequest):
            return self._write_coils(
                request.function,
                request.start + 1,
                list(request.bits),
                WriteCoilsResponse(request.start, len(request.bits)),
            )
        return ExceptionResponse(0, EXC_ILLEGAL_FUNCTION)

    def _read_holding(self, request: ReadHoldingRequest):
        first = request.start + 1
        block = next(
            (b for b in self._holding_blocks if b[0] <= first <= b[1]), None
        )
        if block is None:
            return ExceptionResponse(request.function, EXC_ILLEGAL_ADDRESS)
        if not 1 <= request.count <= regmap.READ_LIMIT:
            return ExceptionResponse(request.function, EXC_ILLEGAL_VALUE)
        if first + request.count - 1 > block[1]:
            return ExceptionResponse(request.function, EXC_ILLEGAL_VALUE)
        words = self.state.image.holding[first : first + request.count]
        return ReadHoldingResponse(tuple(words))

    def _read_coils(self, request: ReadCoilsRequest):
        first = request.start + 1
        lo, hi = self._coil_range
        if not lo <= first <= hi:
            return ExceptionResponse(request.function, EXC_ILLEGAL_ADDRESS)
        if request.count < 1:
            return ExceptionResponse(request.function, EXC_ILLEGAL_VALUE)
        if first + request.count - 1 > hi:
            return ExceptionResponse(request.function, EXC_ILLEGAL_VALUE)
        bits = self.state.image.coils[first : first + request.count]
        return ReadCoilsResponse(tuple(bits))

    def _write_registers(self, function: int, first: int, values: list[int], response):
        lo, hi = self._writable_registers
        if not lo <= first <= hi:
            return ExceptionResponse(function, EXC_ILLEGAL_ADDRESS)
        if first + len(values) - 1 > hi:
            return ExceptionResponse(function, EXC_ILLEGAL_VALUE)
        for offset, value in enumerate(values):
            node, _ = self.meter_map.setpoints[first - lo + offset]
            self.state.setpoints_kw[node] = value
        if self._refresh == "on-write":
            self._refresh_image()
        else:
            self.state.image = build_image(
                self.state.solution,
                self.state.setpoints_kw,
                self.state.config,
                self.meter_map,
                self.state.stale,
                self.high_word_first,
            )
        return response

    def _write_coils(self, function: int, first: int, bits: list[bool], response):
        lo, hi = self._coil_range
        if not lo <= first <= hi:
            return ExceptionResponse(function, EXC_ILLEGAL_ADDRESS)
        if first + len(bits) - 1 > hi:
            return ExceptionResponse(function, EXC_ILLEGAL_VALUE)
        config = self.state.config
        for offset, closed in enumerate(bits):
            name = self.model.switch_names[first - lo + offset]
            config = config.with_switch(name, closed)
        self.state.config = config
        if self._refresh == "on-write":
            self._refresh_image()
        else:
            self.state.image = build_image(
                self.state.solution,
                self.state.setpoints_kw,
                self.state.config,
                self.meter_map,
                self.state.stale,
                self.high_word_first,
            )
        return response


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def serve(
    model: FeederModel,
    meter_map: MeterMap | None = None,
    bind: tuple[str, int] = ("127.0.0.1", DEFAULT_PORT),
    refresh: str = "on-write",
    high_word_first: bool = True,
) -> FeederServer:
    """Start a server and return its handle (caller closes)."""
    return FeederServer(model, meter_map, bind, refresh, high_word_first).start()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridbed-server", description="Serve a feeder simulation over Modbus/TCP"
    )
    parser.add_argument("--feeder", required=True, help="feeder description JSON file")
    parser.add_argument("--bind", default=f"127.0.0.1:{DEFAULT_PORT}", help="addr:port")
    parser.add_argument(
        "--refresh",
        default="on-write",
        help="voltage refresh policy: on-write or tick:<ms>",
    )
    parser.add_argument(
        "--float-order",
        choices=("hi-lo", "lo-hi"),
        default="hi-lo",
        help="word order of the FLOAT32 mirror",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    host, _, port = args.bind.rpartition(":")
    model = load_feeder_file(args.feeder)
    server = serve(
        model,
        bind=(host or "127.0.0.1", int(port)),
        refresh=args.refresh,
        high_word_first=args.float_order == "hi-lo",
    )
    print(f"serving {args.feeder} on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.close()
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
