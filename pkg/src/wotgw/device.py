"""Miniature embedded-device web server emulating a power-sensor API.

Speaks coded JSON on the wire: POST /power takes a coded query and returns
the coded readings array; GET /status answers {"status":"ok"}. Latency,
seeded failure injection (connection reset), and a power-save idle mode are
configurable so gateway behavior is observable and reproducible. The server
is intentionally weak — one OS thread per connection, no pipelining — which
is exactly what the gateway's cache is meant to protect.
"""

from __future__ import annotations

import io
import json
import logging
import random
import socket
import struct
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from wotgw import codec
from wotgw.socks import FAMILY_V4, FAMILY_V6

log = logging.getLogger("wotgw.device")

# The canonical power-sensor key mapping; "KWh" deliberately has no short code
# and passes through coding untouched.
POWER_SENSOR_MAPPING = codec.MappingDictionary(
    (
        ("NoOfDevices", "ND"),
        ("deviceName", "DN"),
        ("currentWatts", "CW"),
        ("maxWattage", "MW"),
    ),
    name="power-sensor",
)


@dataclass(frozen=True)
class PowerSensorReading:
    device_name: str
    current_watts: float
    kwh: float
    max_wattage: float

    def __post_init__(self):
        if not 0 <= self.current_watts <= self.max_wattage:
            raise ValueError(
                f"currentWatts {self.current_watts} outside [0, {self.max_wattage}]"
            )
        if self.kwh < 0:
            raise ValueError(f"KWh must be nonnegative, got {self.kwh}")

    def to_value(self) -> dict:
        return {
            "deviceName": self.device_name,
            "currentWatts": self.current_watts,
            "KWh": self.kwh,
            "maxWattage": self.max_wattage,
        }

    @classmethod
    def from_value(cls, doc: dict) -> "PowerSensorReading":
        return cls(
            device_name=doc["deviceName"],
            current_watts=doc["currentWatts"],
            kwh=doc["KWh"],
            max_wattage=doc["maxWattage"],
        )


DEFAULT_READINGS = (
    PowerSensorReading("ComputerAndScreen", 50.52, 5.835, 100.56),
    PowerSensorReading("Fridge", 86.28, 4.421, 288.92),
)


def answer_power_query(coded_request, readings, mapping) -> list:
    """Build the coded readings array for a coded power query.

    The request must decode to {"values": [{"NoOfDevices": [n]}, ...]} with
    integer n >= 0; the reply holds the first min(n, available) readings,
    coded. Raises ValueError for anything else.
    """
    plain = codec.decode_keys(coded_request, mapping)
    if not isinstance(plain, dict) or not isinstance(plain.get("values"), list):
        raise ValueError("expected an object with a 'values' array")
    values = plain["values"]
    if not values or not isinstance(values[0], dict):
        raise ValueError("'values' must hold at least one object")
    count = values[0].get("NoOfDevices")
    if (
        not isinstance(count, list)
        or len(count) != 1
        or isinstance(count[0], bool)
        or not isinstance(count[0], int)
        or count[0] < 0
    ):
        raise ValueError("'NoOfDevices' must be a one-element array of a nonnegative integer")
    n = min(count[0], len(readings))
    return [codec.encode_keys(r.to_value(), mapping) for r in readings[:n]]


class _SimHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "wotgw-sim/0.1"
    wbufsize = 64 * 1024  # single write per response, avoids Nagle stalls
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _sim(self) -> "DeviceSimulator":
        return self.server.simulator

    def _begin_request(self) -> bool:
        """Count the request, apply wake/latency delays, draw failure injection.

        Returns False when the request was aborted by injection.
        """
        sim = self._sim()
        now = time.monotonic()
        with sim._lock:
            sim.request_counter += 1
            idle = now - sim._last_request_at
            sim._last_request_at = now
            fail = sim.failure_rate > 0 and sim._rng.random() < sim.failure_rate
            latency = sim.base_latency
            napping = sim.power_save_idle > 0 and idle >= sim.power_save_idle
            wake = sim.wake_latency if napping else 0.0
        if fail:
            self._abort_connection()
            return False
        if wake:
            time.sleep(wake)
        if latency:
            time.sleep(latency)
        return True

    def _abort_connection(self):
        """Reset the TCP connection without an HTTP response."""
        self.close_connection = True
        try:
            self.connection.setsockopt(
                socket.SOL_SOCKET, socket.SO_LINGER, struct.pack("ii", 1, 0)
            )
            self.connection.close()
        except OSError:
            pass
        # neutralize the handler's file objects so the base class teardown
        # does not touch the dead socket
        self.rfile = io.BytesIO()
        self.wfile = io.BytesIO()

    def _send_json(self, status: int, value) -> None:
        body = codec.canonical_bytes(value)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if not self._begin_request():
            return
        if self.path == "/status":
            self._send_json(200, {"status": "ok"})
        else:
            self._send_json(404, {"error": "not_found"})

    def do_POST(self):
        if not self._begin_request():
            return
        sim = self._sim()
        if self.path != "/power":
            self._send_json(404, {"error": "not_found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            doc = codec.parse_json(self.rfile.read(length))
            reply = answer_power_query(doc, sim.readings, sim.mapping)
        except (ValueError, TypeError, KeyError) as exc:
            log.debug("bad power query: %s", exc)
            coded_error = codec.encode_keys({"error": "bad_request"}, sim.mapping)
            self._send_json(400, coded_error)
            return
        self._send_json(200, reply)


class _SimServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bind: tuple[str, int], family: int, simulator: "DeviceSimulator"):
        self.address_family = family
        self.simulator = simulator
        super().__init__(bind, _SimHandler)


class DeviceSimulator:
    """Runnable simulator handle: lifecycle, counters, and behavior injection."""

    def __init__(
        self,
        bind: tuple[str, int] = ("127.0.0.1", 0),
        readings=DEFAULT_READINGS,
        mapping: codec.MappingDictionary = POWER_SENSOR_MAPPING,
        base_latency: float = 0.0,
        failure_rate: float = 0.0,
        seed: int = 0,
        power_save_idle: float = 30.0,
        wake_latency: float = 0.1,
    ):
        if not 0.0 <= failure_rate <= 1.0:
            raise ValueError("failure_rate must be within [0, 1]")
        self.readings = tuple(readings)
        self.mapping = mapping
        self.base_latency = base_latency
        self.failure_rate = failure_rate
        self.power_save_idle = power_save_idle
        self.wake_latency = wake_latency
        self.request_counter = 0
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        self._last_request_at = time.monotonic()
        host = bind[0]
        family = socket.AF_INET6 if ":" in host else socket.AF_INET
        self._server = _SimServer(bind, family, self)
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def family(self) -> str:
        return FAMILY_V6 if self._server.address_family == socket.AF_INET6 else FAMILY_V4

    @property
    def request_count(self) -> int:
        with self._lock:
            return self.request_counter

    def start(self) -> "DeviceSimulator":
        self._thread = threading.Thread(
            target=lambda: self._server.serve_forever(poll_interval=0.05),
            name="device-sim",
            daemon=True,
        )
        self._thread.start()
        log.info("simulator listening addr=%s family=%s", self.address, self.family)
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def inject_behavior(self, latency: float | None = None, failure_rate: float | None = None) -> None:
        """Adjust response latency and per-request failure probability at runtime."""
        with self._lock:
            if latency is not None:
                self.base_latency = latency
            if failure_rate is not None:
                if not 0.0 <= failure_rate <= 1.0:
                    raise ValueError("failure_rate must be within [0, 1]")
                self.failure_rate = failure_rate


def serve(**kwargs) -> DeviceSimulator:
    """Build and start a simulator; returns the running handle."""
    return DeviceSimulator(**kwargs).start()


def load_readings(text: str) -> tuple[PowerSensorReading, ...]:
    """Parse a readings file: a JSON array of long-key reading objects."""
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ValueError("readings file must hold a JSON array")
    return tuple(PowerSensorReading.from_value(item) for item in doc)
