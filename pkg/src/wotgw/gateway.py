"""The gateway web server: guard -> cache -> codec -> forward -> decode.

Client requests for /devices/{id}/... run the pipeline against registered
devices. The coded (short-key) JSON form exists only on the gateway-device
leg; clients always see long keys. When the client-facing listener's address
family differs from the device's, forwarding goes through the SOCKS relay;
matching families connect directly. Devices that stop answering are reported
with a 503 outage body and probed back to health.
"""

from __future__ import annotations

import http.client
import ipaddress
import json
import logging
import math
import socket
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from wotgw import codec
from wotgw.cache import CacheEntry, CacheKey, ResponseCache
from wotgw.config import DeviceConfig, GatewayConfig, parse_hostport
from wotgw.guard import DosGuard
from wotgw.socks import (
    FAMILY_V4,
    FAMILY_V6,
    Candidate,
    ResolverPolicy,
    SocksError,
    SocksRelayServer,
    load_static_table,
    socks_connect,
)

log = logging.getLogger("wotgw.gateway")

HEALTH_UNKNOWN = "unknown"
HEALTH_UP = "up"
HEALTH_DOWN = "down"

_AF = {FAMILY_V4: socket.AF_INET, FAMILY_V6: socket.AF_INET6}


class DuplicateDeviceError(ValueError):
    pass


class DeviceUnavailable(Exception):
    """Connect or read failure talking to the device."""


class DeviceTimeout(DeviceUnavailable):
    pass


class DeviceProtocolError(Exception):
    """The device answered, but not with parseable HTTP/JSON."""


@dataclass
class DeviceRecord:
    device_id: str
    host: str
    port: int
    family: str | None  # v4 | v6 | None until resolved
    mapping: codec.MappingDictionary
    ttl: float | None = None
    health: str = HEALTH_UNKNOWN
    health_path: str = "/status"
    last_probe: float | None = None
    consecutive_failures: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def describe(self) -> dict:
        return {
            "device_id": self.device_id,
            "endpoint": f"[{self.host}]:{self.port}" if ":" in self.host else f"{self.host}:{self.port}",
            "family": self.family or "unknown",
            "health": self.health,
            "last_probe": self.last_probe,
            "consecutive_failures": self.consecutive_failures,
            "mapping": self.mapping.name,
        }


class DeviceRegistry:
    def __init__(self):
        self._devices: dict[str, DeviceRecord] = {}
        self._lock = threading.Lock()

    def register(self, record: DeviceRecord, replace: bool = False) -> bool:
        """Add a device; returns True when an existing record was replaced."""
        with self._lock:
            existed = record.device_id in self._devices
            if existed and not replace:
                raise DuplicateDeviceError(record.device_id)
            self._devices[record.device_id] = record
            return existed

    def get(self, device_id: str) -> DeviceRecord | None:
        with self._lock:
            return self._devices.get(device_id)

    def all(self) -> list[DeviceRecord]:
        with self._lock:
            return list(self._devices.values())


def _normalize_client_ip(host: str) -> str:
    try:
        addr = ipaddress.ip_address(host.split("%")[0])
    except ValueError:
        return host
    mapped = getattr(addr, "ipv4_mapped", None)
    return (mapped or addr).compressed


class Gateway:
    """Pipeline state shared by all listeners: registry, cache, guard, relay."""

    def __init__(self, config: GatewayConfig):
        self.config = config
        self.registry = DeviceRegistry()
        self.cache = ResponseCache(
            max_entries=config.cache_max_entries,
            max_bytes=config.cache_max_bytes,
            default_ttl=config.cache_default_ttl_seconds,
        )
        self.guard = DosGuard(
            rate_limit=config.dos_rate_limit,
            window_seconds=config.dos_window_seconds,
            repeat_limit=config.dos_repeat_limit,
            block_seconds=config.dos_block_seconds,
        )
        self.resolver = self._build_resolver(config.socks_resolver)
        self.relay: SocksRelayServer | None = None
        if config.relay_enabled:
            self.relay = SocksRelayServer(
                listen_v4=config.socks_listen_v4,
                listen_v6=config.socks_listen_v6,
                resolver=self.resolver,
                connect_timeout=config.request_timeout_seconds,
            )
        self._servers: list[ThreadingHTTPServer] = []
        self._threads: list[threading.Thread] = []
        self._prober: threading.Thread | None = None
        self._stop = threading.Event()
        self._stats_lock = threading.Lock()
        self.requests_total = 0
        self.client_leg_bytes = 0
        self.device_leg_bytes = 0
        self._inflight: dict[CacheKey, threading.Event] = {}
        self._inflight_lock = threading.Lock()

    @staticmethod
    def _build_resolver(spec: str) -> ResolverPolicy:
        if spec == "system":
            return ResolverPolicy()
        path = spec.split(":", 1)[1]
        with open(path, encoding="utf-8") as fh:
            return ResolverPolicy(static_table=load_static_table(fh.read()))

    # -- lifecycle --

    def start(self) -> "Gateway":
        for cfg in self.config.devices:
            self.register_device_config(cfg)
        if self.relay is not None:
            self.relay.start()
        for family, spec in ((FAMILY_V4, self.config.listen_v4), (FAMILY_V6, self.config.listen_v6)):
            if spec is None:
                continue
            server = _GatewayServer(spec, _AF[family], self, family)
            self._servers.append(server)
            t = threading.Thread(
                target=lambda srv=server: srv.serve_forever(poll_interval=0.05),
                name=f"gateway-http-{family}",
                daemon=True,
            )
            t.start()
            self._threads.append(t)
        if not self._servers:
            raise ValueError("gateway needs at least one HTTP listener")
        if self.config.probe_interval_seconds > 0:
            self._prober = threading.Thread(target=self._probe_loop, name="gateway-prober", daemon=True)
            self._prober.start()
        log.info(
            "gateway ready listen_v4=%s listen_v6=%s relay=%s",
            self.listen_address(FAMILY_V4),
            self.listen_address(FAMILY_V6),
            "on" if self.relay else "off",
        )
        return self

    def stop(self) -> None:
        self._stop.set()
        for server in self._servers:
            server.shutdown()
            server.server_close()
        self._servers.clear()
        if self.relay is not None:
            self.relay.stop()
        if self._prober:
            self._prober.join(timeout=5)

    def listen_address(self, family: str) -> tuple[str, int] | None:
        for server in self._servers:
            if server.listener_family == family:
                return server.server_address[:2]
        return None

    # -- registration --

    def register_device_config(self, cfg: DeviceConfig, replace: bool = False) -> DeviceRecord:
        host, port, family = parse_hostport(cfg.endpoint)
        if cfg.mapping_file is not None:
            mapping = codec.load_mapping_file(cfg.mapping_file, name=cfg.device_id)
        elif cfg.mapping_inline is not None:
            mapping = codec.MappingDictionary(
                tuple(cfg.mapping_inline.items()), name=cfg.device_id
            )
        else:
            mapping = codec.EMPTY_MAPPING
        record = DeviceRecord(
            device_id=cfg.device_id,
            host=host,
            port=port,
            family=family,
            mapping=mapping,
            ttl=cfg.ttl_seconds,
            health_path=cfg.health_path,
        )
        self.register_device(record, replace=replace)
        return record

    def register_device(self, record: DeviceRecord, replace: bool = False) -> None:
        replaced = self.registry.register(record, replace=replace)
        if replaced:
            self.cache.invalidate_device(record.device_id)
        log.info("registered device id=%s endpoint=%s:%s family=%s",
                 record.device_id, record.host, record.port, record.family or "unknown")

    # -- health --

    def _probe_loop(self) -> None:
        while not self._stop.wait(self.config.probe_interval_seconds):
            for record in self.registry.all():
                try:
                    self.probe_device(record.device_id)
                except Exception:
                    log.exception("probe failed for %s", record.device_id)
            self.guard.purge_idle(time.monotonic(), self.config.dos_idle_purge_seconds)

    def probe_device(self, device_id: str) -> str:
        """Issue the device's health request and update its health state."""
        record = self.registry.get(device_id)
        if record is None:
            raise KeyError(device_id)
        try:
            status, _, _ = self._exchange_direct(record, "GET", record.health_path, b"")
            ok = 200 <= status < 300
        except (DeviceUnavailable, DeviceProtocolError):
            ok = False
        with record.lock:
            record.last_probe = time.monotonic()
            if ok:
                record.consecutive_failures = 0
                record.health = HEALTH_UP
            else:
                record.consecutive_failures += 1
                if record.health == HEALTH_UNKNOWN or (
                    record.health == HEALTH_UP
                    and record.consecutive_failures >= self.config.failure_threshold
                ):
                    record.health = HEALTH_DOWN
        return record.health

    def _note_forward_failure(self, record: DeviceRecord) -> None:
        with record.lock:
            record.consecutive_failures += 1
            if record.health == HEALTH_UNKNOWN or (
                record.health == HEALTH_UP
                and record.consecutive_failures >= self.config.failure_threshold
            ):
                record.health = HEALTH_DOWN

    def _note_forward_success(self, record: DeviceRecord) -> None:
        with record.lock:
            record.consecutive_failures = 0
            record.health = HEALTH_UP

    # -- forwarding --

    def _candidates(self, record: DeviceRecord) -> list[Candidate]:
        if record.family is not None:
            return [Candidate(record.family, record.host, record.port)]
        from wotgw.socks import SocksConnectRequest, resolve_target

        candidates = resolve_target(
            SocksConnectRequest("domain", record.host, record.port), self.resolver
        )
        record.family = candidates[0].family if len({c.family for c in candidates}) == 1 else record.family
        return candidates

    def _connect_direct(self, candidates: list[Candidate], timeout: float) -> socket.socket:
        last: Exception = DeviceUnavailable("no candidates")
        for cand in candidates:
            sock = socket.socket(_AF[cand.family], socket.SOCK_STREAM)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(timeout)
            try:
                sock.connect((cand.address, cand.port))
                return sock
            except OSError as exc:
                sock.close()
                last = exc
        raise DeviceUnavailable(f"connect failed: {last}")

    def _exchange_direct(self, record: DeviceRecord, method: str, path: str, body: bytes):
        candidates = self._candidates(record)
        timeout = self.config.request_timeout_seconds
        try:
            sock = self._connect_direct(candidates, timeout)
        except socket.timeout as exc:
            raise DeviceTimeout(str(exc))
        return self._http_over_socket(sock, record, method, path, body, timeout)

    def forward_to_device(
        self,
        record: DeviceRecord,
        method: str,
        path: str,
        body: bytes,
        listener_family: str,
    ) -> tuple[int, str, bytes]:
        """Send the coded request to the device, directly or through the relay.

        Returns (status, content_type, body). Raises DeviceTimeout,
        DeviceUnavailable, or DeviceProtocolError.
        """
        candidates = self._candidates(record)
        timeout = self.config.request_timeout_seconds
        same_family = [c for c in candidates if c.family == listener_family]
        if same_family:
            sock = self._connect_direct(same_family, timeout)
        elif self.relay is not None:
            relay_addr = self.relay.listen_address(listener_family) or next(
                addr
                for addr in (
                    self.relay.listen_address(FAMILY_V4),
                    self.relay.listen_address(FAMILY_V6),
                )
                if addr is not None
            )
            try:
                sock = socks_connect(relay_addr, record.host, record.port, timeout)
            except (SocksError, OSError) as exc:
                raise DeviceUnavailable(f"relay connect failed: {exc}")
        else:
            raise DeviceUnavailable(
                f"device {record.device_id} is {candidates[0].family}-only, "
                f"client leg is {listener_family}, and the relay is disabled"
            )
        return self._http_over_socket(sock, record, method, path, body, timeout)

    def _http_over_socket(
        self,
        sock: socket.socket,
        record: DeviceRecord,
        method: str,
        path: str,
        body: bytes,
        timeout: float,
    ) -> tuple[int, str, bytes]:
        sock.settimeout(timeout)
        conn = http.client.HTTPConnection(record.host, record.port, timeout=timeout)
        conn.sock = sock
        try:
            headers = {"Connection": "close"}
            if body:
                headers["Content-Type"] = "application/json"
            conn.request(method, path, body=body if body else None, headers=headers)
            resp = conn.getresponse()
            data = resp.read()
            return resp.status, resp.getheader("Content-Type", "application/json"), data
        except (socket.timeout, TimeoutError) as exc:
            raise DeviceTimeout(f"device timed out: {exc}")
        except (ConnectionError, BrokenPipeError, OSError) as exc:
            # RemoteDisconnected subclasses ConnectionResetError: a device that
            # died mid-response lands here, not in the protocol-error bucket.
            raise DeviceUnavailable(f"device connection failed: {exc}")
        except http.client.HTTPException as exc:
            raise DeviceProtocolError(f"malformed HTTP from device: {exc}")
        finally:
            conn.close()

    # -- the pipeline --

    def handle_client_request(
        self,
        client_ip: str,
        listener_family: str,
        method: str,
        path: str,
        headers,
        body: bytes,
    ) -> tuple[int, list[tuple[str, str]], bytes]:
        now = time.monotonic()
        with self._stats_lock:
            self.requests_total += 1

        body_digest = codec.digest_bytes(body)
        request_digest = codec.digest_bytes(
            f"{method}\n{path}\n{body_digest}".encode("utf-8")
        )
        decision = self.guard.record_and_check(client_ip, request_digest, now)
        if not decision.allowed:
            retry = max(1, math.ceil(decision.retry_after or 1))
            return self._json_response(
                429,
                {"error": "rate_limited", "reason": decision.reason},
                extra=[("Retry-After", str(retry))],
            )

        parts = path.split("/", 3)
        if len(parts) < 4 or parts[1] != "devices" or not parts[2]:
            return self._json_response(404, {"error": "not_found"})
        device_id, device_path = parts[2], "/" + parts[3]
        record = self.registry.get(device_id)
        if record is None:
            return self._json_response(404, {"error": "unknown_device", "device": device_id})

        if record.health == HEALTH_DOWN:
            return self._outage_response(record)

        parsed_body = None
        body_is_json = False
        if body:
            try:
                parsed_body = codec.parse_json(body)
                body_is_json = True
            except (ValueError, TypeError):
                body_is_json = False

        cache_control = (headers.get("Cache-Control") or headers.get("Pragma") or "").lower()
        bypass = "no-cache" in cache_control
        cacheable = (
            self.config.cache_enabled
            and (method == "GET" or (method == "POST" and body_is_json))
        )
        key = CacheKey.for_request(device_id, method, device_path, body)

        owner_event: threading.Event | None = None
        if cacheable and not bypass:
            entry = self.cache.get(key, time.monotonic())
            if entry is not None:
                return self._device_response(record, entry.status, entry.body, "hit", count_client=len(body))
            owner_event = self._claim_inflight(key)
            if owner_event is None:
                # another handler is already filling this key
                entry = self._await_inflight(key)
                if entry is not None:
                    return self._device_response(record, entry.status, entry.body, "hit", count_client=len(body))
        try:
            return self._forward_pipeline(
                record, method, device_path, body, parsed_body, body_is_json,
                listener_family, cacheable, key,
            )
        finally:
            if owner_event is not None:
                self._release_inflight(key, owner_event)

    def _claim_inflight(self, key: CacheKey) -> threading.Event | None:
        with self._inflight_lock:
            if key in self._inflight:
                return None
            event = threading.Event()
            self._inflight[key] = event
            return event

    def _await_inflight(self, key: CacheKey) -> CacheEntry | None:
        with self._inflight_lock:
            event = self._inflight.get(key)
        if event is None or not event.wait(self.config.request_timeout_seconds + 1.0):
            return None
        return self.cache.get(key, time.monotonic())

    def _release_inflight(self, key: CacheKey, event: threading.Event) -> None:
        with self._inflight_lock:
            self._inflight.pop(key, None)
        event.set()

    def _forward_pipeline(
        self,
        record: DeviceRecord,
        method: str,
        device_path: str,
        body: bytes,
        parsed_body,
        body_is_json: bool,
        listener_family: str,
        cacheable: bool,
        key: CacheKey,
    ) -> tuple[int, list[tuple[str, str]], bytes]:
        if body_is_json:
            coded = codec.encode_keys(parsed_body, record.mapping)
            body_out = codec.canonical_bytes(coded)
        else:
            body_out = body

        try:
            status, content_type, raw = self.forward_to_device(
                record, method, device_path, body_out, listener_family
            )
        except DeviceTimeout:
            self._note_forward_failure(record)
            return self._outage_response(record, status=504, label="device_timeout")
        except DeviceUnavailable:
            self._note_forward_failure(record)
            return self._outage_response(record)
        except DeviceProtocolError as exc:
            return self._json_response(
                502, {"error": "device_protocol_error", "device": record.device_id, "detail": str(exc)},
                device=record,
            )
        self._note_forward_success(record)
        with self._stats_lock:
            self.device_leg_bytes += len(body_out) + len(raw)

        decoded = raw
        if raw:
            try:
                decoded_value = codec.decode_keys(codec.parse_json(raw), record.mapping)
                decoded = codec.canonical_bytes(decoded_value)
            except (ValueError, TypeError):
                if 200 <= status < 300:
                    return self._json_response(
                        502,
                        {"error": "device_protocol_error", "device": record.device_id,
                         "detail": "unparseable device response body"},
                        device=record,
                    )
                # non-2xx with a non-JSON body passes through untouched

        if cacheable and 200 <= status < 300:
            ttl = record.ttl if record.ttl is not None else self.cache.default_ttl
            self.cache.put(key, CacheEntry(status, decoded, time.monotonic(), ttl))

        return self._device_response(record, status, decoded, "miss", count_client=len(body))

    # -- response helpers --

    def _outage_response(self, record: DeviceRecord, status: int = 503, label: str = "device_unavailable"):
        return self._json_response(
            status, {"status": label, "device": record.device_id}, device=record
        )

    def _json_response(self, status, value, extra=None, device=None, cache_state=None):
        body = codec.canonical_bytes(value)
        headers = [("Content-Type", "application/json")]
        if device is not None:
            headers.append(("X-WoT-Device", device.device_id))
        if cache_state is not None:
            headers.append(("X-WoT-Cache", cache_state))
        if extra:
            headers.extend(extra)
        return status, headers, body

    def _device_response(self, record, status, body: bytes, cache_state: str, count_client: int = 0):
        with self._stats_lock:
            self.client_leg_bytes += count_client + len(body)
        headers = [
            ("Content-Type", "application/json"),
            ("X-WoT-Device", record.device_id),
            ("X-WoT-Cache", cache_state),
        ]
        return status, headers, body

    # -- admin --

    def admin_request(self, method: str, path: str, body: bytes):
        if method == "GET" and path == "/admin/devices":
            return self._json_response(
                200, {"devices": [r.describe() for r in self.registry.all()]}
            )
        if method == "GET" and path == "/admin/stats":
            return self._json_response(200, self.stats())
        if method == "PUT" and path.startswith("/admin/devices/"):
            device_id = path[len("/admin/devices/") :]
            if not device_id or "/" in device_id:
                return self._json_response(404, {"error": "not_found"})
            try:
                doc = json.loads(body or b"{}")
                cfg = DeviceConfig(
                    device_id=device_id,
                    endpoint=doc["endpoint"],
                    mapping_file=doc.get("mapping_file"),
                    mapping_inline=doc.get("mapping"),
                    ttl_seconds=doc.get("ttl_seconds"),
                    health_path=doc.get("health_path", "/status"),
                )
                self.register_device_config(cfg, replace=bool(doc.get("replace", False)))
            except DuplicateDeviceError:
                return self._json_response(409, {"error": "duplicate_device", "device": device_id})
            except (KeyError, TypeError, ValueError) as exc:
                return self._json_response(400, {"error": "bad_registration", "detail": str(exc)})
            return self._json_response(200, {"registered": device_id})
        return self._json_response(404, {"error": "not_found"})

    def stats(self) -> dict:
        now = time.monotonic()
        with self._stats_lock:
            totals = {
                "requests_total": self.requests_total,
                "client_leg_bytes": self.client_leg_bytes,
                "device_leg_bytes": self.device_leg_bytes,
            }
        return {
            **totals,
            "cache": self.cache.stats(),
            "guard": self.guard.stats(now),
            "relay": self.relay.stats.snapshot() if self.relay else None,
            "devices": {r.device_id: r.health for r in self.registry.all()},
        }


class _GatewayServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, bind: tuple[str, int], family: int, gateway: Gateway, listener_family: str):
        self.address_family = family
        self.gateway = gateway
        self.listener_family = listener_family
        super().__init__(bind, _GatewayHandler)


class _GatewayHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "wotgw/0.1"
    # one buffered write per response; a bare header write followed by a small
    # body write trips Nagle + delayed-ACK stalls on loopback
    wbufsize = 64 * 1024
    disable_nagle_algorithm = True

    def log_message(self, fmt, *args):
        log.debug("%s %s", self.address_string(), fmt % args)

    def _read_body(self) -> bytes | None:
        if self.headers.get("Transfer-Encoding", "").lower() == "chunked":
            return None
        length = int(self.headers.get("Content-Length", "0") or "0")
        return self.rfile.read(length) if length else b""

    def _dispatch(self):
        body = self._read_body()
        if body is None:
            self._write_response(411, [("Content-Type", "application/json")],
                                 b'{"error":"length_required"}')
            return
        gateway: Gateway = self.server.gateway
        try:
            if self.path == "/admin" or self.path.startswith("/admin/"):
                status, headers, payload = gateway.admin_request(self.command, self.path, body)
            else:
                client_ip = _normalize_client_ip(self.client_address[0])
                status, headers, payload = gateway.handle_client_request(
                    client_ip,
                    self.server.listener_family,
                    self.command,
                    self.path,
                    self.headers,
                    body,
                )
        except Exception:
            log.exception("pipeline failure for %s %s", self.command, self.path)
            status, headers, payload = 500, [("Content-Type", "application/json")], b'{"error":"internal"}'
        self._write_response(status, headers, payload)

    def _write_response(self, status, headers, payload: bytes):
        try:
            self.send_response(status)
            for name, value in headers:
                self.send_header(name, value)
            self.send_header("Content-Length", str(len(payload)))
            self.end_headers()
            self.wfile.write(payload)
        except OSError:
            self.close_connection = True

    do_GET = _dispatch
    do_POST = _dispatch
    do_PUT = _dispatch
    do_DELETE = _dispatch
    do_PATCH = _dispatch
