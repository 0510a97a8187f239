"""Carries SCSI exchanges between the implant (host role) and the emulator
(device role) over in-process loopback or TCP.

TCP wire framing, big-endian lengths:

    request:  "UCAT" | cdb_len (1) | cdb bytes | data_out_len (4) | data_out
    response: status (1) | data_in_len (4) | data_in

Loopback routes through the same codec so byte-level behaviour matches.
Exchanges on one handle are strictly serial, and the elapsed time reported
by submit() is measured with a monotonic clock from submission to receipt
of the status byte; the delayed-ACK signal rides on that latency.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable
from urllib.parse import urlsplit

from .datagram import Datagram  # noqa: F401  (re-exported convenience)
from .errors import (BadEndpoint, ConnectionRefused, TransportClosed,
                     TransportTimeout)
from .scsi import BLOCK_SIZE, Cdb, parse_cdb, serialize_cdb

MAGIC = b"UCAT"

STATUS_GOOD = 0x00
STATUS_CHECK_CONDITION = 0x02

DEFAULT_TIMEOUT = 5.0
MAX_DATA_BLOCKS = 64  # framing supports data phases up to 64 blocks


@dataclass(frozen=True)
class ScsiExchange:
    cdb: Cdb
    data_out: bytes = b""


@dataclass(frozen=True)
class ScsiResponse:
    status: int
    data_in: bytes = b""

    @property
    def good(self) -> bool:
        return self.status == STATUS_GOOD


ExchangeHandler = Callable[[ScsiExchange], ScsiResponse]


@dataclass
class IoCounters:
    """Byte/operation accounting for one transport handle."""
    read_ops: int = 0
    write_ops: int = 0
    bytes_sent: int = 0
    bytes_received: int = 0

    @property
    def io_bytes(self) -> int:
        return self.bytes_sent + self.bytes_received


def encode_request(exchange: ScsiExchange) -> bytes:
    cdb_bytes = serialize_cdb(exchange.cdb)
    return b"".join([
        MAGIC,
        bytes([len(cdb_bytes)]),
        cdb_bytes,
        struct.pack(">I", len(exchange.data_out)),
        exchange.data_out,
    ])


def decode_request(read: Callable[[int], bytes]) -> ScsiExchange:
    """Decode one request from a reader returning exactly n bytes."""
    magic = read(4)
    if magic != MAGIC:
        raise BadEndpoint(f"bad request magic {magic!r}")
    cdb_len = read(1)[0]
    cdb = parse_cdb(read(cdb_len))
    data_len, = struct.unpack(">I", read(4))
    if data_len > MAX_DATA_BLOCKS * BLOCK_SIZE:
        raise BadEndpoint(f"data phase too large: {data_len}")
    data_out = read(data_len) if data_len else b""
    return ScsiExchange(cdb, data_out)


def encode_response(resp: ScsiResponse) -> bytes:
    return bytes([resp.status]) + struct.pack(">I", len(resp.data_in)) + resp.data_in


def decode_response(read: Callable[[int], bytes],
                    on_status: Callable[[], None] | None = None) -> ScsiResponse:
    status = read(1)[0]
    if on_status is not None:
        on_status()
    data_len, = struct.unpack(">I", read(4))
    data_in = read(data_len) if data_len else b""
    return ScsiResponse(status, data_in)


class Transport:
    """Base handle: serial submit() of SCSI exchanges with latency measured."""

    def __init__(self):
        self._lock = threading.Lock()
        self._closed = False
        self.counters = IoCounters()

    def submit(self, exchange: ScsiExchange) -> tuple[ScsiResponse, float]:
        """Run one exchange; returns (response, elapsed seconds)."""
        with self._lock:
            if self._closed:
                raise TransportClosed("transport is closed")
            resp, elapsed = self._do_submit(exchange)
        if exchange.cdb.is_read:
            self.counters.read_ops += 1
        elif exchange.cdb.is_write:
            self.counters.write_ops += 1
        return resp, elapsed

    def _do_submit(self, exchange: ScsiExchange) -> tuple[ScsiResponse, float]:
        raise NotImplementedError

    def close(self):
        self._closed = True


class LoopbackTransport(Transport):
    """In-process handle bound to an emulator; still round-trips every
    exchange through the byte codec."""

    def __init__(self, handler: ExchangeHandler):
        super().__init__()
        self._handler = handler

    def _do_submit(self, exchange: ScsiExchange) -> tuple[ScsiResponse, float]:
        wire_req = encode_request(exchange)
        self.counters.bytes_sent += len(wire_req)
        reader = _BufferReader(wire_req)
        start = time.monotonic()
        decoded = decode_request(reader.read)
        resp = self._handler(decoded)
        wire_resp = encode_response(resp)
        elapsed = time.monotonic() - start
        self.counters.bytes_received += len(wire_resp)
        return decode_response(_BufferReader(wire_resp).read), elapsed


class _BufferReader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def read(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise TransportClosed("short frame")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        super().__init__()
        self._sock = sock
        self._sock.settimeout(timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise TransportTimeout("timed out waiting for response")
            except OSError as e:
                raise TransportClosed(str(e))
            if not chunk:
                raise TransportClosed("connection closed by peer")
            buf.extend(chunk)
        self.counters.bytes_received += n
        return bytes(buf)

    def _do_submit(self, exchange: ScsiExchange) -> tuple[ScsiResponse, float]:
        wire = encode_request(exchange)
        start = time.monotonic()
        try:
            self._sock.sendall(wire)
        except OSError as e:
            raise TransportClosed(str(e))
        self.counters.bytes_sent += len(wire)
        elapsed_box: list[float] = []
        resp = decode_response(
            self._recv_exact,
            on_status=lambda: elapsed_box.append(time.monotonic() - start))
        return resp, elapsed_box[0]

    def close(self):
        super().close()
        try:
            self._sock.close()
        except OSError:
            pass


def connect(endpoint: str, *, handler: ExchangeHandler | None = None,
            timeout: float = DEFAULT_TIMEOUT) -> Transport:
    """Open a transport handle.

    endpoint is "loopback" (requires handler, normally Emulator.handle_exchange)
    or "tcp://host:port".
    """
    if endpoint == "loopback":
        if handler is None:
            raise BadEndpoint("loopback endpoint requires an in-process emulator")
        return LoopbackTransport(handler)
    if endpoint.startswith("tcp://"):
        parts = urlsplit(endpoint)
        if not parts.hostname or parts.port is None:
            raise BadEndpoint(f"malformed tcp endpoint: {endpoint}")
        try:
            sock = socket.create_connection((parts.hostname, parts.port),
                                            timeout=timeout)
        except OSError as e:
            raise ConnectionRefused(f"cannot connect to {endpoint}: {e}")
        return TcpTransport(sock, timeout=timeout)
    raise BadEndpoint(f"unsupported endpoint: {endpoint}")


class TransportServer:
    """Accepts implant connections and serves exchanges through a handler.

    One connection is serviced at a time (MSD communications are serial)."""

    def __init__(self, handler: ExchangeHandler, host: str = "127.0.0.1",
                 port: int = 0):
        self._handler = handler
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    @property
    def endpoint(self) -> str:
        host, port = self.address
        return f"tcp://{host}:{port}"

    def start(self):
        self._thread = threading.Thread(target=self._run, name="scsi-server",
                                        daemon=True)
        self._thread.start()

    def _run(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._serve_connection(conn)
        self._listener.close()

    def _serve_connection(self, conn: socket.socket):
        conn.settimeout(0.5)

        def read(n: int) -> bytes:
            buf = bytearray()
            while len(buf) < n:
                if self._stop.is_set():
                    raise TransportClosed("server stopping")
                try:
                    chunk = conn.recv(n - len(buf))
                except socket.timeout:
                    continue
                if not chunk:
                    raise TransportClosed("peer disconnected")
                buf.extend(chunk)
            return bytes(buf)

        while not self._stop.is_set():
            try:
                exchange = decode_request(read)
            except TransportClosed:
                return
            resp = self._handler(exchange)
            try:
                conn.sendall(encode_response(resp))
            except OSError:
                return

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
        try:
            self._listener.close()
        except OSError:
            pass
