"""Analyst-side control plane.

Wraps the emulator's covert endpoint with session bookkeeping: allocates
session ids, enqueues OPEN/DATA/CLOSE and file-transfer datagrams, and runs
a drain loop that sorts implant replies into per-session output rings.  The
interactive CLI and the HTTP API are both thin frontends over this class,
so everything reachable from one is reachable from the other.
"""

from __future__ import annotations

import base64
import os
import queue
import threading
import time
import zlib
from dataclasses import dataclass, field

from .datagram import MAX_PAYLOAD, Datagram, DatagramType, chunk_payload
from .emulator import Emulator
from .errors import NoImplant, SessionClosed, TooLarge, UnknownSession
from .implant import FILE_END_PAYLOAD, SessionState

RING_CAPACITY = 64 * 1024
DEFAULT_FILE_CAP = 64 * 1024 * 1024
DRAIN_WAIT_S = 0.02
STATS_EVENT_MIN_INTERVAL_S = 0.25
ENQUEUE_TIMEOUT_S = 60.0


@dataclass
class ChannelStats:
    polls_observed: int = 0
    pending_signals_sent: int = 0
    covert_reads: int = 0
    covert_writes: int = 0
    normal_frames: int = 0
    queue_depth: int = 0
    last_delay_applied_ms: float = 0.0

    def as_dict(self) -> dict:
        return {
            "polls_observed": self.polls_observed,
            "pending_signals_sent": self.pending_signals_sent,
            "covert_reads": self.covert_reads,
            "covert_writes": self.covert_writes,
            "normal_frames": self.normal_frames,
            "queue_depth": self.queue_depth,
            "last_delay_applied_ms": self.last_delay_applied_ms,
        }


class OutputRing:
    """Append-only byte history with a bounded retained window.

    Offsets are cumulative over the session's lifetime; reads past the
    retained window are clipped to what is still held.
    """

    def __init__(self, capacity: int = RING_CAPACITY):
        self._capacity = capacity
        self._buf = bytearray()
        self._start = 0  # cumulative offset of _buf[0]
        self._lock = threading.Lock()

    def append(self, data: bytes):
        with self._lock:
            self._buf.extend(data)
            overflow = len(self._buf) - self._capacity
            if overflow > 0:
                del self._buf[:overflow]
                self._start += overflow

    def read(self, since: int) -> tuple[bytes, int]:
        with self._lock:
            end = self._start + len(self._buf)
            pos = min(max(since, self._start), end)
            return bytes(self._buf[pos - self._start:]), end

    @property
    def end_offset(self) -> int:
        with self._lock:
            return self._start + len(self._buf)

    @property
    def truncated_before(self) -> int:
        with self._lock:
            return self._start


@dataclass
class SessionRecord:
    session_id: int
    payload_spec: str
    state: SessionState = SessionState.OPENING
    next_seq_out: int = 0
    expected_seq_in: int = 0
    bytes_in: int = 0   # implant -> analyst (session output)
    bytes_out: int = 0  # analyst -> implant (stdin)
    last_error: str | None = None
    ring: OutputRing = field(default_factory=OutputRing)

    def view(self) -> dict:
        return {
            "session_id": self.session_id,
            "payload_spec": self.payload_spec,
            "state": self.state.value,
            "bytes_in": self.bytes_in,
            "bytes_out": self.bytes_out,
            "next_offset": self.ring.end_offset,
            "truncated_before": self.ring.truncated_before,
            "last_error": self.last_error,
        }


@dataclass
class FileTransferReport:
    transfer_id: int
    name: str
    size: int
    chunks: int
    crc32: int
    done: threading.Event = field(default_factory=threading.Event)
    remote_crc32: int | None = None
    remote_bytes: int | None = None
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.done.is_set() and self.error is None

    def as_dict(self) -> dict:
        return {
            "transfer_id": self.transfer_id,
            "name": self.name,
            "size": self.size,
            "chunks": self.chunks,
            "crc32": self.crc32,
            "complete": self.complete,
            "error": self.error,
        }


class AnalystConsole:
    """Single control-plane core behind the CLI and the HTTP API."""

    def __init__(self, emulator: Emulator,
                 file_size_cap: int = DEFAULT_FILE_CAP):
        self.emulator = emulator
        self.file_size_cap = file_size_cap
        self._lock = threading.Lock()
        self._sessions: dict[int, SessionRecord] = {}
        self._transfers: dict[int, FileTransferReport] = {}
        self._next_id = 1
        self._subscribers: list[queue.Queue] = []
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._last_stats_event = 0.0
        self._last_stats_snapshot: dict | None = None

    # --- lifecycle ---

    def start(self):
        self._thread = threading.Thread(target=self._drain_loop,
                                        name="console-drain", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)

    # --- implant liveness ---

    def implant_alive(self) -> bool:
        last = self.emulator.last_poll_monotonic
        if last is None:
            return False
        window = 10 * self.emulator.poll_config.poll_interval_ms / 1000.0
        return time.monotonic() - last <= window

    def wait_for_implant(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.emulator.last_poll_monotonic is not None:
                return True
            time.sleep(0.01)
        return self.emulator.last_poll_monotonic is not None

    # --- session operations ---

    def open_session(self, payload_spec: str) -> int:
        if not self.implant_alive():
            raise NoImplant("no covert poll observed within 10 poll intervals")
        with self._lock:
            sid = self._next_id
            self._next_id += 1
            record = SessionRecord(sid, payload_spec)
            self._sessions[sid] = record
        self._enqueue_session(record, DatagramType.OPEN,
                              payload_spec.encode()[:MAX_PAYLOAD])
        self._publish({"event": "session", **record.view()})
        return sid

    def _record(self, session_id: int) -> SessionRecord:
        with self._lock:
            record = self._sessions.get(session_id)
        if record is None:
            raise UnknownSession(f"no session {session_id}")
        return record

    def _enqueue_session(self, record: SessionRecord, dtype: DatagramType,
                         payload: bytes = b""):
        with self._lock:
            seq = record.next_seq_out
            record.next_seq_out = (seq + 1) & 0xFFFF
        self.emulator.enqueue_command(Datagram(dtype, record.session_id,
                                               seq, payload))

    def exec(self, session_id: int, line: str):
        """Queue one input line (newline appended) for the session's stdin."""
        record = self._record(session_id)
        if record.state is SessionState.CLOSED:
            raise SessionClosed(f"session {session_id} is closed")
        data = line.encode() + b"\n"
        for piece in chunk_payload(data):
            self._enqueue_session(record, DatagramType.DATA, piece)
        record.bytes_out += len(data)

    def read_output(self, session_id: int, since: int = 0) -> tuple[bytes, int]:
        return self._record(session_id).ring.read(since)

    def close_session(self, session_id: int):
        record = self._record(session_id)
        if record.state is SessionState.CLOSED:
            raise SessionClosed(f"session {session_id} is closed")
        self._enqueue_session(record, DatagramType.CLOSE)

    def sessions(self) -> list[dict]:
        with self._lock:
            records = sorted(self._sessions.values(),
                             key=lambda r: r.session_id)
        return [r.view() for r in records]

    def session_view(self, session_id: int) -> dict:
        return self._record(session_id).view()

    # --- file transfer ---

    def push_file(self, local_path: str, remote_name: str) -> FileTransferReport:
        if not os.path.isfile(local_path):
            raise FileNotFoundError(local_path)
        size = os.path.getsize(local_path)
        if size > self.file_size_cap:
            raise TooLarge(f"{size} bytes exceeds cap {self.file_size_cap}")
        with self._lock:
            tid = self._next_id
            self._next_id += 1
        crc = 0
        seq = 0
        chunks = 0
        self.emulator.enqueue_command(
            Datagram(DatagramType.FILE_BEGIN, tid, seq,
                     remote_name.encode()[:MAX_PAYLOAD]),
            timeout=ENQUEUE_TIMEOUT_S)
        with open(local_path, "rb") as fh:
            while True:
                piece = fh.read(MAX_PAYLOAD)
                if not piece:
                    break
                seq = (seq + 1) & 0xFFFF
                chunks += 1
                crc = zlib.crc32(piece, crc)
                self.emulator.enqueue_command(
                    Datagram(DatagramType.FILE_CHUNK, tid, seq, piece),
                    timeout=ENQUEUE_TIMEOUT_S)
        seq = (seq + 1) & 0xFFFF
        report = FileTransferReport(tid, remote_name, size, chunks, crc)
        with self._lock:
            self._transfers[tid] = report
        self.emulator.enqueue_command(
            Datagram(DatagramType.FILE_END, tid, seq,
                     FILE_END_PAYLOAD.pack(crc, size)),
            timeout=ENQUEUE_TIMEOUT_S)
        return report

    def wait_transfer(self, transfer_id: int, timeout: float) -> FileTransferReport:
        with self._lock:
            report = self._transfers.get(transfer_id)
        if report is None:
            raise UnknownSession(f"no transfer {transfer_id}")
        report.done.wait(timeout)
        return report

    # --- stats & events ---

    def stats(self) -> ChannelStats:
        c = self.emulator.counters
        return ChannelStats(
            polls_observed=c.polls_observed,
            pending_signals_sent=c.pending_signals_sent,
            covert_reads=c.covert_reads,
            covert_writes=c.covert_writes,
            normal_frames=c.normal_frames,
            queue_depth=self.emulator.queue_depth,
            last_delay_applied_ms=c.last_delay_applied_ms,
        )

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=1024)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue):
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def _publish(self, event: dict):
        with self._lock:
            subs = list(self._subscribers)
        for q in subs:
            try:
                q.put_nowait(event)
            except queue.Full:
                pass  # slow consumer loses events; state is re-readable

    # --- drain loop ---

    def _drain_loop(self):
        while not self._stop.is_set():
            for d in self.emulator.wait_results(DRAIN_WAIT_S):
                self._dispatch(d)
            self._maybe_publish_stats()

    def _maybe_publish_stats(self):
        now = time.monotonic()
        if now - self._last_stats_event < STATS_EVENT_MIN_INTERVAL_S:
            return
        snapshot = self.stats().as_dict()
        if snapshot != self._last_stats_snapshot:
            self._last_stats_event = now
            self._last_stats_snapshot = snapshot
            self._publish({"event": "stats", **snapshot})

    def _dispatch(self, d: Datagram):
        if d.dtype == DatagramType.FILE_END:
            self._on_file_ack(d)
            return
        with self._lock:
            record = self._sessions.get(d.session_id)
        if record is None:
            if d.dtype == DatagramType.ERROR:
                self._on_transfer_error(d)
            return
        if d.dtype == DatagramType.ERROR:
            record.last_error = d.payload.decode(errors="replace")
            self._publish({"event": "session", **record.view()})
            return
        if d.seq != record.expected_seq_in:
            record.last_error = (f"seq gap from implant: expected "
                                 f"{record.expected_seq_in}, got {d.seq}")
            return
        record.expected_seq_in = (d.seq + 1) & 0xFFFF
        if d.dtype == DatagramType.OPEN:
            record.state = SessionState.ACTIVE
            self._publish({"event": "session", **record.view()})
        elif d.dtype == DatagramType.DATA:
            record.ring.append(d.payload)
            record.bytes_in += len(d.payload)
            self._publish({
                "event": "output",
                "session_id": record.session_id,
                "data": base64.b64encode(d.payload).decode(),
                "next_offset": record.ring.end_offset,
            })
        elif d.dtype == DatagramType.CLOSE:
            record.state = SessionState.CLOSED
            self._publish({"event": "session", **record.view()})

    def _on_file_ack(self, d: Datagram):
        with self._lock:
            report = self._transfers.get(d.session_id)
        if report is None:
            return
        report.remote_crc32, report.remote_bytes = FILE_END_PAYLOAD.unpack(
            d.payload)
        report.done.set()
        self._publish({"event": "file", **report.as_dict()})

    def _on_transfer_error(self, d: Datagram):
        with self._lock:
            report = self._transfers.get(d.session_id)
        if report is not None:
            report.error = d.payload.decode(errors="replace")
            report.done.set()
            self._publish({"event": "file", **report.as_dict()})
