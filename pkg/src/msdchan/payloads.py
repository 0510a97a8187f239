"""Payload manager: spawns console tools as child processes and bridges
their stdin/stdout through pipes, plus assembly of transferred files.

Console tools run unmodified.  stderr is merged into stdout so diagnostic
text survives without a third stream.  Each process owns a reader thread
that moves stdout bytes into a bounded buffer; the producer blocks when the
buffer is full so a chatty payload cannot outrun the channel unbounded.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import threading
import zlib
from dataclasses import dataclass

from .errors import (CrcMismatch, DuplicateSession, OutOfOrderChunk,
                     PathRejected, ProcessExited, SpawnFailed)

STDOUT_BUFFER_LIMIT = 1 << 20  # per-process backpressure bound
TERMINATE_GRACE_S = 2.0

SHELL_ALIAS = "shell"


def resolve_command(spec: str) -> list[str]:
    spec = spec.strip()
    if not spec:
        raise SpawnFailed("empty command line")
    if spec == SHELL_ALIAS:
        return [os.environ.get("SHELL") or "/bin/sh"]
    return shlex.split(spec)


class PayloadProcess:
    """One spawned console tool with piped stdin/stdout."""

    def __init__(self, session_id: int, command_line: str, cwd: str,
                 on_output=None):
        self.session_id = session_id
        self.command_line = command_line
        self.exit_status: int | None = None
        self._on_output = on_output
        self._buf = bytearray()
        self._cond = threading.Condition()
        self._reader_done = False
        try:
            self._proc = subprocess.Popen(
                resolve_command(command_line),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                cwd=cwd,
                bufsize=0,
                start_new_session=True,
            )
        except (FileNotFoundError, PermissionError, NotADirectoryError) as e:
            raise SpawnFailed(f"cannot spawn {command_line!r}: {e}")
        self.pid = self._proc.pid
        self._reader = threading.Thread(
            target=self._read_loop, name=f"payload-{session_id}-reader",
            daemon=True)
        self._reader.start()

    def _read_loop(self):
        stream = self._proc.stdout
        while True:
            chunk = stream.read(65536)
            if not chunk:
                break
            with self._cond:
                while len(self._buf) >= STDOUT_BUFFER_LIMIT:
                    self._cond.wait()
                self._buf.extend(chunk)
                self._cond.notify_all()
            if self._on_output is not None:
                self._on_output(self.session_id, chunk)
        self.exit_status = self._proc.wait()
        with self._cond:
            self._reader_done = True
            self._cond.notify_all()
        if self._on_output is not None:
            self._on_output(self.session_id, None)  # end-of-stream marker

    @property
    def alive(self) -> bool:
        return self._proc.poll() is None

    def write_stdin(self, data: bytes):
        if self._proc.poll() is not None:
            raise ProcessExited(f"session {self.session_id} payload exited "
                                f"with {self._proc.returncode}")
        try:
            self._proc.stdin.write(data)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError, ValueError):
            raise ProcessExited(f"session {self.session_id} stdin closed")

    def drain_stdout(self, max_bytes: int = 65536) -> bytes:
        """Non-blocking: up to max_bytes of currently available output.

        Empty result means nothing pending right now; use at_eof() to tell
        that apart from end-of-stream.
        """
        with self._cond:
            chunk = bytes(self._buf[:max_bytes])
            del self._buf[:len(chunk)]
            self._cond.notify_all()
        return chunk

    def at_eof(self) -> bool:
        with self._cond:
            return self._reader_done and not self._buf

    def wait_output(self, timeout: float) -> bool:
        """Block until output is available or EOF; False on timeout."""
        with self._cond:
            return self._cond.wait_for(
                lambda: self._buf or self._reader_done, timeout)

    def terminate(self, grace: float = TERMINATE_GRACE_S):
        """Graceful termination, escalating to kill after the grace period."""
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        if self._proc.poll() is None:
            self._proc.terminate()
            try:
                self._proc.wait(timeout=grace)
            except subprocess.TimeoutExpired:
                self._proc.kill()
                self._proc.wait()
        self._reader.join(timeout=5)
        if self.exit_status is None:
            self.exit_status = self._proc.returncode


class PayloadHost:
    """Tracks live payloads by session id and owns the drop directory."""

    def __init__(self, drop_dir: str, max_sessions: int = 16, on_output=None):
        os.makedirs(drop_dir, exist_ok=True)
        self.drop_dir = drop_dir
        self.max_sessions = max_sessions
        self._on_output = on_output
        self._lock = threading.Lock()
        self._sessions: dict[int, PayloadProcess] = {}

    def launch(self, spec: str, session_id: int) -> PayloadProcess:
        with self._lock:
            if session_id in self._sessions:
                raise DuplicateSession(f"session {session_id} already bound")
            if len(self._sessions) >= self.max_sessions:
                raise SpawnFailed(
                    f"session limit {self.max_sessions} reached")
            proc = PayloadProcess(session_id, spec, self.drop_dir,
                                  on_output=self._on_output)
            self._sessions[session_id] = proc
            return proc

    def get(self, session_id: int) -> PayloadProcess | None:
        with self._lock:
            return self._sessions.get(session_id)

    def write_stdin(self, session_id: int, data: bytes):
        proc = self.get(session_id)
        if proc is None:
            raise ProcessExited(f"no payload for session {session_id}")
        proc.write_stdin(data)

    def terminate(self, session_id: int):
        with self._lock:
            proc = self._sessions.pop(session_id, None)
        if proc is not None:
            proc.terminate()

    def discard(self, session_id: int):
        """Drop bookkeeping for a payload that already exited on its own.

        Safe to call from the payload's own reader thread; does not join."""
        with self._lock:
            self._sessions.pop(session_id, None)

    def shutdown(self):
        with self._lock:
            procs = list(self._sessions.values())
            self._sessions.clear()
        for proc in procs:
            proc.terminate()


@dataclass
class FileReceipt:
    path: str
    bytes_written: int
    crc32: int
    complete: bool


def _safe_join(drop_dir: str, name: str) -> str:
    if not name or name.startswith(("/", "\\")) or os.path.isabs(name):
        raise PathRejected(f"absolute path rejected: {name!r}")
    parts = name.replace("\\", "/").split("/")
    if any(p in ("", ".", "..") for p in parts):
        raise PathRejected(f"path traversal rejected: {name!r}")
    return os.path.join(drop_dir, *parts)


class FileSink:
    """Assembles one incoming chunked file transfer under the drop directory.

    Chunks must arrive in sequence order with no gaps; the final datagram
    carries the whole-file CRC32 which must match.
    """

    def __init__(self, drop_dir: str, name: str, begin_seq: int):
        self.path = _safe_join(drop_dir, name)
        os.makedirs(os.path.dirname(self.path) or drop_dir, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._next_seq = (begin_seq + 1) & 0xFFFF
        self._crc = 0
        self.bytes_written = 0

    def chunk(self, seq: int, data: bytes):
        if seq != self._next_seq:
            self._fh.close()
            raise OutOfOrderChunk(
                f"expected chunk seq {self._next_seq}, got {seq}")
        self._next_seq = (self._next_seq + 1) & 0xFFFF
        self._fh.write(data)
        self._crc = zlib.crc32(data, self._crc)
        self.bytes_written += len(data)

    def end(self, seq: int, expected_crc: int) -> FileReceipt:
        if seq != self._next_seq:
            self._fh.close()
            raise OutOfOrderChunk(
                f"expected final seq {self._next_seq}, got {seq}")
        self._fh.close()
        if expected_crc != self._crc:
            raise CrcMismatch(
                f"crc 0x{self._crc:08X} != expected 0x{expected_crc:08X} "
                f"for {self.path}")
        return FileReceipt(self.path, self.bytes_written, self._crc, True)

    def abort(self):
        try:
            self._fh.close()
        except OSError:
            pass


def receive_file(drop_dir: str, name: str, begin_seq: int,
                 chunks: list[tuple[int, bytes]], end_seq: int,
                 expected_crc: int) -> FileReceipt:
    """One-shot assembly from already-collected begin/chunk/end pieces."""
    sink = FileSink(drop_dir, name, begin_seq)
    for seq, data in chunks:
        sink.chunk(seq, data)
    return sink.end(end_seq, expected_crc)
