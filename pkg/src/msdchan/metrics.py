"""Detectability measurement harness.

Two vantage points, mirroring the validation approach:

  * internal: I/O, CPU and memory accounting on the implant process itself,
  * external: round-trip times of a probe command issued repeatedly against
    a responder running beside the implant, asking whether channel activity
    shifts the timing distribution an outside observer would see.

Raw samples persist as CSV (scenario_id,iteration,rtt_us) so every verdict
is re-derivable from disk.  Probes run strictly serially.
"""

from __future__ import annotations

import csv
import enum
import math
import os
import shlex
import socket
import subprocess
import threading
import time
from dataclasses import dataclass

import psutil

from .errors import IncompatibleScenarios, ResponderUnreachable

SCENARIOS = (
    "baseline",
    "toolset_idle",
    "toolset_dir_probe",
    "toolset_file_transfer",
    "toolset_blocking_payload",
)

CSV_FIELDS = ("scenario_id", "iteration", "rtt_us")


@dataclass(frozen=True)
class TimingSample:
    scenario_id: str
    iteration: int
    rtt_s: float


@dataclass(frozen=True)
class ScenarioReport:
    scenario_id: str
    n: int
    mean_s: float
    min_s: float
    max_s: float
    stddev_s: float
    p50_s: float
    p95_s: float
    probe: str | None = None
    interval_s: float | None = None

    def as_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "n": self.n,
            "mean_ms": self.mean_s * 1e3,
            "min_ms": self.min_s * 1e3,
            "max_ms": self.max_s * 1e3,
            "stddev_ms": self.stddev_s * 1e3,
            "p50_ms": self.p50_s * 1e3,
            "p95_ms": self.p95_s * 1e3,
        }


class Verdict(enum.Enum):
    WITHIN_ONE_SIGMA = "WithinOneSigma"
    DISTINGUISHABLE = "Distinguishable"


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile over a non-empty sample."""
    if not values:
        raise ValueError("empty sample")
    ordered = sorted(values)
    rank = math.ceil(q * len(ordered))
    return ordered[max(rank, 1) - 1]


def summarize(scenario_id: str, rtts: list[float], probe: str | None = None,
              interval_s: float | None = None) -> ScenarioReport:
    if not rtts:
        raise ValueError("no samples to summarize")
    n = len(rtts)
    mean = sum(rtts) / n
    if n > 1:
        stddev = math.sqrt(sum((x - mean) ** 2 for x in rtts) / (n - 1))
    else:
        stddev = 0.0
    return ScenarioReport(
        scenario_id=scenario_id,
        n=n,
        mean_s=mean,
        min_s=min(rtts),
        max_s=max(rtts),
        stddev_s=stddev,
        p50_s=percentile(rtts, 0.50),
        p95_s=percentile(rtts, 0.95),
        probe=probe,
        interval_s=interval_s,
    )


def compare_reports(a: ScenarioReport, b: ScenarioReport) -> Verdict:
    """WithinOneSigma iff |mean_b - mean_a| <= stddev_a.

    a is the baseline.  Reports must come from the same probe and interval
    when that metadata is present.
    """
    if a.probe is not None and b.probe is not None and a.probe != b.probe:
        raise IncompatibleScenarios(f"probes differ: {a.probe!r} vs {b.probe!r}")
    if (a.interval_s is not None and b.interval_s is not None
            and a.interval_s != b.interval_s):
        raise IncompatibleScenarios(
            f"intervals differ: {a.interval_s} vs {b.interval_s}")
    if abs(b.mean_s - a.mean_s) <= a.stddev_s:
        return Verdict.WITHIN_ONE_SIGMA
    return Verdict.DISTINGUISHABLE


# --- raw sample persistence ---

def write_samples_csv(path: str, samples: list[TimingSample]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for s in samples:
            writer.writerow([s.scenario_id, s.iteration,
                             round(s.rtt_s * 1e6)])


def read_samples_csv(path: str) -> list[TimingSample]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            out.append(TimingSample(row["scenario_id"], int(row["iteration"]),
                                    int(row["rtt_us"]) / 1e6))
    return out


def report_from_csv(path: str, scenario_id: str) -> ScenarioReport:
    rtts = [s.rtt_s for s in read_samples_csv(path)
            if s.scenario_id == scenario_id]
    return summarize(scenario_id, rtts)


# --- probe responder (attacker's channel stand-in) ---

class ProbeResponder:
    """Plain TCP service beside the implant: one probe per connection.

    The client sends a command line terminated by newline; the responder
    executes it and returns its combined output, then closes.  Connections
    are handled strictly serially, so anything that stalls the responder
    (stall_seconds, standing in for a payload that locks the target
    process) stalls every probe issued meanwhile.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 workdir: str | None = None):
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(0.2)
        self.workdir = workdir
        self.stall_seconds = 0.0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def start(self):
        self._thread = threading.Thread(target=self._run,
                                        name="probe-responder", daemon=True)
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
                try:
                    self._serve(conn)
                except OSError:
                    pass
        self._listener.close()

    def _serve(self, conn: socket.socket):
        conn.settimeout(5.0)
        line = bytearray()
        while not line.endswith(b"\n"):
            chunk = conn.recv(4096)
            if not chunk:
                return
            line.extend(chunk)
        if self.stall_seconds:
            time.sleep(self.stall_seconds)
        command = line.decode(errors="replace").strip()
        try:
            result = subprocess.run(
                shlex.split(command), capture_output=True,
                cwd=self.workdir, timeout=30)
            output = result.stdout + result.stderr
        except (OSError, subprocess.TimeoutExpired, ValueError) as e:
            output = f"probe error: {e}".encode()
        conn.sendall(output)

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
        try:
            self._listener.close()
        except OSError:
            pass


def run_probe(address: tuple[str, int], probe: str,
              timeout: float = 30.0) -> tuple[float, bytes]:
    """Issue one probe; rtt covers send through full response receipt."""
    try:
        start = time.monotonic()
        with socket.create_connection(address, timeout=timeout) as conn:
            conn.sendall(probe.encode() + b"\n")
            conn.shutdown(socket.SHUT_WR)
            chunks = []
            while True:
                chunk = conn.recv(65536)
                if not chunk:
                    break
                chunks.append(chunk)
        return time.monotonic() - start, b"".join(chunks)
    except OSError as e:
        raise ResponderUnreachable(f"probe to {address} failed: {e}")


@dataclass
class ExperimentConfig:
    scenario_id: str
    n: int
    interval_s: float
    probe: str
    responder_address: tuple[str, int]
    csv_path: str | None = None


def run_external_experiment(cfg: ExperimentConfig) -> tuple[ScenarioReport,
                                                            list[TimingSample]]:
    """Issue the probe n times at the configured interval, one at a time."""
    samples: list[TimingSample] = []
    for i in range(cfg.n):
        started = time.monotonic()
        rtt, _ = run_probe(cfg.responder_address, cfg.probe)
        samples.append(TimingSample(cfg.scenario_id, i, rtt))
        if i + 1 < cfg.n:
            remaining = cfg.interval_s - (time.monotonic() - started)
            if remaining > 0:
                time.sleep(remaining)
    if cfg.csv_path:
        write_samples_csv(cfg.csv_path, samples)
    report = summarize(cfg.scenario_id, [s.rtt_s for s in samples],
                       probe=cfg.probe, interval_s=cfg.interval_s)
    return report, samples


# --- internal counters ---

@dataclass(frozen=True)
class InternalCounters:
    io_read_ops: int
    io_write_ops: int
    io_bytes: int
    cpu_time_consumed_s: float
    resident_memory_delta: int


class InternalCounterSampler:
    """Snapshots implant-process accounting; deltas are against the state
    captured when the sampler was created."""

    def __init__(self, implant):
        self._implant = implant
        self._proc = psutil.Process()
        self._rss0 = self._proc.memory_info().rss

    def sample(self) -> InternalCounters:
        c = self._implant.channel.transport.counters
        cpu = self._proc.cpu_times()
        return InternalCounters(
            io_read_ops=c.read_ops,
            io_write_ops=c.write_ops,
            io_bytes=c.io_bytes,
            cpu_time_consumed_s=cpu.user + cpu.system,
            resident_memory_delta=self._proc.memory_info().rss - self._rss0,
        )


class SyntheticLoad:
    """Configurable CPU/I-O duty-cycle generator standing in for end-user
    activity (reproducible where human workloads are not)."""

    def __init__(self, cpu_duty: float = 0.2, io_bytes_per_cycle: int = 0,
                 cycle_s: float = 0.1, scratch_path: str | None = None):
        if not 0.0 <= cpu_duty <= 1.0:
            raise ValueError("cpu_duty must be in [0, 1]")
        self.cpu_duty = cpu_duty
        self.io_bytes_per_cycle = io_bytes_per_cycle
        self.cycle_s = cycle_s
        self.scratch_path = scratch_path
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self):
        self._thread = threading.Thread(target=self._run,
                                        name="synthetic-load", daemon=True)
        self._thread.start()

    def _run(self):
        busy = self.cpu_duty * self.cycle_s
        idle = self.cycle_s - busy
        blob = os.urandom(self.io_bytes_per_cycle) if self.io_bytes_per_cycle else b""
        while not self._stop.is_set():
            end = time.monotonic() + busy
            while time.monotonic() < end:
                pass
            if blob and self.scratch_path:
                with open(self.scratch_path, "wb") as fh:
                    fh.write(blob)
            if idle > 0:
                self._stop.wait(idle)

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
