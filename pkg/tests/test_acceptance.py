"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines.  Timing-sensitive criteria use the channel's default 40 ms delay /
20 ms margin regime over loopback or local TCP.
"""

import math
import os
import random
import subprocess
import sys
import threading
import time
import zlib

import pytest
from conftest import Stack
from hypothesis import given, settings
from hypothesis import strategies as st

from msdchan import datagram as dgm
from msdchan.console import AnalystConsole
from msdchan.emulator import BlockStore, Emulator, PollConfig
from msdchan.implant import ChannelConfig, CovertChannel
from msdchan.metrics import (ExperimentConfig, ProbeResponder, Verdict,
                             compare_reports, run_external_experiment,
                             summarize)
from msdchan.scsi import BLOCK_SIZE, Cdb, parse_cdb, serialize_cdb
from msdchan.transport import ScsiExchange, TransportServer, connect


def ok(name):
    print(f"\nACCEPTANCE PASS: {name}")


def quiesce(seconds=1.5):
    """Let residual load from earlier tests drain before timing anything."""
    import gc
    gc.collect()
    time.sleep(seconds)


# --- 1. frame codec round-trip -------------------------------------------

valid_cdbs = st.one_of(
    st.builds(Cdb.test_unit_ready, st.integers(0, 255)),
    st.builds(Cdb.read_10, st.integers(0, 0xFFFFFFFF),
              st.integers(1, 0xFFFF), st.integers(0, 255)),
    st.builds(Cdb.write_10, st.integers(0, 0xFFFFFFFF),
              st.integers(1, 0xFFFF), st.integers(0, 255)),
)


def test_frame_codec_roundtrip():
    start = time.monotonic()

    @settings(max_examples=500, deadline=None, database=None)
    @given(valid_cdbs)
    def roundtrip(cdb):
        wire = serialize_cdb(cdb)
        assert parse_cdb(wire) == cdb
        assert serialize_cdb(parse_cdb(wire)) == wire

    roundtrip()

    # golden vectors: opcodes, LBA bytes 2-5, transfer length bytes 7-8,
    # control last
    assert serialize_cdb(Cdb.read_10(4000, 2)) == \
        bytes.fromhex("280000000FA000000200")
    assert serialize_cdb(Cdb.write_10(0, 1, 0x80)) == \
        bytes.fromhex("2A000000000000000180")
    assert serialize_cdb(Cdb.test_unit_ready(0)) == bytes(6)
    assert parse_cdb(bytes.fromhex("280000000FA000000200")) == \
        Cdb.read_10(4000, 2)

    elapsed = time.monotonic() - start
    assert elapsed < 5.0, f"codec criterion took {elapsed:.1f}s"
    ok(f"frame codec round-trip ({elapsed:.2f}s)")


# --- 2. cover-traffic transparency ----------------------------------------

WORKLOAD_OPS = 10_000
WORKLOAD_CAPACITY = 256


def run_normal_workload(submit, seed=2024):
    rng = random.Random(seed)
    for _ in range(WORKLOAD_OPS):
        lba = rng.randrange(WORKLOAD_CAPACITY)
        if rng.random() < 0.5:
            payload = rng.randbytes(BLOCK_SIZE)
            submit(ScsiExchange(Cdb.write_10(lba, 1), payload))
        else:
            submit(ScsiExchange(Cdb.read_10(lba, 1)))


def test_cover_traffic_transparency(tmp_path):
    start = time.monotonic()
    # reference: the workload alone
    ref = Emulator(BlockStore(WORKLOAD_CAPACITY), PollConfig())
    ref_handle = connect("loopback", handler=ref.handle_exchange)
    run_normal_workload(lambda ex: ref_handle.submit(ex))

    # live: same workload while an analyst session is active
    stack = Stack(tmp_path, capacity_blocks=WORKLOAD_CAPACITY,
                  poll_interval_ms=10).start()
    try:
        sid = stack.console.open_session("/bin/cat")
        stack.wait_state(sid, "active")
        stop = threading.Event()

        def chatter():
            n = 0
            while not stop.is_set():
                stack.console.exec(sid, f"chatter-{n}")
                n += 1
                stop.wait(0.01)

        driver = threading.Thread(target=chatter, daemon=True)
        driver.start()
        host_handle = connect("loopback",
                              handler=stack.emulator.handle_exchange)
        run_normal_workload(lambda ex: host_handle.submit(ex))
        stop.set()
        driver.join()
        assert stack.console.stats().covert_writes > 0, \
            "analyst session was not actually active"
        live_image = stack.emulator.store.read(0, WORKLOAD_CAPACITY)
    finally:
        stack.stop()

    assert live_image == ref.store.read(0, WORKLOAD_CAPACITY)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"transparency criterion took {elapsed:.1f}s"
    ok(f"cover-traffic transparency, {WORKLOAD_OPS} ops ({elapsed:.1f}s)")


# --- 3. polling protocol ---------------------------------------------------

def test_polling_protocol():
    quiesce()
    start = time.monotonic()
    emulator = Emulator(BlockStore(64), PollConfig(
        delay_ms=40.0, detect_margin_ms=20.0, poll_interval_ms=100.0))
    channel = CovertChannel(
        connect("loopback", handler=emulator.handle_exchange),
        ChannelConfig(poll_interval_ms=100.0, detect_margin_ms=20.0))

    false_pendings = 0
    for _ in range(480):
        if channel.poll_once().pending:
            false_pendings += 1
        time.sleep(0.1)
    assert false_pendings == 0, f"{false_pendings} false pendings"

    detections = 0
    trials = 20
    for i in range(trials):
        emulator.enqueue_command(
            dgm.Datagram(dgm.DatagramType.DATA, 1, i, b"cmd"))
        time.sleep(0.1)  # next scheduled poll, one interval later
        if channel.poll_once().pending:
            detections += 1
        channel.fetch_commands()  # drain so the queue is empty again
    assert detections == trials, f"only {detections}/{trials} detected"

    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"polling criterion took {elapsed:.1f}s"
    ok(f"polling protocol: 0 false pendings / {trials}/{trials} detected "
       f"over 500 polls ({elapsed:.1f}s)")


# --- 4. end-to-end command relay -------------------------------------------

def test_end_to_end_command_relay(tmp_path):
    start = time.monotonic()
    stack = Stack(tmp_path, poll_interval_ms=20).start()
    try:
        for name in ("report.txt", "notes.md", "tool.bin"):
            with open(os.path.join(stack.drop_dir, name), "w") as fh:
                fh.write(name)
        script = "ls && exit"
        expected = subprocess.run(
            ["/bin/sh"], input=(script + "\n").encode(),
            cwd=stack.drop_dir, stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT).stdout

        sid = stack.console.open_session("/bin/sh")
        stack.console.exec(sid, script)
        stack.wait_state(sid, "closed")
        received, _ = stack.console.read_output(sid)
        assert received == expected
    finally:
        stack.stop()
    elapsed = time.monotonic() - start
    assert elapsed < 10.0, f"relay criterion took {elapsed:.1f}s"
    ok(f"end-to-end command relay, byte-equal listing ({elapsed:.1f}s)")


# --- 5. file transfer -------------------------------------------------------

def test_file_transfer_4mib(tmp_path):
    start = time.monotonic()
    stack = Stack(tmp_path, poll_interval_ms=20, fetch_blocks=8).start()
    try:
        payload = random.Random(99).randbytes(4 * 1024 * 1024)
        src = tmp_path / "sample.bin"
        src.write_bytes(payload)
        source_crc = zlib.crc32(payload)

        report = stack.console.push_file(str(src), "incoming/sample.bin")
        report = stack.console.wait_transfer(report.transfer_id, timeout=110)
        assert report.complete, report.error
        receipt = stack.implant.file_receipts[report.transfer_id]
        assert receipt.crc32 == source_crc
        assert receipt.bytes_written == len(payload)
        with open(receipt.path, "rb") as fh:
            assert zlib.crc32(fh.read()) == source_crc
    finally:
        stack.stop()
    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"file transfer took {elapsed:.1f}s"
    ok(f"4 MiB file transfer, CRC match ({elapsed:.1f}s)")


# --- 6. session isolation ---------------------------------------------------

def test_session_isolation(tmp_path):
    sessions = 8
    exchanges_per_session = 125  # 1000 exchanges total
    stack = Stack(tmp_path, poll_interval_ms=10).start()
    try:
        sids = [stack.console.open_session("/bin/cat")
                for _ in range(sessions)]
        for sid in sids:
            stack.wait_state(sid, "active")
        for n in range(exchanges_per_session):
            for i, sid in enumerate(sids):
                stack.console.exec(sid, f"marker-{i}-{n}")
        for i, sid in enumerate(sids):
            expected = b"".join(f"marker-{i}-{n}\n".encode()
                                for n in range(exchanges_per_session))
            deadline = time.monotonic() + 60
            while time.monotonic() < deadline:
                data, _ = stack.console.read_output(sid)
                if len(data) >= len(expected):
                    break
                time.sleep(0.05)
            data, _ = stack.console.read_output(sid)
            assert data == expected, \
                f"session {i} output corrupt or cross-contaminated"
            for j in range(sessions):
                if j != i:
                    assert f"marker-{j}-".encode() not in data
    finally:
        stack.stop()
    ok(f"session isolation: {sessions} sessions x {exchanges_per_session} "
       f"exchanges, zero leakage")


# --- 7. stealth property ----------------------------------------------------

def test_stealth_property(tmp_path):
    fixture = tmp_path / "fixture"
    fixture.mkdir()
    for name in ("a.txt", "b.txt", "c.txt"):
        (fixture / name).write_text(name)
    responder = ProbeResponder(workdir=str(fixture))
    responder.start()
    quiesce()

    def scenario(name):
        cfg = ExperimentConfig(name, n=100, interval_s=0.03, probe="ls",
                               responder_address=responder.address)
        report, _ = run_external_experiment(cfg)
        return report

    emulator = Emulator(BlockStore(4096), PollConfig(poll_interval_ms=25))
    server = TransportServer(emulator.handle_exchange)
    server.start()
    console = AnalystConsole(emulator)
    console.start()
    implant = None
    try:
        baseline = scenario("baseline")

        # implant in its own process, as in the real topology
        implant = subprocess.Popen(
            [sys.executable, "-m", "msdchan.cli", "implant",
             "--endpoint", server.endpoint, "--poll-interval-ms", "25",
             "--drop-dir", str(tmp_path / "drop")],
            stdout=subprocess.DEVNULL)
        assert console.wait_for_implant(10)
        idle = scenario("toolset_idle")

        sid = console.open_session("/bin/sh")
        stop = threading.Event()

        def dir_driver():
            while not stop.is_set():
                console.exec(sid, "ls")
                stop.wait(0.3)

        driver = threading.Thread(target=dir_driver, daemon=True)
        driver.start()
        dir_probe = scenario("toolset_dir_probe")
        stop.set()
        driver.join()

        responder.stall_seconds = 0.05
        blocked = scenario("toolset_blocking_payload")
    finally:
        if implant is not None:
            implant.terminate()
            implant.wait()
        console.stop()
        server.stop()
        responder.stop()

    assert compare_reports(baseline, idle) is Verdict.WITHIN_ONE_SIGMA, \
        (baseline, idle)
    assert compare_reports(baseline, dir_probe) is Verdict.WITHIN_ONE_SIGMA, \
        (baseline, dir_probe)
    assert compare_reports(baseline, blocked) is Verdict.DISTINGUISHABLE, \
        (baseline, blocked)
    ok("stealth: idle and dir-probe WithinOneSigma, blocking payload "
       "Distinguishable (n=100 each)")


# --- 8. statistics oracle ---------------------------------------------------

def brute_force_stats(values):
    n = len(values)
    mean = math.fsum(values) / n
    var = math.fsum((v - mean) ** 2 for v in values) / (n - 1) if n > 1 else 0.0

    def pct(q):
        for x in sorted(values):
            if sum(1 for v in values if v <= x) >= q * n:
                return x
        return max(values)

    return mean, math.sqrt(var), pct(0.50), pct(0.95)


def test_statistics_oracle():
    rng = random.Random(77)
    for _ in range(50):
        values = [rng.uniform(1e-4, 0.1) for _ in range(rng.randrange(2, 300))]
        report = summarize("s", values)
        mean, stddev, p50, p95 = brute_force_stats(values)
        assert report.mean_s == pytest.approx(mean)
        assert report.stddev_s == pytest.approx(stddev)
        assert report.p50_s == p50
        assert report.p95_s == p95
        assert report.min_s <= report.p50_s <= report.p95_s <= report.max_s
        assert report.stddev_s >= 0
    ok("statistics oracle: 50 randomized sets match brute force")
