import os
import random

import pytest

from msdchan.datagram import Datagram, DatagramType, decode_stream, pack_blocks
from msdchan.emulator import BlockStore, Emulator, PollConfig
from msdchan.errors import QueueFull
from msdchan.scsi import BLOCK_SIZE, Cdb, mark_covert
from msdchan.transport import STATUS_CHECK_CONDITION, STATUS_GOOD, ScsiExchange


def make_emulator(capacity=256, queue_limit=4096, record_sleep=None,
                  image_path=None):
    sleeps = []

    def fake_sleep(s):
        sleeps.append(s)

    em = Emulator(BlockStore(capacity, image_path=image_path),
                  PollConfig(poll_interval_ms=25),
                  queue_limit=queue_limit,
                  sleep=fake_sleep if record_sleep is None else record_sleep)
    em.sleeps = sleeps
    return em


def block(seed, n=1):
    rng = random.Random(seed)
    return bytes(rng.randrange(256) for _ in range(n * BLOCK_SIZE))


def test_store_load_identity():
    em = make_emulator()
    b = block(1)
    assert em.handle_exchange(
        ScsiExchange(Cdb.write_10(7, 1), b)).status == STATUS_GOOD
    resp = em.handle_exchange(ScsiExchange(Cdb.read_10(7, 1)))
    assert resp.data_in == b


def test_unwritten_blocks_read_zero():
    em = make_emulator()
    resp = em.handle_exchange(ScsiExchange(Cdb.read_10(0, 3)))
    assert resp.data_in == bytes(3 * BLOCK_SIZE)


def test_lba_out_of_range_is_check_condition():
    em = make_emulator(capacity=16)
    assert em.handle_exchange(
        ScsiExchange(Cdb.read_10(16, 1))).status == STATUS_CHECK_CONDITION
    assert em.handle_exchange(
        ScsiExchange(Cdb.write_10(15, 2),
                     bytes(2 * BLOCK_SIZE))).status == STATUS_CHECK_CONDITION


def test_normal_poll_never_delayed():
    em = make_emulator()
    em.enqueue_command(Datagram(DatagramType.OPEN, 1, 0, b"shell"))
    resp = em.handle_exchange(ScsiExchange(Cdb.test_unit_ready()))
    assert resp.status == STATUS_GOOD
    assert em.sleeps == []


def test_covert_poll_delay_iff_queue_nonempty():
    em = make_emulator()
    covert_tur = ScsiExchange(mark_covert(Cdb.test_unit_ready()))
    em.handle_exchange(covert_tur)
    assert em.sleeps == []  # empty queue: Good with no added delay
    em.enqueue_command(Datagram(DatagramType.OPEN, 1, 0, b"shell"))
    em.handle_exchange(covert_tur)
    assert em.sleeps == [pytest.approx(0.040)]
    assert em.counters.pending_signals_sent == 1
    assert em.counters.last_delay_applied_ms == 40.0


def test_covert_read_packs_fifo_until_pad():
    em = make_emulator()
    ds = [Datagram(DatagramType.DATA, 1, i, bytes([i]) * 20) for i in range(3)]
    for d in ds:
        em.enqueue_command(d)
    resp = em.handle_exchange(
        ScsiExchange(mark_covert(Cdb.read_10(0, 8))))
    assert resp.status == STATUS_GOOD
    assert len(resp.data_in) == 8 * BLOCK_SIZE
    assert decode_stream(resp.data_in) == ds
    assert em.queue_depth == 0


def test_covert_read_single_block_golden():
    em = make_emulator()
    d = Datagram(DatagramType.OPEN, 1, 0, b"shell")
    em.enqueue_command(d)
    resp = em.handle_exchange(ScsiExchange(mark_covert(Cdb.read_10(0, 1))))
    # packed OPEN datagram then zero fill, exactly one block
    assert resp.data_in == pack_blocks([d], BLOCK_SIZE)


def test_covert_read_leaves_nonfitting_datagrams_queued():
    em = make_emulator()
    for i in range(3):
        em.enqueue_command(Datagram(DatagramType.FILE_CHUNK, 1, i, b"x" * 504))
    resp = em.handle_exchange(ScsiExchange(mark_covert(Cdb.read_10(0, 1))))
    assert len(decode_stream(resp.data_in)) == 1  # only one 512-byte datagram fits
    assert em.queue_depth == 2


def test_covert_read_empty_queue_returns_pad_only():
    em = make_emulator()
    resp = em.handle_exchange(ScsiExchange(mark_covert(Cdb.read_10(0, 2))))
    assert resp.status == STATUS_GOOD
    assert resp.data_in == bytes(2 * BLOCK_SIZE)


def test_covert_write_collects_in_order_and_drains_once():
    em = make_emulator()
    ds = [Datagram(DatagramType.DATA, 3, i, f"out{i}".encode())
          for i in range(2)]
    data = pack_blocks(ds, BLOCK_SIZE)
    em.handle_exchange(ScsiExchange(mark_covert(Cdb.write_10(0, 1)), data))
    assert em.drain_results() == ds
    assert em.drain_results() == []


def test_drain_before_any_write_is_empty():
    assert make_emulator().drain_results() == []


def test_queue_bound():
    em = make_emulator(queue_limit=3)
    for i in range(3):
        em.enqueue_command(Datagram(DatagramType.DATA, 1, i, b"x"))
    with pytest.raises(QueueFull):
        em.enqueue_command(Datagram(DatagramType.DATA, 1, 3, b"x"))
    with pytest.raises(QueueFull):
        em.enqueue_command(Datagram(DatagramType.DATA, 1, 3, b"x"),
                           timeout=0.05)


def test_covert_frames_never_touch_block_store():
    """Interleaving covert traffic with a normal workload leaves the store
    byte-identical to the workload alone."""
    def run_workload(em, interleave):
        rng = random.Random(42)
        covert_rng = random.Random(7)
        seq = 0
        for step in range(400):
            lba = rng.randrange(64)
            if rng.random() < 0.5:
                em.handle_exchange(ScsiExchange(Cdb.write_10(lba, 1),
                                                block(rng.randrange(1000))))
            else:
                em.handle_exchange(ScsiExchange(Cdb.read_10(lba, 1)))
            if interleave and step % 3 == 0:
                choice = covert_rng.randrange(3)
                if choice == 0:
                    em.enqueue_command(
                        Datagram(DatagramType.DATA, 1, seq, b"cmd"))
                    seq += 1
                    em.handle_exchange(
                        ScsiExchange(mark_covert(Cdb.test_unit_ready())))
                    em.handle_exchange(
                        ScsiExchange(mark_covert(Cdb.read_10(0, 8))))
                elif choice == 1:
                    em.handle_exchange(ScsiExchange(
                        mark_covert(Cdb.write_10(0, 1)),
                        pack_blocks([Datagram(DatagramType.DATA, 1, 0,
                                              b"result")], BLOCK_SIZE)))
                else:
                    em.handle_exchange(
                        ScsiExchange(mark_covert(Cdb.test_unit_ready())))
        return em.store.read(0, 64)

    plain = run_workload(make_emulator(capacity=64), interleave=False)
    mixed = run_workload(make_emulator(capacity=64), interleave=True)
    assert plain == mixed


def test_image_persistence(tmp_path):
    path = str(tmp_path / "disk.img")
    em = make_emulator(capacity=32, image_path=path)
    b = block(9)
    em.handle_exchange(ScsiExchange(Cdb.write_10(5, 1), b))
    em.store.close()
    assert os.path.getsize(path) == 32 * BLOCK_SIZE

    reopened = make_emulator(capacity=32, image_path=path)
    assert reopened.handle_exchange(
        ScsiExchange(Cdb.read_10(5, 1))).data_in == b
    reopened.store.close()


def test_poll_config_invariant():
    with pytest.raises(ValueError):
        PollConfig(delay_ms=10, detect_margin_ms=20)
