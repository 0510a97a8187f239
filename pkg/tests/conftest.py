import time

import pytest

from msdchan.console import AnalystConsole
from msdchan.emulator import BlockStore, Emulator, PollConfig
from msdchan.implant import ChannelConfig, ImplantRuntime
from msdchan.transport import TransportServer, connect


class Stack:
    """Full loopback stack: emulator + console + in-process implant."""

    def __init__(self, tmp_path, poll_interval_ms=25.0, delay_ms=40.0,
                 margin_ms=20.0, capacity_blocks=4096, tcp=False,
                 fetch_blocks=8):
        self.store = BlockStore(capacity_blocks)
        self.emulator = Emulator(self.store, PollConfig(
            delay_ms=delay_ms, poll_interval_ms=poll_interval_ms,
            detect_margin_ms=margin_ms))
        self.server = None
        if tcp:
            self.server = TransportServer(self.emulator.handle_exchange)
            self.server.start()
            self.transport = connect(self.server.endpoint)
        else:
            self.transport = connect("loopback",
                                     handler=self.emulator.handle_exchange)
        self.drop_dir = str(tmp_path / "drop")
        self.implant = ImplantRuntime(
            self.transport, self.drop_dir,
            ChannelConfig(poll_interval_ms=poll_interval_ms,
                          detect_margin_ms=margin_ms,
                          fetch_blocks=fetch_blocks))
        self.console = AnalystConsole(self.emulator)

    def start(self):
        self.console.start()
        self.implant.start()
        assert self.console.wait_for_implant(5.0), "implant never polled"
        return self

    def stop(self):
        self.implant.stop()
        self.console.stop()
        if self.server:
            self.server.stop()
        self.store.close()

    def wait_output(self, session_id, needle: bytes, timeout=10.0) -> bytes:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            data, _ = self.console.read_output(session_id)
            if needle in data:
                return data
            time.sleep(0.02)
        data, _ = self.console.read_output(session_id)
        raise AssertionError(f"{needle!r} not seen in output: {data!r}")

    def wait_state(self, session_id, state: str, timeout=10.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.console.session_view(session_id)["state"] == state:
                return
            time.sleep(0.02)
        raise AssertionError(
            f"session {session_id} never reached {state}: "
            f"{self.console.session_view(session_id)}")


@pytest.fixture
def stack(tmp_path):
    s = Stack(tmp_path).start()
    yield s
    s.stop()


@pytest.fixture
def tcp_stack(tmp_path):
    s = Stack(tmp_path, tcp=True).start()
    yield s
    s.stop()
