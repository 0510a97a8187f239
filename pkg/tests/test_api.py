import base64
import json
import threading
import time

import pytest
import requests
import uvicorn
from conftest import Stack

from msdchan.api import create_app


class ApiServer:
    def __init__(self, app):
        config = uvicorn.Config(app, host="127.0.0.1", port=0,
                                log_level="error")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)

    def __enter__(self):
        self.thread.start()
        deadline = time.monotonic() + 10
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("API server failed to start")
            time.sleep(0.01)
        sock = self.server.servers[0].sockets[0]
        host, port = sock.getsockname()[:2]
        self.base = f"http://{host}:{port}"
        return self

    def __exit__(self, *exc):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture
def api(tmp_path):
    stack = Stack(tmp_path).start()
    with ApiServer(create_app(stack.console)) as server:
        yield server.base, stack
    stack.stop()


def wait_for(predicate, timeout=10.0, step=0.05):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        result = predicate()
        if result:
            return result
        time.sleep(step)
    raise AssertionError("condition not reached in time")


def read_output(base, sid, since=0):
    resp = requests.get(f"{base}/sessions/{sid}/output",
                        params={"since": since}).json()
    return base64.b64decode(resp["data"]), resp["next_offset"]


def test_session_lifecycle_over_http(api):
    base, stack = api
    assert requests.get(f"{base}/sessions").json() == {"sessions": []}

    resp = requests.post(f"{base}/sessions",
                         json={"payload_spec": "/bin/sh"})
    assert resp.status_code == 200
    sid = resp.json()["session_id"]
    assert sid == 1

    resp = requests.post(f"{base}/sessions/{sid}/input",
                         json={"line": "echo over-http"})
    assert resp.json() == {"ok": True}

    data, offset = wait_for(
        lambda: (lambda pair: pair if b"over-http\n" in pair[0] else None)(
            read_output(base, sid)))
    assert data == b"over-http\n"
    assert offset == len(data)

    sessions = requests.get(f"{base}/sessions").json()["sessions"]
    assert sessions[0]["session_id"] == sid
    assert sessions[0]["payload_spec"] == "/bin/sh"

    assert requests.delete(f"{base}/sessions/{sid}").json() == {"ok": True}
    wait_for(lambda: requests.get(
        f"{base}/sessions/{sid}").json()["state"] == "closed")


def test_http_error_mapping(api):
    base, _ = api
    assert requests.get(f"{base}/sessions/42").status_code == 404
    assert requests.post(f"{base}/sessions/42/input",
                         json={"line": "x"}).status_code == 404
    resp = requests.post(f"{base}/sessions", json={"payload_spec": "/bin/sh"})
    sid = resp.json()["session_id"]
    requests.delete(f"{base}/sessions/{sid}")
    wait_for(lambda: requests.get(
        f"{base}/sessions/{sid}").json()["state"] == "closed")
    assert requests.post(f"{base}/sessions/{sid}/input",
                         json={"line": "x"}).status_code == 409


def test_stats_endpoint(api):
    base, _ = api
    stats = requests.get(f"{base}/stats").json()
    assert set(stats) == {"polls_observed", "pending_signals_sent",
                          "covert_reads", "covert_writes", "normal_frames",
                          "queue_depth", "last_delay_applied_ms"}
    assert stats["polls_observed"] >= 1


def test_file_push_over_http(api):
    import os
    import zlib
    base, stack = api
    blob = os.urandom(50_000)
    resp = requests.post(f"{base}/files", params={"name": "pushed.bin"},
                         data=blob)
    report = resp.json()
    assert report["crc32"] == zlib.crc32(blob)

    status = wait_for(lambda: (
        lambda s: s if s["complete"] else None)(
        requests.get(f"{base}/files/{report['transfer_id']}").json()))
    assert status["complete"]
    landed = os.path.join(stack.drop_dir, "pushed.bin")
    assert open(landed, "rb").read() == blob


def test_event_stream(api):
    base, _ = api
    events = []
    done = threading.Event()

    def consume():
        with requests.get(f"{base}/events", stream=True, timeout=15) as resp:
            name = None
            for raw in resp.iter_lines():
                line = raw.decode()
                if line.startswith("event: "):
                    name = line[len("event: "):]
                elif line.startswith("data: ") and name:
                    events.append((name, json.loads(line[len("data: "):])))
                    if any(n == "output" for n, _ in events):
                        done.set()
                        return

    consumer = threading.Thread(target=consume, daemon=True)
    consumer.start()
    time.sleep(0.3)  # let the subscription attach
    sid = requests.post(f"{base}/sessions",
                        json={"payload_spec": "/bin/sh"}).json()["session_id"]
    requests.post(f"{base}/sessions/{sid}/input", json={"line": "echo sse"})
    assert done.wait(10), f"no output event, saw {events}"
    names = {n for n, _ in events}
    assert "session" in names and "output" in names
    output_events = [e for n, e in events if n == "output"]
    assert any(b"sse\n" in base64.b64decode(e["data"])
               for e in output_events)


def test_cli_and_api_share_semantics(api):
    """The same control-plane core answers both; a session opened over HTTP
    is visible to direct console calls and vice versa."""
    base, stack = api
    sid = stack.console.open_session("/bin/sh")
    sessions = requests.get(f"{base}/sessions").json()["sessions"]
    assert [s["session_id"] for s in sessions] == [sid]
    requests.post(f"{base}/sessions/{sid}/input", json={"line": "echo mix"})
    stack.wait_output(sid, b"mix\n")
    data, _ = read_output(base, sid)
    assert b"mix\n" in data
