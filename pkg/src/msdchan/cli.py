"""Command-line entry points.

Control-plane subcommands (open/exec/tail/push/stats/repl) are HTTP clients
of a running `serve` instance, so the CLI and the web console exercise the
same API surface.
"""

from __future__ import annotations

import argparse
import base64
import json
import sys
import tempfile
import threading
import time

from . import metrics
from .emulator import BlockStore, Emulator, PollConfig
from .implant import ChannelConfig, ImplantRuntime
from .transport import TransportServer, connect


def _parse_hostport(value: str, what: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    if not host or not port.isdigit():
        raise SystemExit(f"bad {what} address {value!r}, expected host:port")
    return host, int(port)


# --- serve ---

def cmd_serve(args):
    import uvicorn

    from .api import create_app
    from .console import AnalystConsole

    store = BlockStore(args.capacity_blocks, image_path=args.image)
    poll_config = PollConfig(delay_ms=args.delay_ms,
                             poll_interval_ms=args.poll_interval_ms,
                             detect_margin_ms=args.margin_ms)
    emulator = Emulator(store, poll_config)
    host, port = _parse_hostport(args.listen, "--listen")
    server = TransportServer(emulator.handle_exchange, host, port)
    server.start()
    console = AnalystConsole(emulator, file_size_cap=args.file_cap)
    console.start()
    api_host, api_port = _parse_hostport(args.api, "--api")
    app = create_app(console, static_dir=args.static_dir)
    print(f"emulator transport on {server.endpoint}")
    print(f"analyst API on http://{api_host}:{api_port}")
    try:
        uvicorn.run(app, host=api_host, port=api_port, log_level="warning")
    finally:
        console.stop()
        server.stop()
        store.close()


# --- implant ---

def cmd_implant(args):
    transport = connect(args.endpoint)
    config = ChannelConfig(poll_interval_ms=args.poll_interval_ms,
                           detect_margin_ms=args.margin_ms,
                           fetch_blocks=args.fetch_blocks)
    drop_dir = args.drop_dir or tempfile.mkdtemp(prefix="msdchan-drop-")
    implant = ImplantRuntime(transport, drop_dir, config,
                             max_sessions=args.max_sessions)
    implant.start()
    print(f"implant polling {args.endpoint} every "
          f"{args.poll_interval_ms:g} ms; drop dir {drop_dir}")
    try:
        while not implant.channel_down:
            time.sleep(0.5)
        print("channel lost; payloads left running", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        pass
    finally:
        implant.stop()
    return 0


# --- HTTP client helpers ---

def _api(args) -> str:
    return args.api.rstrip("/")


def _request(method: str, url: str, **kwargs):
    import requests

    resp = requests.request(method, url, timeout=60, **kwargs)
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise SystemExit(f"{method} {url} -> {resp.status_code}: {detail}")
    return resp


def cmd_open(args):
    resp = _request("POST", f"{_api(args)}/sessions",
                    json={"payload_spec": args.payload_spec})
    print(resp.json()["session_id"])


def cmd_exec(args):
    _request("POST", f"{_api(args)}/sessions/{args.session_id}/input",
             json={"line": args.line})


def _read_output(base: str, session_id: int, since: int) -> tuple[bytes, int]:
    resp = _request("GET", f"{base}/sessions/{session_id}/output",
                    params={"since": since}).json()
    return base64.b64decode(resp["data"]), resp["next_offset"]


def cmd_tail(args):
    base = _api(args)
    offset = args.since
    while True:
        data, offset = _read_output(base, args.session_id, offset)
        if data:
            sys.stdout.buffer.write(data)
            sys.stdout.buffer.flush()
        if not args.follow:
            return
        time.sleep(args.poll_s)


def cmd_push(args):
    base = _api(args)
    with open(args.local_path, "rb") as fh:
        resp = _request("POST", f"{base}/files",
                        params={"name": args.remote_name}, data=fh.read())
    report = resp.json()
    print(json.dumps(report, indent=2))
    deadline = time.monotonic() + args.wait_s
    while time.monotonic() < deadline:
        status = _request("GET",
                          f"{base}/files/{report['transfer_id']}").json()
        if status["complete"] or status["error"]:
            print(json.dumps(status, indent=2))
            return 0 if status["complete"] else 1
        time.sleep(0.5)
    print("transfer still in flight", file=sys.stderr)
    return 1


def cmd_stats(args):
    print(json.dumps(_request("GET", f"{_api(args)}/stats").json(), indent=2))


def cmd_repl(args):
    base = _api(args)
    if args.session_id is None:
        resp = _request("POST", f"{base}/sessions",
                        json={"payload_spec": args.payload_spec})
        session_id = resp.json()["session_id"]
        print(f"opened session {session_id} ({args.payload_spec})")
    else:
        session_id = args.session_id
    stop = threading.Event()

    def tail_loop():
        offset = 0
        while not stop.is_set():
            try:
                data, offset = _read_output(base, session_id, offset)
            except SystemExit:
                return
            if data:
                sys.stdout.buffer.write(data)
                sys.stdout.buffer.flush()
            stop.wait(args.poll_s)

    tailer = threading.Thread(target=tail_loop, daemon=True)
    tailer.start()
    try:
        for line in sys.stdin:
            _request("POST", f"{base}/sessions/{session_id}/input",
                     json={"line": line.rstrip('\n')})
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        time.sleep(args.poll_s)


# --- metrics side ---

def cmd_respond(args):
    host, port = _parse_hostport(args.listen, "--listen")
    responder = metrics.ProbeResponder(host, port, workdir=args.workdir)
    responder.stall_seconds = args.stall_ms / 1000.0
    responder.start()
    print(f"probe responder on {responder.address[0]}:{responder.address[1]}")
    try:
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        responder.stop()


def cmd_measure(args):
    host, port = _parse_hostport(args.responder, "--responder")
    cfg = metrics.ExperimentConfig(
        scenario_id=args.scenario,
        n=args.n,
        interval_s=args.interval_ms / 1000.0,
        probe=args.probe,
        responder_address=(host, port),
        csv_path=args.out,
    )
    report, _ = metrics.run_external_experiment(cfg)
    print(json.dumps(report.as_dict(), indent=2))
    if args.baseline:
        baseline = metrics.report_from_csv(args.baseline, args.baseline_scenario)
        verdict = metrics.compare_reports(baseline, report)
        print(f"verdict vs {args.baseline_scenario}: {verdict.value}")
        if args.expect:
            expected = (metrics.Verdict.WITHIN_ONE_SIGMA
                        if args.expect == "within" else
                        metrics.Verdict.DISTINGUISHABLE)
            return 0 if verdict is expected else 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msdchan",
        description="mass-storage covert channel testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("serve", help="run emulator, transport and analyst API")
    p.add_argument("--listen", default="127.0.0.1:7750",
                   help="SCSI transport listen address (host:port)")
    p.add_argument("--api", default="127.0.0.1:8750",
                   help="HTTP API listen address (host:port)")
    p.add_argument("--image", default=None,
                   help="optional raw disk image backing the block store")
    p.add_argument("--capacity-blocks", type=int, default=16384)
    p.add_argument("--delay-ms", type=float, default=40.0)
    p.add_argument("--poll-interval-ms", type=float, default=500.0)
    p.add_argument("--margin-ms", type=float, default=20.0)
    p.add_argument("--file-cap", type=int, default=64 * 1024 * 1024)
    p.add_argument("--static-dir", default=None,
                   help="directory with the built web console")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("implant", help="run the compromised-side implant")
    p.add_argument("--endpoint", required=True,
                   help='transport endpoint, e.g. tcp://127.0.0.1:7750')
    p.add_argument("--drop-dir", default=None)
    p.add_argument("--poll-interval-ms", type=float, default=500.0)
    p.add_argument("--margin-ms", type=float, default=20.0)
    p.add_argument("--fetch-blocks", type=int, default=8)
    p.add_argument("--max-sessions", type=int, default=16)
    p.set_defaults(func=cmd_implant)

    def add_api(sp):
        sp.add_argument("--api", default="http://127.0.0.1:8750")

    p = sub.add_parser("open", help="open an investigative session")
    add_api(p)
    p.add_argument("payload_spec")
    p.set_defaults(func=cmd_open)

    p = sub.add_parser("exec", help="send one input line to a session")
    add_api(p)
    p.add_argument("session_id", type=int)
    p.add_argument("line")
    p.set_defaults(func=cmd_exec)

    p = sub.add_parser("tail", help="print session output")
    add_api(p)
    p.add_argument("session_id", type=int)
    p.add_argument("--since", type=int, default=0)
    p.add_argument("--follow", action="store_true")
    p.add_argument("--poll-s", type=float, default=0.3)
    p.set_defaults(func=cmd_tail)

    p = sub.add_parser("push", help="transfer a file to the implant")
    add_api(p)
    p.add_argument("local_path")
    p.add_argument("remote_name")
    p.add_argument("--wait-s", type=float, default=300.0)
    p.set_defaults(func=cmd_push)

    p = sub.add_parser("stats", help="channel statistics snapshot")
    add_api(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("repl", help="interactive session bound to stdin")
    add_api(p)
    p.add_argument("--session-id", type=int, default=None)
    p.add_argument("--payload-spec", default="shell")
    p.add_argument("--poll-s", type=float, default=0.2)
    p.set_defaults(func=cmd_repl)

    p = sub.add_parser("respond", help="run the probe responder")
    p.add_argument("--listen", default="127.0.0.1:7900")
    p.add_argument("--workdir", default=None)
    p.add_argument("--stall-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_respond)

    p = sub.add_parser("measure", help="external round-trip experiment")
    p.add_argument("--responder", required=True, help="host:port")
    p.add_argument("--scenario", choices=metrics.SCENARIOS, required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--interval-ms", type=float, default=3000.0)
    p.add_argument("--probe", default="ls -la .")
    p.add_argument("--out", default=None, help="raw sample CSV path")
    p.add_argument("--baseline", default=None,
                   help="baseline CSV to compare against")
    p.add_argument("--baseline-scenario", default="baseline")
    p.add_argument("--expect", choices=["within", "distinguishable"],
                   default=None)
    p.set_defaults(func=cmd_measure)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    result = args.func(args)
    return int(result) if result else 0


if __name__ == "__main__":
    sys.exit(main())
