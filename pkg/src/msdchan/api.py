"""HTTP/JSON frontend over the analyst console.

Endpoints (see docs/API.md for bodies and worked examples):

    GET    /sessions
    POST   /sessions                {"payload_spec": "..."}
    GET    /sessions/{id}
    POST   /sessions/{id}/input     {"line": "..."}
    GET    /sessions/{id}/output?since=N
    DELETE /sessions/{id}
    POST   /files?name=...          (raw body bytes)
    GET    /files/{id}
    GET    /stats
    GET    /events                  (server-sent events)

Session output is raw bytes, so JSON carries it base64-encoded in "data".
"""

from __future__ import annotations

import base64
import json
import os
import queue
import tempfile

from fastapi import FastAPI, HTTPException, Request
from fastapi.responses import StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .console import AnalystConsole
from .errors import (NoImplant, QueueFull, SessionClosed, TooLarge,
                     UnknownSession)

SSE_HEARTBEAT_S = 10.0


class OpenSessionBody(BaseModel):
    payload_spec: str


class InputBody(BaseModel):
    line: str


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, UnknownSession):
        return HTTPException(404, str(e))
    if isinstance(e, SessionClosed):
        return HTTPException(409, str(e))
    if isinstance(e, (NoImplant, QueueFull)):
        return HTTPException(503, str(e))
    if isinstance(e, TooLarge):
        return HTTPException(413, str(e))
    if isinstance(e, FileNotFoundError):
        return HTTPException(404, str(e))
    return HTTPException(500, str(e))


def create_app(console: AnalystConsole,
               static_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="msdchan analyst console", docs_url=None,
                  redoc_url=None)

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": console.sessions()}

    @app.post("/sessions")
    def open_session(body: OpenSessionBody):
        try:
            sid = console.open_session(body.payload_spec)
        except Exception as e:
            raise _http_error(e)
        return {"session_id": sid}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: int):
        try:
            return console.session_view(session_id)
        except Exception as e:
            raise _http_error(e)

    @app.post("/sessions/{session_id}/input")
    def session_input(session_id: int, body: InputBody):
        try:
            console.exec(session_id, body.line)
        except Exception as e:
            raise _http_error(e)
        return {"ok": True}

    @app.get("/sessions/{session_id}/output")
    def session_output(session_id: int, since: int = 0):
        try:
            data, next_offset = console.read_output(session_id, since)
        except Exception as e:
            raise _http_error(e)
        return {"data": base64.b64encode(data).decode(),
                "next_offset": next_offset}

    @app.delete("/sessions/{session_id}")
    def close_session(session_id: int):
        try:
            console.close_session(session_id)
        except Exception as e:
            raise _http_error(e)
        return {"ok": True}

    @app.post("/files")
    async def push_file(name: str, request: Request):
        body = await request.body()
        fd, tmp = tempfile.mkstemp(prefix="msdchan-push-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(body)
            try:
                report = console.push_file(tmp, name)
            except Exception as e:
                raise _http_error(e)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return report.as_dict()

    @app.get("/files/{transfer_id}")
    def transfer_status(transfer_id: int):
        try:
            report = console.wait_transfer(transfer_id, timeout=0)
        except Exception as e:
            raise _http_error(e)
        return report.as_dict()

    @app.get("/stats")
    def stats():
        return console.stats().as_dict()

    @app.get("/events")
    def events():
        # subscribe before streaming begins so events published between the
        # request arriving and the first body chunk are not lost
        q = console.subscribe()

        def stream():
            try:
                yield ": connected\n\n"
                while True:
                    try:
                        event = q.get(timeout=SSE_HEARTBEAT_S)
                    except queue.Empty:
                        yield ": heartbeat\n\n"
                        continue
                    name = event.get("event", "message")
                    yield f"event: {name}\ndata: {json.dumps(event)}\n\n"
            finally:
                console.unsubscribe(q)

        return StreamingResponse(stream(), media_type="text/event-stream",
                                 headers={"Cache-Control": "no-cache"})

    if static_dir and os.path.isdir(static_dir):
        app.mount("/", StaticFiles(directory=static_dir, html=True),
                  name="console-ui")

    return app
