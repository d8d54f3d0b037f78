"""Read-only HTTP/JSON view of a running node, plus the operator recover hook.

The server runs on its own thread (stdlib ``ThreadingHTTPServer``).  Every
response is built on the node's event loop, between two message handlers,
so it always sees a consistent snapshot and never races the apply path.
"""

from __future__ import annotations

import asyncio
import hmac
import json
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

MAX_BLOCKS = 500
SNAPSHOT_TIMEOUT = 5.0


class _Reply(Exception):
    def __init__(self, status: int, body: dict):
        self.status = status
        self.body = body


def _int_arg(qs: dict, name: str, default: int) -> int:
    try:
        return int(qs.get(name, [default])[0])
    except ValueError:
        raise _Reply(HTTPStatus.BAD_REQUEST, {"error": "bad-argument", "argument": name}) from None


class MonitorViews:
    """Pure functions of node state; called on the loop thread only."""

    def __init__(self, node, token: str):
        self.node = node
        self.token = token

    def get(self, path: str, qs: dict) -> tuple[int, dict]:
        node = self.node
        if path == "/chain/head":
            return 200, {"height": node.chain.head_seq, "hash": node.chain.head_hash.hex()}
        if path == "/chain/blocks":
            start = max(1, _int_arg(qs, "from", 1))
            count = min(MAX_BLOCKS, max(0, _int_arg(qs, "count", 20)))
            return 200, {"blocks": [b.to_dict() for b in node.chain.range(start, count)]}
        if path.startswith("/block/"):
            try:
                h = bytes.fromhex(path[len("/block/"):])
            except ValueError:
                h = b""
            blk = node.chain.get_by_hash(h)
            if blk is None:
                return 404, {"error": "unknown-block"}
            return 200, blk.to_dict()
        if path == "/view":
            cfg = node.replica.config
            return 200, {"viewNumber": cfg.viewNumber, "members": list(cfg.members), "f": cfg.f, "leader": cfg.leader,
                         "status": node.replica.status}
        if path == "/engine/digest":
            return 200, {"stateDigest": node.engine.digest().hex(), "lastBlockHash": node.engine.lastBlockHash.hex(),
                         "appliedCount": node.engine.appliedCount}
        if path == "/status":
            return 200, node.status()
        return 404, {"error": "unknown-endpoint"}

    def post(self, path: str, headers) -> tuple[int, dict]:
        if path != "/recover":
            return 404, {"error": "unknown-endpoint"}
        given = headers.get("X-Operator-Token", "")
        auth = headers.get("Authorization", "")
        if auth.startswith("Bearer "):
            given = auth[len("Bearer "):]
        if not self.token or not hmac.compare_digest(given.encode(), self.token.encode()):
            return 403, {"error": "bad-operator-token"}
        self.node.recover(None)
        return 202, {"status": "recovery-started"}


class MonitorServer:
    def __init__(self, node, loop: asyncio.AbstractEventLoop, host: str, port: int, token: str = ""):
        self.views = MonitorViews(node, token)
        self.loop = loop
        views, run_on_loop = self.views, self._on_loop

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, fmt, *args):  # keep test output quiet
                pass

            def _send(self, status: int, body: dict) -> None:
                data = json.dumps(body, sort_keys=True).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                url = urlparse(self.path)
                self._send(*run_on_loop(views.get, url.path, parse_qs(url.query)))

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                if length:
                    self.rfile.read(length)
                self._send(*run_on_loop(views.post, urlparse(self.path).path, self.headers))

        self.httpd = ThreadingHTTPServer((host, port), Handler)
        self.httpd.daemon_threads = True
        self.port = self.httpd.server_address[1]
        self.thread = threading.Thread(target=self.httpd.serve_forever, name="monitor", daemon=True)

    def _on_loop(self, fn, *args) -> tuple[int, dict]:
        async def run():
            try:
                return fn(*args)
            except _Reply as r:
                return r.status, r.body

        try:
            return asyncio.run_coroutine_threadsafe(run(), self.loop).result(SNAPSHOT_TIMEOUT)
        except Exception as exc:  # loop gone or wedged
            return 503, {"error": "node-unavailable", "detail": type(exc).__name__}

    def start(self) -> int:
        self.thread.start()
        return self.port

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
