"""Test-only servers and corpus helpers."""

from __future__ import annotations

import http.server
import random
import threading


class S3Stub:
    """Tiny S3-compatible HTTP server: path-style GET with Range support."""

    def __init__(self, objects: dict[str, bytes], *, require_auth: bool = False,
                 truncate_responses: int | None = None):
        self.objects = dict(objects)
        self.require_auth = require_auth
        self.truncate_responses = truncate_responses
        self.requests: list[dict] = []
        stub = self

        class Handler(http.server.BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, *args):
                pass

            def do_GET(self):
                stub.requests.append(dict(self.headers))
                if stub.require_auth and "Authorization" not in self.headers:
                    self.send_response(403)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                body = stub.objects.get(self.path.lstrip("/"))
                if body is None:
                    self.send_response(404)
                    self.send_header("Content-Length", "0")
                    self.end_headers()
                    return
                range_header = self.headers.get("Range")
                if range_header and range_header.startswith("bytes="):
                    spec = range_header[len("bytes="):]
                    start_s, _, end_s = spec.partition("-")
                    start = int(start_s)
                    end = int(end_s) if end_s else len(body) - 1
                    if start >= len(body):
                        self.send_response(416)
                        self.send_header("Content-Range", f"bytes */{len(body)}")
                        self.send_header("Content-Length", "0")
                        self.end_headers()
                        return
                    end = min(end, len(body) - 1)
                    chunk = body[start : end + 1]
                    if stub.truncate_responses is not None:
                        chunk = chunk[: stub.truncate_responses]
                    self.send_response(206)
                    self.send_header("Content-Range", f"bytes {start}-{end}/{len(body)}")
                    self.send_header("Content-Length", str(len(chunk)))
                    self.end_headers()
                    self.wfile.write(chunk)
                    return
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

        self._server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self._server.server_port
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._server.shutdown()
        self._server.server_close()


def make_lines(n: int, seed: int = 0, width: int = 40) -> bytes:
    rng = random.Random(seed)
    rows = []
    for i in range(n):
        rows.append(f"{i},{rng.randrange(10**6)},{'x' * rng.randrange(1, width)}".encode())
    return b"\n".join(rows) + b"\n"
