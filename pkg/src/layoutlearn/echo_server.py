"""Reference guidance server for the bridge protocol.

``denoise`` echoes the received ``rgb`` payload back as ``eps_hat``; ``score``
answers the constant :data:`ECHO_SCORE`.  Misbehaviour modes exist to exercise
client error paths::

    python -m layoutlearn.echo_server --stdio
    python -m layoutlearn.echo_server --port 8765 --mode hang
"""

from __future__ import annotations

import argparse
import base64
import json
import socketserver
import sys
import threading

ECHO_SCORE = 31.3
MODES = ("echo", "wrong-length", "malformed", "hang", "bad-id", "error", "stale", "slow-first")


class EchoLogic:
    def __init__(self, mode: str = "echo"):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        self.seen = 0

    def respond(self, line: bytes) -> list[bytes]:
        """Response lines for one request line (possibly none)."""
        self.seen += 1
        req = json.loads(line)
        rid = req.get("id")
        mode = self.mode
        if mode == "hang" or (mode == "slow-first" and self.seen == 1):
            return []
        if mode == "malformed":
            return [b'{"id": ' + str(rid).encode() + b', "eps_hat": \n']
        if mode == "error":
            return [_dump({"id": rid, "error": "server failure"})]
        if req.get("kind") == "score":
            body = {"score": ECHO_SCORE}
        else:
            payload = req["rgb"]
            if mode == "wrong-length":
                payload = base64.b64encode(base64.b64decode(payload)[:-4]).decode("ascii")
            body = {"eps_hat": payload}
        out = []
        if mode == "stale":
            out.append(_dump({"id": rid - 1, **body}))
        out.append(_dump({"id": rid + 1 if mode == "bad-id" else rid, **body}))
        return out


def _dump(obj) -> bytes:
    return (json.dumps(obj) + "\n").encode("utf-8")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        logic = EchoLogic(self.server.mode)
        for line in self.rfile:
            for out in logic.respond(line):
                self.wfile.write(out)
            self.wfile.flush()


class EchoServer(socketserver.ThreadingTCPServer):
    """In-process TCP echo server; ``with EchoServer(mode) as s: s.endpoint``."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, mode: str = "echo", host: str = "127.0.0.1", port: int = 0):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.mode = mode
        super().__init__((host, port), _Handler)
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def __enter__(self) -> "EchoServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self.shutdown()
        self.server_close()


def serve_stdio(mode: str = "echo") -> None:
    logic = EchoLogic(mode)
    out = sys.stdout.buffer
    for line in sys.stdin.buffer:
        for r in logic.respond(line):
            out.write(r)
        out.flush()


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mode", choices=MODES, default="echo")
    group = ap.add_mutually_exclusive_group(required=True)
    group.add_argument("--stdio", action="store_true")
    group.add_argument("--port", type=int)
    args = ap.parse_args(argv)
    if args.stdio:
        serve_stdio(args.mode)
    else:
        with EchoServer(args.mode, port=args.port) as srv:
            print(f"listening on {srv.endpoint}", flush=True)
            srv._thread.join()
    return 0


if __name__ == "__main__":
    sys.exit(main())
