"""Client for an external denoiser / scorer speaking newline-delimited JSON.

Wire format, one JSON object per line in each direction::

    -> {"id": 7, "kind": "denoise", "width": W, "height": H, "rgb": <b64>, "t": 0.4,
        "prompt": "...", "cfg": 100.0}
    <- {"id": 7, "eps_hat": <b64>}
    -> {"id": 8, "kind": "score", "width": W, "height": H, "rgb": <b64>, "text": "..."}
    <- {"id": 8, "score": 31.3}

``<b64>`` is base64 of little-endian float32, row-major ``H x W x 3``.  A
response may carry ``"error"`` instead of a result.  Ids strictly increase;
responses with an id older than the pending request (late replies to a
timed-out attempt) are skipped.
"""

from __future__ import annotations

import base64
import binascii
import json
import os
import selectors
import shlex
import socket
import subprocess
import time
from dataclasses import dataclass

import numpy as np

WIRE_DTYPE = np.dtype("<f4")


class BridgeError(RuntimeError):
    retriable = False


class BridgeTimeoutError(BridgeError):
    """No matching response within the timeout, after all retries."""

    retriable = True


class BridgeProtocolError(BridgeError):
    """The server broke the wire contract or reported an error."""


@dataclass(frozen=True)
class BridgeConfig:
    endpoint: str  # "host:port" for tcp, a command line for subprocess
    timeout: float = 30.0
    max_retries: int = 2
    transport: str = "tcp"  # or "subprocess"

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("bridge timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.transport not in ("tcp", "subprocess"):
            raise ValueError(f"unknown transport {self.transport!r}")


def encode_image(img) -> tuple[str, int, int]:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    h, w, _ = arr.shape
    return base64.b64encode(np.ascontiguousarray(arr, dtype=WIRE_DTYPE).tobytes()).decode("ascii"), w, h


def decode_image(payload: str, width: int, height: int) -> np.ndarray:
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, TypeError, ValueError) as exc:
        raise BridgeProtocolError(f"bad base64 payload: {exc}") from exc
    expected = width * height * 3 * WIRE_DTYPE.itemsize
    if len(raw) != expected:
        raise BridgeProtocolError(f"payload is {len(raw)} bytes, expected {expected} for {width}x{height}x3 float32")
    return np.frombuffer(raw, dtype=WIRE_DTYPE).reshape(height, width, 3)


class _Transport:
    """Line-oriented byte channel with deadline-bounded reads."""

    def __init__(self, cfg: BridgeConfig):
        self.cfg = cfg
        self._buf = b""
        self._proc = None
        self._sock = None
        if cfg.transport == "tcp":
            host, _, port = cfg.endpoint.rpartition(":")
            try:
                self._sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=cfg.timeout)
            except (OSError, ValueError) as exc:
                raise BridgeProtocolError(f"cannot connect to {cfg.endpoint!r}: {exc}") from exc
            self._sock.setblocking(False)
            self._rfd = self._sock
        else:
            try:
                self._proc = subprocess.Popen(shlex.split(cfg.endpoint), stdin=subprocess.PIPE,
                                              stdout=subprocess.PIPE, bufsize=0)
            except OSError as exc:
                raise BridgeProtocolError(f"cannot start {cfg.endpoint!r}: {exc}") from exc
            os.set_blocking(self._proc.stdout.fileno(), False)
            self._rfd = self._proc.stdout
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._rfd, selectors.EVENT_READ)

    def send(self, line: bytes) -> None:
        try:
            if self._sock is not None:
                self._sock.setblocking(True)
                try:
                    self._sock.sendall(line)
                finally:
                    self._sock.setblocking(False)
            else:
                self._proc.stdin.write(line)
                self._proc.stdin.flush()
        except OSError as exc:
            raise BridgeProtocolError(f"send failed: {exc}") from exc

    def _read_some(self) -> bytes:
        if self._sock is not None:
            return self._sock.recv(65536)
        return os.read(self._proc.stdout.fileno(), 65536)

    def readline(self, deadline: float) -> bytes | None:
        """Next complete line, or None once ``deadline`` passes."""
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0 or not self._sel.select(remaining):
                return None
            try:
                chunk = self._read_some()
            except BlockingIOError:
                continue
            if not chunk:
                raise BridgeProtocolError("server closed the connection")
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        return line

    def close(self) -> None:
        self._sel.close()
        if self._sock is not None:
            self._sock.close()
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.kill()
            self._proc.wait()
            self._proc.stdout.close()


class Bridge:
    """One connection to a guidance server; a single request is in flight at a time.

    Usable directly as a guidance provider (``denoise``/``score``).
    """

    def __init__(self, cfg: BridgeConfig, default_cfg: float = 200.0):
        self.cfg = cfg
        self.default_cfg = default_cfg
        self._next_id = 1
        self._transport: _Transport | None = None

    def __enter__(self) -> "Bridge":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._transport is not None:
            self._transport.close()
            self._transport = None

    def _channel(self) -> _Transport:
        if self._transport is None:
            self._transport = _Transport(self.cfg)
        return self._transport

    def _attempt(self, body: dict) -> dict | None:
        rid = self._next_id
        self._next_id += 1
        chan = self._channel()
        chan.send((json.dumps({"id": rid, **body}) + "\n").encode("utf-8"))
        deadline = time.monotonic() + self.cfg.timeout
        while True:
            line = chan.readline(deadline)
            if line is None:
                return None
            try:
                resp = json.loads(line)
            except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                raise BridgeProtocolError(f"malformed response line: {exc}") from exc
            if not isinstance(resp, dict) or not isinstance(resp.get("id"), int):
                raise BridgeProtocolError("response lacks an integer id")
            if resp["id"] < rid:
                continue  # late reply to an abandoned attempt
            if resp["id"] != rid:
                raise BridgeProtocolError(f"response id {resp['id']} does not match request id {rid}")
            if resp.get("error") is not None:
                raise BridgeProtocolError(f"server error: {resp['error']}")
            return resp

    def request(self, body: dict) -> dict:
        for _ in range(self.cfg.max_retries + 1):
            resp = self._attempt(body)
            if resp is not None:
                return resp
        raise BridgeTimeoutError(
            f"no response from {self.cfg.endpoint!r} within {self.cfg.timeout}s "
            f"({self.cfg.max_retries} retries)"
        )

    def denoise(self, z_t, t: float, prompt, cfg: float | None = None) -> np.ndarray:
        payload, w, h = encode_image(z_t)
        resp = self.request({"kind": "denoise", "width": w, "height": h, "rgb": payload, "t": float(t),
                             "prompt": str(prompt), "cfg": float(self.default_cfg if cfg is None else cfg)})
        if not isinstance(resp.get("eps_hat"), str):
            raise BridgeProtocolError("denoise response lacks eps_hat")
        return decode_image(resp["eps_hat"], w, h).astype(np.float64)

    def score(self, image, text) -> float:
        payload, w, h = encode_image(image)
        resp = self.request({"kind": "score", "width": w, "height": h, "rgb": payload, "text": str(text)})
        score = resp.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise BridgeProtocolError("score response lacks a numeric score")
        return float(score)


def denoise_remote(image, t: float, prompt, cfg: float, bridge: Bridge) -> np.ndarray:
    return bridge.denoise(image, t, prompt, cfg)


def score_remote(image, text, bridge: Bridge) -> float:
    return bridge.score(image, text)
