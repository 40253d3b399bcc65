"""Fixtures: a scriptable fake ingestion server and a real one."""
from __future__ import annotations

import json
import pathlib
import socket
import subprocess
import sys
import threading
import time
import urllib.error
import urllib.request

import pytest

from vizarel_client import wire

GOLDEN_DIR = pathlib.Path(__file__).parents[2] / "tests" / "golden"


def default_reply(msg_type: int, payload: bytes, state: dict):
    if msg_type == wire.MSG_INIT:
        return wire.encode_frame(wire.MSG_ACK, (0).to_bytes(8, "little")), False
    return wire.encode_frame(wire.MSG_ACK), False


class FakeServer:
    """One-connection-at-a-time TCP server speaking just enough protocol.

    `reply(msg_type, payload, state) -> (frame_bytes | None, close_after)`
    decides each response; `state` is a scratch dict for counting.
    Every received (msg_type, payload) lands in `messages`.
    """

    def __init__(self, reply=None, port: int = 0):
        self._srv = socket.create_server(("127.0.0.1", port))
        self._srv.settimeout(0.2)
        self.port = self._srv.getsockname()[1]
        self.messages: list[tuple[int, bytes]] = []
        self.reply = reply or default_reply
        self.state: dict = {}
        self._stop = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop:
            try:
                conn, _ = self._srv.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            with conn:
                conn.settimeout(0.2)
                self._serve(conn)
        self._srv.close()

    def _serve(self, conn: socket.socket) -> None:
        while not self._stop:
            try:
                header = self._read_exact(conn, wire.HEADER_SIZE)
                if header is None:
                    return
                msg_type, payload_len = wire.decode_frame(header)
                payload = self._read_exact(conn, payload_len)
                if payload is None:
                    return
            except TimeoutError:
                continue
            except (OSError, wire.WireError):
                return
            self.messages.append((msg_type, payload))
            frame, close_after = self.reply(msg_type, payload, self.state)
            if frame is not None:
                conn.sendall(frame)
            if close_after:
                return

    @staticmethod
    def _read_exact(conn: socket.socket, n: int) -> bytes | None:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = conn.recv(n - len(buf))
            except TimeoutError:
                if buf:
                    continue  # mid-frame, keep waiting
                raise
            if not chunk:
                return None
            buf.extend(chunk)
        return bytes(buf)

    def wait_for(self, predicate, timeout: float = 10.0) -> None:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if predicate(self.messages):
                return
            time.sleep(0.01)
        raise AssertionError(
            f"server never saw expected traffic; got {self.messages!r}")

    def stop(self) -> None:
        self._stop = True
        self._thread.join(5)
        self._srv.close()


@pytest.fixture
def fake_server():
    servers = []

    def make(reply=None, port: int = 0) -> FakeServer:
        srv = FakeServer(reply=reply, port=port)
        servers.append(srv)
        return srv

    yield make
    for srv in servers:
        srv.stop()


def reserved_port() -> int:
    """A port that is currently closed but was just bindable."""
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class LiveServer:
    def __init__(self, data_dir: pathlib.Path):
        self.port = reserved_port()
        self.http_port = reserved_port()
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "vizarel.cli", "serve",
             "--data-dir", str(data_dir),
             "--port", str(self.port), "--http-port", str(self.http_port)],
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        deadline = time.monotonic() + 15
        while True:
            try:
                self.get("/api/metrics")
                break
            except (urllib.error.URLError, ConnectionError):
                if self.proc.poll() is not None:
                    out = self.proc.stdout.read().decode()
                    raise RuntimeError(f"server exited early:\n{out}")
                if time.monotonic() > deadline:
                    raise RuntimeError("server never became ready")
                time.sleep(0.1)

    def get(self, path: str):
        with urllib.request.urlopen(
                f"http://127.0.0.1:{self.http_port}{path}", timeout=10) as r:
            return json.loads(r.read())

    def stop(self) -> None:
        self.proc.terminate()
        try:
            self.proc.wait(10)
        except subprocess.TimeoutExpired:
            self.proc.kill()
            self.proc.wait(10)


@pytest.fixture
def live_server(tmp_path):
    srv = LiveServer(tmp_path / "session")
    yield srv
    srv.stop()
