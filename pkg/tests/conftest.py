"""Shared fixtures: random data generators and a live-server harness."""
from __future__ import annotations

import json
import socket
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

import vizarel.protocol as proto
from vizarel import (DType, EpisodeStore, ExperienceBuilder, SessionSchema,
                     StepBatch, VizarelServer)

SCALAR_DTYPES = [DType.F32, DType.F64, DType.I32, DType.U8]


def rand_schema(rng: np.random.Generator, *, has_frames: bool = False,
                allow_image_obs: bool = True) -> SessionSchema:
    if allow_image_obs and rng.random() < 0.25:
        obs_dim = [int(rng.integers(4, 24)), int(rng.integers(4, 24))]
        obs_type = DType.U8
    else:
        obs_dim = [int(rng.integers(1, 9))]
        obs_type = SCALAR_DTYPES[rng.integers(0, len(SCALAR_DTYPES))]
    return SessionSchema(
        steps=int(rng.integers(0, 1000)),
        obs_dim=obs_dim,
        obs_type=obs_type,
        action_dim=[int(rng.integers(1, 5))],
        action_type=SCALAR_DTYPES[rng.integers(0, len(SCALAR_DTYPES))],
        reward_dim=int(rng.integers(1, 4)),
        reward_type=SCALAR_DTYPES[rng.integers(0, 2)],  # rewards stay float
        has_frames=has_frames,
    )


def rand_values(rng: np.random.Generator, shape: tuple, dtype: DType) -> np.ndarray:
    if dtype is DType.U8:
        return rng.integers(0, 256, size=shape, dtype=np.uint8)
    if dtype is DType.I32:
        return rng.integers(-1000, 1000, size=shape, dtype=np.int32)
    return (rng.standard_normal(shape) * 10).astype(dtype.np_dtype)


def rand_batch(rng: np.random.Generator, schema: SessionSchema, n: int,
               dones=None) -> StepBatch:
    if dones is None:
        dones = rng.random(n) < 0.1
    frames = None
    if schema.has_frames:
        frames = rng.integers(0, 256, size=(n, 8, 6, 3), dtype=np.uint8)
    return StepBatch(
        n_samples=n,
        obses=rand_values(rng, (n,) + schema.obs_dim, schema.obs_type),
        actions=rand_values(rng, (n,) + schema.action_dim, schema.action_type),
        rewards=rand_values(rng, (n, schema.reward_dim), schema.reward_type),
        dones=np.asarray(dones, dtype=bool),
        frames=frames,
    )


def build_stream(rng: np.random.Generator, schema: SessionSchema,
                 n_steps: int, *, end_done: bool = True,
                 done_prob: float = 0.05):
    """One long batch ending (optionally) in done, fed through a builder."""
    dones = rng.random(n_steps) < done_prob
    if end_done:
        dones[-1] = True
    batch = rand_batch(rng, schema, n_steps, dones=dones)
    builder = ExperienceBuilder(schema)
    exps = builder.add_batch(batch)
    tail = builder.flush()
    if tail is not None:
        exps.append(tail)
    return batch, exps


class ProtoClient:
    """Minimal binary-protocol test client over a real socket."""

    def __init__(self, port: int, host: str = "127.0.0.1"):
        self.sock = socket.create_connection((host, port), timeout=30)
        self.decoder = proto.StreamDecoder()
        self.inbox: list[proto.WireMessage] = []

    def send(self, msg_type: int, payload: bytes = b"") -> None:
        self.sock.sendall(proto.encode_message(proto.WireMessage(msg_type, payload)))

    def send_raw(self, data: bytes) -> None:
        self.sock.sendall(data)

    def recv(self, timeout: float = 30.0) -> proto.WireMessage:
        if self.inbox:
            return self.inbox.pop(0)
        self.sock.settimeout(timeout)
        while True:
            data = self.sock.recv(1 << 16)
            if not data:
                raise ConnectionError("server closed the connection")
            msgs = self.decoder.feed(data)
            if msgs:
                self.inbox.extend(msgs[1:])
                return msgs[0]

    def rpc(self, msg_type: int, payload: bytes = b"") -> proto.WireMessage:
        self.send(msg_type, payload)
        return self.recv()

    def init(self, schema: SessionSchema) -> proto.WireMessage:
        return self.rpc(proto.MSG_INIT, proto.encode_schema(schema))

    def log_state(self, batch: StepBatch, schema: SessionSchema) -> proto.WireMessage:
        return self.rpc(proto.MSG_LOG_STATE, proto.encode_step_batch(batch, schema))

    def flush(self) -> proto.WireMessage:
        return self.rpc(proto.MSG_FLUSH)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class ServerHarness:
    def __init__(self, data_dir, **kw):
        self.server = VizarelServer(data_dir, port=0, http_port=0, **kw)
        self.server.start()

    def client(self) -> ProtoClient:
        return ProtoClient(self.server.tcp_port)

    def get(self, path: str):
        """GET returning (status, parsed json)."""
        url = f"http://127.0.0.1:{self.server.http_port}{path}"
        try:
            with urllib.request.urlopen(url, timeout=30) as r:
                return r.status, json.loads(r.read())
        except urllib.error.HTTPError as e:
            body = e.read()
            try:
                return e.code, json.loads(body)
            except json.JSONDecodeError:
                return e.code, {"raw": body}

    def get_bytes(self, path: str):
        url = f"http://127.0.0.1:{self.server.http_port}{path}"
        try:
            with urllib.request.urlopen(url, timeout=30) as r:
                return r.status, r.headers.get("Content-Type"), r.read()
        except urllib.error.HTTPError as e:
            return e.code, e.headers.get("Content-Type"), e.read()

    def wait_projection(self, query: str, timeout: float = 120.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            status, body = self.get(f"/api/projection?{query}")
            if status != 409:
                return status, body
            time.sleep(0.05)
        raise TimeoutError("projection did not finish in time")

    def stop(self) -> None:
        self.server.stop()


@pytest.fixture
def harness(tmp_path):
    h = ServerHarness(tmp_path / "session")
    yield h
    h.stop()


@pytest.fixture
def small_schema() -> SessionSchema:
    return SessionSchema(steps=0, obs_dim=[3], obs_type=DType.F32,
                         action_dim=[1], action_type=DType.F32,
                         reward_dim=1, reward_type=DType.F32)


def drain_store(store: EpisodeStore, timeout: float = 30.0) -> None:
    store.flush(timeout=timeout)


def pause_and_park(store: EpisodeStore) -> None:
    """Pause commits and outwait any queue read already in flight."""
    store.pause_commits()
    time.sleep(0.15)
