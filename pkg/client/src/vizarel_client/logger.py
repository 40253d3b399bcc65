"""Training-loop logger with a non-blocking local send buffer.

The contract is that `log_state` never blocks on the network and never
raises on transient network failure: it validates, encodes, and pushes
the frame onto a bounded queue. A background sender owns the socket.
Under sustained backpressure the queue drops its oldest frame and
counts the loss; `close()` reports the total.
"""
from __future__ import annotations

import collections
import logging
import os
import socket
import threading
import time
import warnings

import numpy as np

from . import wire

log = logging.getLogger("vizarel_client")

DEFAULT_ENDPOINT = "127.0.0.1:7007"
DEFAULT_QUEUE_SIZE = 256
REPLY_TIMEOUT = 10.0
RECONNECT_BACKOFF_MAX = 2.0


class ConfigurationError(ValueError):
    """Bad logger configuration, locally or as judged by the server."""


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ConfigurationError(
            f"endpoint must be host:port, got {endpoint!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigurationError(f"bad endpoint port {port!r}") from None


def _check_dims(name: str, dims) -> tuple[int, ...]:
    if dims is None:
        raise ConfigurationError(f"{name} is required")
    out = tuple(int(d) for d in np.atleast_1d(dims))
    if not out or any(d < 1 for d in out):
        raise ConfigurationError(f"{name} must be positive, got {dims!r}")
    return out


def _check_dtype(name: str, dtype: str) -> str:
    if dtype not in wire.DTYPES:
        raise ConfigurationError(
            f"{name} must be one of {sorted(wire.DTYPES)}, got {dtype!r}")
    return dtype


class VizarelState:
    """Handle for one logging session against a telemetry server.

    Typical use is two lines in the training loop::

        viz = VizarelState(obs_dim=[3], action_dim=[1], reward_dim=1)
        ...
        viz.log_state(1, [obs], [action], [reward], [done])

    The endpoint comes from the ``endpoint`` argument, the
    ``VIZAREL_ENDPOINT`` environment variable, or the local default,
    in that order. If the server is unreachable at construction time
    the handle still comes up and buffers; if the server is reachable
    but rejects the schema, construction fails immediately.
    """

    def __init__(self, steps: int = 0, obs_dim=None, obs_type: str = "f32",
                 action_dim=None, action_type: str = "f32",
                 reward_dim: int = 1, reward_type: str = "f32",
                 has_frames: bool = False, endpoint: str | None = None,
                 *, queue_size: int = DEFAULT_QUEUE_SIZE,
                 connect_timeout: float = 1.0):
        if reward_dim < 1:
            raise ConfigurationError("reward_dim must be at least 1")
        if queue_size < 1:
            raise ConfigurationError("queue_size must be at least 1")
        self.schema = wire.SchemaConfig(
            steps=int(steps),
            obs_dim=_check_dims("obs_dim", obs_dim),
            obs_type=_check_dtype("obs_type", obs_type),
            action_dim=_check_dims("action_dim", action_dim),
            action_type=_check_dtype("action_type", action_type),
            reward_dim=int(reward_dim),
            reward_type=_check_dtype("reward_type", reward_type),
            has_frames=bool(has_frames),
        )
        self.host, self.port = _parse_endpoint(
            endpoint or os.environ.get("VIZAREL_ENDPOINT", DEFAULT_ENDPOINT))
        self.session_id: int | None = None

        self._init_frame = wire.encode_init(self.schema)
        self._cap = queue_size
        self._q: collections.deque[bytes] = collections.deque()
        self._cond = threading.Condition()
        self._drops = 0
        self._closed = False
        self._dead = False
        self._deadline: float | None = None
        self._sock: socket.socket | None = None

        # Fail fast when the server is there to be asked: a rejected
        # schema is a bug in the caller's configuration, not a network
        # condition to be buffered through.
        try:
            self._sock = self._connect_and_init(connect_timeout,
                                                fail_fast=True)
        except ConfigurationError:
            raise
        except OSError as exc:
            log.warning("server %s:%s unreachable (%s); buffering",
                        self.host, self.port, exc)

        self._sender = threading.Thread(target=self._run, daemon=True,
                                        name="vizarel-sender")
        self._sender.start()

    # -- producer side -----------------------------------------------------------

    def log_state(self, n_samples: int, obses, actions, rewards, dones,
                  frames=None) -> None:
        """Record a batch of steps. Returns after an encode and a queue push."""
        if self._closed:
            raise RuntimeError("log_state on a closed handle")
        n = int(n_samples)
        if n < 1:
            raise ValueError("n_samples must be at least 1")
        s = self.schema
        obses = self._coerce("obses", obses, s.obs_type, (n,) + s.obs_dim)
        actions = self._coerce("actions", actions, s.action_type,
                               (n,) + s.action_dim)
        rewards_explicit = isinstance(rewards, np.ndarray)
        rewards = np.asarray(rewards)
        if s.reward_dim == 1 and rewards.shape == (n,):
            rewards = rewards.reshape(n, 1)
        rewards = self._coerce("rewards", rewards, s.reward_type,
                               (n, s.reward_dim), explicit=rewards_explicit)
        dones = np.asarray(dones, dtype=bool)
        if dones.shape != (n,):
            raise ValueError(f"dones must have shape ({n},), "
                             f"got {dones.shape}")
        if s.has_frames:
            if frames is None:
                raise ValueError("schema declares frames but none were given")
            frames = np.asarray(frames)
            if frames.ndim != 4 or frames.shape[0] != n or frames.shape[3] != 3:
                raise ValueError(f"frames must have shape ({n}, H, W, 3), "
                                 f"got {frames.shape}")
            frames = self._coerce("frames", frames, "u8", frames.shape)
        elif frames is not None:
            raise ValueError("schema declares no frames")

        frame = wire.encode_log_state(s, n, obses, actions, rewards, dones,
                                      frames)
        with self._cond:
            if len(self._q) >= self._cap:
                self._q.popleft()
                self._drops += 1
            self._q.append(frame)
            self._cond.notify()

    def _coerce(self, name: str, value, dtype: str, shape: tuple[int, ...],
                explicit: bool | None = None) -> np.ndarray:
        target = wire.DTYPES[dtype][1]
        if explicit is None:
            explicit = isinstance(value, np.ndarray)
        arr = np.asarray(value)
        if arr.shape != shape:
            raise ValueError(f"{name} must have shape {shape}, "
                             f"got {arr.shape}")
        if arr.dtype != target:
            # only a deliberately typed array earns a lossy-cast warning;
            # plain lists carry no precision intent
            if explicit and not np.can_cast(arr.dtype, target,
                                            casting="safe"):
                warnings.warn(f"lossy cast of {name} from {arr.dtype} "
                              f"to {dtype}", stacklevel=3)
            arr = arr.astype(target)
        return arr

    @property
    def drop_count(self) -> int:
        with self._cond:
            return self._drops

    def close(self, timeout: float = 5.0) -> int:
        """Drain with a deadline, send FLUSH, return total dropped frames."""
        with self._cond:
            if self._closed:
                return self._drops
            self._closed = True
            self._deadline = time.monotonic() + timeout
            self._cond.notify_all()
        self._sender.join(timeout + 1.0)
        with self._cond:
            if self._q:
                self._drops += len(self._q)
                self._q.clear()
                self._dead = True
                log.warning("closed with %d frames undelivered", self._drops)
            return self._drops

    # -- sender thread -----------------------------------------------------------

    def _connect_and_init(self, timeout: float,
                          fail_fast: bool = False) -> socket.socket:
        """Open a connection and complete the INIT handshake on it."""
        sock = socket.create_connection((self.host, self.port),
                                        timeout=timeout)
        try:
            sock.settimeout(REPLY_TIMEOUT)
            sock.sendall(self._init_frame)
            msg_type, payload = self._read_reply(sock)
            if msg_type == wire.MSG_ERROR:
                code, _, text = wire.decode_error(payload)
                if fail_fast or code == wire.ERR_SCHEMA:
                    raise ConfigurationError(f"server rejected session: {text}")
                raise OSError(f"server refused connection: {text}")
            self.session_id = wire.decode_ack(payload)
            return sock
        except BaseException:
            sock.close()
            raise

    def _read_reply(self, sock: socket.socket) -> tuple[int, bytes]:
        header = self._read_exact(sock, wire.HEADER_SIZE)
        msg_type, payload_len = wire.decode_frame(header)
        return msg_type, self._read_exact(sock, payload_len)

    @staticmethod
    def _read_exact(sock: socket.socket, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = sock.recv(n - len(buf))
            if not chunk:
                raise OSError("connection closed by server")
            buf.extend(chunk)
        return bytes(buf)

    def _run(self) -> None:
        pending: bytes | None = None
        while True:
            if pending is None:
                pending = self._next_frame()
                if pending is None:
                    break
            if not self._ensure_connected():
                with self._cond:
                    self._drops += 1  # the frame in hand is lost too
                break
            try:
                self._sock.sendall(pending)
                msg_type, payload = self._read_reply(self._sock)
            except (OSError, wire.WireError):
                self._disconnect()
                continue  # retry the same frame on a fresh connection
            if msg_type == wire.MSG_ACK:
                pending = None
                continue
            if msg_type == wire.MSG_ERROR:
                code, retry_ms, text = wire.decode_error(payload)
                if code == wire.ERR_BACKPRESSURE:
                    if not self._sleep_until_retry(retry_ms):
                        with self._cond:
                            self._drops += 1
                        break
                    continue  # same frame again
                log.warning("server rejected a batch (%s); dropping it", text)
                with self._cond:
                    self._drops += 1
                pending = None
                continue
            self._disconnect()  # anything else is a framing problem
        self._shutdown_socket()

    def _next_frame(self) -> bytes | None:
        with self._cond:
            while True:
                if self._dead:
                    self._drops += len(self._q)
                    self._q.clear()
                    return None
                if self._q:
                    if self._past_deadline():
                        self._drops += len(self._q)
                        self._q.clear()
                        return None
                    return self._q.popleft()
                if self._closed:
                    return None
                self._cond.wait(timeout=0.2)

    def _past_deadline(self) -> bool:
        return (self._deadline is not None
                and time.monotonic() > self._deadline)

    def _ensure_connected(self) -> bool:
        backoff = 0.2
        while self._sock is None:
            if self._dead or (self._closed and self._past_deadline()):
                return False
            try:
                self._sock = self._connect_and_init(timeout=2.0)
            except ConfigurationError as exc:
                # schema rejected on reconnect: retrying cannot help
                log.error("giving up: %s", exc)
                with self._cond:
                    self._dead = True
                return False
            except OSError:
                # interruptible: close() notifies so the deadline is
                # rechecked at once rather than after a full backoff
                with self._cond:
                    self._cond.wait(timeout=backoff)
                backoff = min(backoff * 2, RECONNECT_BACKOFF_MAX)
        return True

    def _sleep_until_retry(self, retry_ms: int) -> bool:
        delay = min(max(retry_ms, 10) / 1000.0, 2.0)
        if self._closed:
            remaining = (self._deadline or 0) - time.monotonic()
            if remaining <= 0:
                return False
            delay = min(delay, remaining)
        time.sleep(delay)
        return True

    def _disconnect(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def _shutdown_socket(self) -> None:
        # best-effort flush so the server seals the episode tail
        if self._sock is not None and not self._dead:
            try:
                self._sock.sendall(wire.encode_flush())
                self._read_reply(self._sock)
            except (OSError, wire.WireError):
                pass
        self._disconnect()
