"""Telemetry server: binary ingestion endpoint plus HTTP/JSON queries.

Three thread groups cooperate here. Ingestion connections decode wire
messages and enqueue experiences (never touching disk themselves), the
store's commit thread persists them, and HTTP query threads serve
snapshot reads. Projections run as cancellable background jobs cached
by parameter set and manifest version.
"""
from __future__ import annotations

import io
import json
import logging
import mimetypes
import os
import socketserver
import threading
from collections import OrderedDict
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import analytics, protocol
from .errors import (BackpressureError, BoundsError, FramingError,
                     NotFoundError, SchemaError, StoreStateError)
from .model import ExperienceBuilder, SessionSchema
from .projection import (ProjectionCancelled, ProjectionParams, featurize,
                         project, subsample)
from .storage import EpisodeStore

log = logging.getLogger("vizarel.server")

DEFAULT_PORT = 7007
DEFAULT_HTTP_PORT = 7008

# Response caps for per-dimension series; documented in API.md.
MAX_STATE_SERIES = 64
MAX_ACTION_SERIES = 16
MAX_REWARD_SERIES = 16

PROJECTION_CACHE_SIZE = 8


def schema_to_json(s: SessionSchema) -> dict:
    return {
        "steps": s.steps,
        "obs_dim": list(s.obs_dim),
        "obs_type": s.obs_type.name,
        "action_dim": list(s.action_dim),
        "action_type": s.action_type.name,
        "reward_dim": s.reward_dim,
        "reward_type": s.reward_type.name,
        "has_frames": s.has_frames,
    }


class SessionState:
    """Server-side state of the single ingestion session."""

    def __init__(self, schema: SessionSchema):
        self.schema = schema
        self.builder = ExperienceBuilder(schema)
        self.session_id = 0
        self.steps_received = 0


class _ProjectionJob:
    def __init__(self):
        self.progress = 0.0
        self.result = None
        self.error: Exception | None = None
        self.cancel = threading.Event()
        self.done = threading.Event()


class ProjectionJobManager:
    """At most one running job per parameter set; results cached.

    The cache key includes the manifest version, so new commits
    naturally invalidate stale projections.
    """

    def __init__(self, store_getter):
        self._store_getter = store_getter
        self._lock = threading.Lock()
        self._cache: OrderedDict = OrderedDict()
        self._jobs: dict = {}

    def request(self, window: int | None, max_points: int,
                perplexity: float, seed: int):
        """Returns ("done", result) | ("computing", progress) | ("error", exc)."""
        store = self._store_getter()
        if store is None:
            return "error", ValueError("no session data yet")
        key = (window, max_points, perplexity, seed, store.manifest_version)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return "done", self._cache[key]
            job = self._jobs.get(key)
            if job is None:
                job = _ProjectionJob()
                self._jobs[key] = job
                threading.Thread(target=self._run, name="vizarel-projection",
                                 args=(key, job, store), daemon=True).start()
                return "computing", 0.0
            if not job.done.is_set():
                return "computing", job.progress
            del self._jobs[key]
            if job.error is not None:
                return "error", job.error
            self._cache[key] = job.result
            while len(self._cache) > PROJECTION_CACHE_SIZE:
                self._cache.popitem(last=False)
            return "done", job.result

    def _run(self, key, job: _ProjectionJob, store: EpisodeStore) -> None:
        window, max_points, perplexity, seed, _version = key
        try:
            episodes = self._load_window(store, window)
            exps, refs = subsample(episodes, window, max_points, seed)
            feats = featurize(exps, refs)

            def on_progress(frac: float) -> None:
                job.progress = frac

            params = ProjectionParams(perplexity=perplexity, seed=seed)
            job.result = project(feats.X, feats.refs, params,
                                 progress=on_progress, cancel=job.cancel)
        except ProjectionCancelled:
            job.error = ProjectionCancelled("cancelled")
        except Exception as exc:
            job.error = exc
        finally:
            job.done.set()

    def _load_window(self, store: EpisodeStore, window: int | None) -> list:
        snap = store.snapshot()
        chosen = []
        if window is None:
            chosen = list(snap.entries)
        else:
            have = 0
            for entry in reversed(snap.entries):
                chosen.append(entry)
                have += entry.n_steps
                if have >= window:
                    break
            chosen.reverse()
        return [store.read_episode(e.episode_id) for e in chosen]

    def cancel_all(self) -> None:
        with self._lock:
            jobs = list(self._jobs.values())
        for j in jobs:
            j.cancel.set()


class _ConnState:
    __slots__ = ("inited",)

    def __init__(self):
        self.inited = False


class _IngestionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        server: VizarelServer = self.server.vizarel
        if not server.ingest_slot.acquire(blocking=False):
            self._send(protocol.encode_error(
                protocol.ERR_PROTOCOL, "another ingestion connection is active"))
            return
        conn = _ConnState()
        decoder = protocol.StreamDecoder()
        try:
            while True:
                try:
                    data = self.request.recv(1 << 16)
                except OSError:
                    break
                if not data:
                    break
                try:
                    messages = decoder.feed(data)
                except FramingError as exc:
                    self._send(protocol.encode_error(protocol.ERR_PROTOCOL, str(exc)))
                    break
                closing = False
                for msg in messages:
                    reply, closing = server.dispatch(msg, conn)
                    self._send(reply)
                    if closing:
                        break
                if closing:
                    break
        finally:
            server.ingest_slot.release()

    def _send(self, payload: bytes) -> None:
        try:
            self.request.sendall(payload)
        except OSError:
            pass


class _IngestionServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _QueryServer(ThreadingHTTPServer):
    allow_reuse_address = True
    daemon_threads = True


class VizarelServer:
    """Owns the store, the session, and both network endpoints."""

    def __init__(self, data_dir: str | os.PathLike, *,
                 host: str = "127.0.0.1",
                 port: int | None = None,
                 http_port: int | None = None,
                 ui_dir: str | os.PathLike | None = None,
                 store_options: dict | None = None):
        self.data_dir = Path(data_dir)
        self.host = host
        self._want_port = port if port is not None else int(
            os.environ.get("VIZAREL_PORT", DEFAULT_PORT))
        self._want_http_port = http_port if http_port is not None else int(
            os.environ.get("VIZAREL_HTTP_PORT", DEFAULT_HTTP_PORT))
        self.ui_dir = Path(ui_dir).resolve() if ui_dir else None
        self._store_options = store_options or {}
        self.store: EpisodeStore | None = None
        self.session: SessionState | None = None
        if (self.data_dir / "manifest").exists():
            self.store = EpisodeStore.open_write(self.data_dir, **self._store_options)
            self.session = SessionState(self.store.schema)
        self.ingest_slot = threading.Lock()
        self._state_lock = threading.Lock()
        self.projections = ProjectionJobManager(lambda: self.store)
        self._tcp = None
        self._http = None

    # -- lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        self._tcp = _IngestionServer((self.host, self._want_port), _IngestionHandler)
        self._tcp.vizarel = self
        self._http = _QueryServer((self.host, self._want_http_port), _QueryHandler)
        self._http.vizarel = self
        threading.Thread(target=self._tcp.serve_forever, name="vizarel-ingest",
                         daemon=True).start()
        threading.Thread(target=self._http.serve_forever, name="vizarel-http",
                         daemon=True).start()
        log.info("ingestion on %s:%d, queries on %s:%d",
                 self.host, self.tcp_port, self.host, self.http_port)

    def stop(self) -> None:
        if self._tcp is not None:
            self._tcp.shutdown()
            self._tcp.server_close()
            self._tcp = None
        if self._http is not None:
            self._http.shutdown()
            self._http.server_close()
            self._http = None
        self.projections.cancel_all()
        if self.store is not None:
            if self.session is not None:
                tail = self.session.builder.flush()
                if tail is not None:
                    try:
                        self.store.enqueue_append([tail])
                    except (BackpressureError, StoreStateError):
                        log.warning("dropping trailing step at shutdown")
            self.store.close()

    @property
    def tcp_port(self) -> int:
        return self._tcp.server_address[1]

    @property
    def http_port(self) -> int:
        return self._http.server_address[1]

    # -- ingestion dispatch --------------------------------------------------------

    def dispatch(self, msg: protocol.WireMessage, conn: _ConnState) -> tuple[bytes, bool]:
        """Returns (reply bytes, close-connection flag)."""
        if msg.msg_type == protocol.MSG_INIT:
            return self._handle_init(msg.payload, conn)
        if msg.msg_type == protocol.MSG_LOG_STATE:
            return self._handle_log_state(msg.payload, conn)
        if msg.msg_type == protocol.MSG_FLUSH:
            return self._handle_flush(conn)
        return (protocol.encode_error(protocol.ERR_PROTOCOL,
                                      f"unexpected message type 0x{msg.msg_type:02x}"),
                True)

    def _handle_init(self, payload: bytes, conn: _ConnState) -> tuple[bytes, bool]:
        if conn.inited:
            return (protocol.encode_error(protocol.ERR_PROTOCOL,
                                          "session already initialized"), False)
        try:
            schema, consumed = protocol.decode_schema(payload)
            if consumed != len(payload):
                raise FramingError("trailing bytes after schema")
            schema.validate()
        except (FramingError, SchemaError, ValueError) as exc:
            code = (protocol.ERR_SCHEMA if isinstance(exc, SchemaError)
                    else protocol.ERR_PROTOCOL)
            return protocol.encode_error(code, str(exc)), False
        with self._state_lock:
            if self.store is None:
                self.store = EpisodeStore.create(self.data_dir, schema,
                                                 **self._store_options)
                self.session = SessionState(schema)
            elif schema != self.store.schema:
                return (protocol.encode_error(
                    protocol.ERR_SCHEMA,
                    "schema does not match the existing session"), False)
            elif self.session is None:
                self.session = SessionState(schema)
        conn.inited = True
        return protocol.encode_ack(self.session.session_id), False

    def _handle_log_state(self, payload: bytes, conn: _ConnState) -> tuple[bytes, bool]:
        if not conn.inited or self.session is None or self.store is None:
            return (protocol.encode_error(protocol.ERR_PROTOCOL,
                                          "LOG_STATE before INIT"), False)
        session = self.session
        try:
            batch = protocol.decode_step_batch(payload, session.schema)
        except (FramingError, SchemaError) as exc:
            code = (protocol.ERR_SCHEMA if isinstance(exc, SchemaError)
                    else protocol.ERR_PROTOCOL)
            return protocol.encode_error(code, str(exc)), False
        # the batch is applied atomically: on any failure below the
        # builder carry is rolled back and nothing reaches the queue
        saved_carry = session.builder.carry
        saved_t = session.builder.next_t
        try:
            experiences = session.builder.add_batch(batch)
            depth = self.store.enqueue_append(experiences)
        except BackpressureError as exc:
            session.builder.carry = saved_carry
            session.builder.next_t = saved_t
            return (protocol.encode_error(protocol.ERR_BACKPRESSURE, str(exc),
                                          retry_after_ms=exc.retry_after_ms), False)
        except (SchemaError, StoreStateError) as exc:
            session.builder.carry = saved_carry
            session.builder.next_t = saved_t
            return protocol.encode_error(protocol.ERR_SCHEMA, str(exc)), False
        session.steps_received += batch.n_samples
        return protocol.encode_ack(depth), False

    def _handle_flush(self, conn: _ConnState) -> tuple[bytes, bool]:
        if not conn.inited or self.session is None or self.store is None:
            return (protocol.encode_error(protocol.ERR_PROTOCOL,
                                          "FLUSH before INIT"), False)
        saved_carry = self.session.builder.carry
        saved_t = self.session.builder.next_t
        tail = self.session.builder.flush()
        try:
            if tail is not None:
                self.store.enqueue_append([tail])
            self.store.flush()
        except (BackpressureError, StoreStateError) as exc:
            self.session.builder.carry = saved_carry
            self.session.builder.next_t = saved_t
            code = (protocol.ERR_BACKPRESSURE if isinstance(exc, BackpressureError)
                    else protocol.ERR_INTERNAL)
            return protocol.encode_error(code, str(exc)), False
        return protocol.encode_ack(None), False

    # -- convenience for tests and the CLI -----------------------------------------

    def serve_forever(self) -> None:
        self.start()
        try:
            threading.Event().wait()
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()


class _QueryHandler(BaseHTTPRequestHandler):
    server_version = "vizarel"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s " + fmt, self.address_string(), *args)

    # -- plumbing -------------------------------------------------------------------

    def _json(self, code: int, obj) -> None:
        body = json.dumps(obj).encode()
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _err(self, code: int, message: str) -> None:
        self._json(code, {"error": message})

    def _bytes(self, code: int, content_type: str, body: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    # -- routing --------------------------------------------------------------------

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        try:
            url = urlparse(self.path)
            parts = [p for p in url.path.split("/") if p]
            if parts[:1] == ["api"]:
                self._route_api(parts[1:], parse_qs(url.query))
            else:
                self._route_static(url.path)
        except (BrokenPipeError, ConnectionResetError):
            pass
        except NotFoundError as exc:
            self._err(404, str(exc))
        except BoundsError as exc:
            self._err(404, str(exc))
        except ValueError as exc:
            self._err(400, str(exc))
        except Exception as exc:
            log.exception("query failed: %s", self.path)
            self._err(500, f"internal error: {exc}")

    def _route_api(self, parts: list[str], query: dict) -> None:
        server: VizarelServer = self.server.vizarel
        if parts == ["metrics"]:
            return self._get_metrics(server)
        if parts == ["episodes"]:
            return self._get_episodes(server)
        if len(parts) >= 2 and parts[0] == "episodes":
            episode_id = self._int(parts[1], "episode id")
            if len(parts) == 2:
                return self._get_episode(server, episode_id)
            if len(parts) == 4 and parts[2] == "frames":
                t = self._int(parts[3], "step index")
                return self._get_frame(server, episode_id, t)
            if len(parts) == 5 and parts[2] == "frames" and parts[4] == "image":
                t = self._int(parts[3], "step index")
                return self._get_frame_image(server, episode_id, t)
            if len(parts) == 4 and parts[2] == "actions" and parts[3] == "histogram":
                bins = self._int(query.get("bins", ["10"])[0], "bins")
                return self._get_action_histogram(server, episode_id, bins)
        if parts == ["projection"]:
            return self._get_projection(server, query)
        self._err(404, f"no route for /{'/'.join(['api'] + parts)}")

    @staticmethod
    def _int(raw: str, what: str) -> int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{what} must be an integer, got {raw!r}") from None

    # -- API routes -------------------------------------------------------------------

    def _get_metrics(self, server: VizarelServer) -> None:
        if server.store is None:
            self._json(200, {
                "episode_count": 0, "complete_count": 0, "step_count": 0,
                "average_return": None, "average_duration_s": None,
                "average_length": None, "schema": None, "manifest_version": -1,
            })
            return
        snap = server.store.snapshot()
        out = analytics.metrics([e.summary() for e in snap.entries]).to_json()
        out["schema"] = schema_to_json(snap.schema)
        out["manifest_version"] = snap.version
        self._json(200, out)

    def _get_episodes(self, server: VizarelServer) -> None:
        if server.store is None:
            self._json(200, {"episodes": [], "manifest_version": -1})
            return
        snap = server.store.snapshot()
        rows = []
        for e in snap.entries:
            rows.append({
                "id": e.episode_id, "n_steps": e.n_steps, "complete": e.complete,
                "return_sum": e.return_sum, "wall_start": e.wall_start,
                "wall_end": e.wall_end, "duration_s": e.wall_end - e.wall_start,
            })
        self._json(200, {"episodes": rows, "manifest_version": snap.version})

    def _get_episode(self, server: VizarelServer, episode_id: int) -> None:
        if server.store is None:
            raise NotFoundError(f"episode {episode_id} not found")
        snap = server.store.snapshot()
        entry = snap.find(episode_id)
        ep = server.store.read_episode(episode_id)
        schema = snap.schema
        state_dims = min(schema.obs_size, MAX_STATE_SERIES)
        action_dims = min(schema.action_size, MAX_ACTION_SERIES)
        reward_dims = min(schema.reward_dim, MAX_REWARD_SERIES)
        self._json(200, {
            "id": ep.id,
            "n_steps": ep.n_steps,
            "complete": ep.complete,
            "return_sum": entry.return_sum,
            "wall_start": ep.wall_start,
            "wall_end": ep.wall_end,
            "duration_s": ep.wall_end - ep.wall_start,
            "has_frames": schema.has_frames,
            "dones": [e.done for e in ep.experiences],
            "scalar_rewards": analytics.scalar_reward_series(ep),
            "state_series": [analytics.state_series(ep, d) for d in range(state_dims)],
            "state_dim_count": schema.obs_size,
            "state_series_truncated": schema.obs_size > state_dims,
            "action_series": [analytics.action_series(ep, d) for d in range(action_dims)],
            "action_dim_count": schema.action_size,
            "action_series_truncated": schema.action_size > action_dims,
            "reward_series": [analytics.reward_component_series(ep, c)
                              for c in range(reward_dims)],
            "reward_dim_count": schema.reward_dim,
            "reward_series_truncated": schema.reward_dim > reward_dims,
        })

    def _get_frame(self, server: VizarelServer, episode_id: int, t: int) -> None:
        if server.store is None:
            raise NotFoundError(f"episode {episode_id} not found")
        exp = server.store.read_frame(episode_id, t)
        self._json(200, {
            "episode_id": episode_id,
            "t": t,
            "s": exp.s.tolist(),
            "a": exp.a.tolist(),
            "r": exp.r.tolist(),
            "s_next": exp.s_next.tolist() if exp.s_next is not None else None,
            "done": exp.done,
            "has_frame": exp.frame is not None,
        })

    def _get_frame_image(self, server: VizarelServer, episode_id: int, t: int) -> None:
        if server.store is None:
            raise NotFoundError(f"episode {episode_id} not found")
        if not server.store.schema.has_frames:
            raise NotFoundError("session logs no frames")
        exp = server.store.read_frame(episode_id, t)
        from PIL import Image
        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(exp.frame), "RGB").save(buf, format="PNG")
        self._bytes(200, "image/png", buf.getvalue())

    def _get_action_histogram(self, server: VizarelServer, episode_id: int,
                              bins: int) -> None:
        if server.store is None:
            raise NotFoundError(f"episode {episode_id} not found")
        ep = server.store.read_episode(episode_id)
        self._json(200, analytics.action_histogram(ep, bins).to_json())

    def _get_projection(self, server: VizarelServer, query: dict) -> None:
        def param(name: str, default, conv):
            if name not in query:
                return default
            try:
                return conv(query[name][0])
            except ValueError:
                raise ValueError(f"query parameter {name} is malformed") from None

        window = param("window", None, int)
        max_points = param("max_points", 2000, int)
        perplexity = param("perplexity", 30.0, float)
        seed = param("seed", 0, int)
        if window is not None and window < 1:
            raise ValueError("window must be >= 1")
        if max_points < 4:
            raise ValueError("max_points must be >= 4")
        status, value = server.projections.request(window, max_points,
                                                   perplexity, seed)
        if status == "done":
            out = value.to_json()
            out["status"] = "done"
            self._json(200, out)
        elif status == "computing":
            self._json(409, {"status": "computing", "progress": round(value, 4)})
        else:
            if isinstance(value, (ValueError, NotFoundError)):
                self._err(400, str(value))
            else:
                self._err(500, f"projection failed: {value}")

    # -- static UI --------------------------------------------------------------------

    def _route_static(self, path: str) -> None:
        server: VizarelServer = self.server.vizarel
        if server.ui_dir is None:
            self._err(404, "no UI assets configured; use the /api routes")
            return
        rel = path.lstrip("/") or "index.html"
        target = (server.ui_dir / rel).resolve()
        if not str(target).startswith(str(server.ui_dir)) or not target.is_file():
            self._err(404, f"no such asset: {path}")
            return
        ctype = mimetypes.guess_type(str(target))[0] or "application/octet-stream"
        self._bytes(200, ctype, target.read_bytes())
