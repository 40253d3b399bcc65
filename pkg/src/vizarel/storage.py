"""Append-only chunked episode store with an asynchronous commit queue.

Layout of a session directory:

    manifest        index of committed episodes (atomic rewrite)
    chunk-<n>.vzc   record containers, appended by the commit thread

Exactly one writer (the commit thread) mutates the store. Readers only
ever follow the manifest, which is swapped in atomically after chunk
bytes are fsynced, so an episode is either fully visible or absent.
See FORMAT.md for the exact byte layouts.
"""
from __future__ import annotations

import os
import queue
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensors
from .errors import (BackpressureError, CorruptionError, NotFoundError,
                     BoundsError, SchemaError, StoreStateError)
from .model import (DType, Episode, EpisodeSummary, Experience, SessionSchema,
                    scalar_rewards)
from .protocol import decode_schema, encode_schema

CHUNK_MAGIC = b"VZCH"
MANIFEST_MAGIC = b"VZMF"
FORMAT_VERSION = 1

CODEC_IDENTITY = 0
CODEC_ZLIB = 1

CHUNK_HEADER = struct.Struct("<4sBB")          # magic, version, codec
RECORD_HEADER = struct.Struct("<IQIIBdd")      # crc, episode, part, n_steps, flags, walls
RECORD_LEN = struct.Struct("<I")
RECORD_HEADER_TOTAL = RECORD_LEN.size + RECORD_HEADER.size

FLAG_COMPLETE = 0x01
FLAG_SUCCESSOR = 0x02
FLAG_FRAMES = 0x04

DEFAULT_CHUNK_TARGET = 8 * 1024 * 1024
DEFAULT_MAX_QUEUE = 10_000

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


@dataclass(frozen=True)
class RecordLocator:
    chunk_id: int
    offset: int
    n_steps: int


@dataclass(frozen=True)
class ManifestEntry:
    episode_id: int
    n_steps: int
    complete: bool
    return_sum: float
    wall_start: float
    wall_end: float
    records: tuple[RecordLocator, ...]

    def summary(self) -> EpisodeSummary:
        return EpisodeSummary(id=self.episode_id, n_steps=self.n_steps,
                              complete=self.complete, return_sum=self.return_sum,
                              wall_start=self.wall_start, wall_end=self.wall_end)


@dataclass(frozen=True)
class ManifestSnapshot:
    """Immutable view of the committed state; safe to hold across reads."""

    version: int
    schema: SessionSchema
    entries: tuple[ManifestEntry, ...]

    def find(self, episode_id: int) -> ManifestEntry:
        lo, hi = 0, len(self.entries)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.entries[mid].episode_id < episode_id:
                lo = mid + 1
            else:
                hi = mid
        if lo < len(self.entries) and self.entries[lo].episode_id == episode_id:
            return self.entries[lo]
        raise NotFoundError(f"episode {episode_id} not in manifest")


def _encode_manifest(schema: SessionSchema, entries) -> bytes:
    body = [_U8.pack(FORMAT_VERSION), encode_schema(schema), _U64.pack(len(entries))]
    for e in entries:
        body.append(_U64.pack(e.episode_id))
        body.append(_U32.pack(e.n_steps))
        body.append(_U8.pack(1 if e.complete else 0))
        body.append(_F64.pack(e.return_sum))
        body.append(_F64.pack(e.wall_start))
        body.append(_F64.pack(e.wall_end))
        body.append(_U32.pack(len(e.records)))
        for r in e.records:
            body.append(_U32.pack(r.chunk_id))
            body.append(_U64.pack(r.offset))
            body.append(_U32.pack(r.n_steps))
    blob = b"".join(body)
    return MANIFEST_MAGIC + blob + _U32.pack(zlib.crc32(blob))


def _decode_manifest(raw: bytes) -> tuple[SessionSchema, list[ManifestEntry]]:
    if len(raw) < len(MANIFEST_MAGIC) + 1 + 4 or raw[:4] != MANIFEST_MAGIC:
        raise CorruptionError("manifest: bad magic or truncated")
    blob, crc_bytes = raw[4:-4], raw[-4:]
    if zlib.crc32(blob) != _U32.unpack(crc_bytes)[0]:
        raise CorruptionError("manifest: checksum mismatch")
    pos = 0
    version = blob[pos]; pos += 1
    if version != FORMAT_VERSION:
        raise CorruptionError(f"manifest: unsupported version {version}")
    schema, pos = decode_schema(blob, pos)
    (n_entries,) = _U64.unpack_from(blob, pos); pos += 8
    entries: list[ManifestEntry] = []
    prev_id = -1
    for _ in range(n_entries):
        (episode_id,) = _U64.unpack_from(blob, pos); pos += 8
        (n_steps,) = _U32.unpack_from(blob, pos); pos += 4
        complete = blob[pos] != 0; pos += 1
        (return_sum,) = _F64.unpack_from(blob, pos); pos += 8
        (wall_start,) = _F64.unpack_from(blob, pos); pos += 8
        (wall_end,) = _F64.unpack_from(blob, pos); pos += 8
        (n_records,) = _U32.unpack_from(blob, pos); pos += 4
        recs = []
        for _ in range(n_records):
            (chunk_id,) = _U32.unpack_from(blob, pos); pos += 4
            (offset,) = _U64.unpack_from(blob, pos); pos += 8
            (rec_steps,) = _U32.unpack_from(blob, pos); pos += 4
            recs.append(RecordLocator(chunk_id, offset, rec_steps))
        if episode_id <= prev_id:
            raise CorruptionError("manifest: episode ids not strictly increasing")
        prev_id = episode_id
        entries.append(ManifestEntry(episode_id, n_steps, complete, return_sum,
                                     wall_start, wall_end, tuple(recs)))
    return schema, entries


class _CommitTask:
    __slots__ = ("experiences", "enqueued_at")

    def __init__(self, experiences, enqueued_at):
        self.experiences = experiences
        self.enqueued_at = enqueued_at


class _FlushRequest:
    __slots__ = ("done",)

    def __init__(self):
        self.done = threading.Event()


class _StopRequest(_FlushRequest):
    pass


class _InjectedCrash(BaseException):
    """Raised by test hooks to kill the commit thread mid-sequence."""


class _PendingEpisode:
    """Commit-thread accumulator for the episode currently being received."""

    __slots__ = ("episode_id", "buffer", "locators", "steps_flushed",
                 "return_sum", "wall_start", "wall_end", "buffered_bytes")

    def __init__(self, episode_id: int, wall_start: float):
        self.episode_id = episode_id
        self.buffer: list[Experience] = []
        self.locators: list[RecordLocator] = []
        self.steps_flushed = 0
        self.return_sum = 0.0
        self.wall_start = wall_start
        self.wall_end = wall_start
        self.buffered_bytes = 0

    @property
    def n_steps(self) -> int:
        return self.steps_flushed + len(self.buffer)


class EpisodeStore:
    """Single-writer episode store; see module docstring for the model."""

    def __init__(self, path: str | os.PathLike, schema: SessionSchema | None = None, *,
                 create: bool = False, writable: bool = True,
                 max_queue: int = DEFAULT_MAX_QUEUE,
                 chunk_target_bytes: int = DEFAULT_CHUNK_TARGET,
                 codec: int = CODEC_IDENTITY):
        self.path = Path(path)
        self.chunk_target_bytes = chunk_target_bytes
        self.codec = codec
        if codec not in (CODEC_IDENTITY, CODEC_ZLIB):
            raise ValueError(f"unsupported codec {codec}")
        self.stats = {
            "chunk_records_written": 0,
            "chunk_bytes_written": 0,
            "chunk_syncs": 0,
            "manifest_writes": 0,
        }
        # Test hook: called with a named point during the commit sequence.
        self.commit_hooks: list = []

        manifest_path = self.path / "manifest"
        if create:
            if schema is None:
                raise ValueError("creating a store requires a schema")
            self.path.mkdir(parents=True, exist_ok=True)
            if manifest_path.exists():
                raise StoreStateError(f"store already exists at {self.path}")
            self._schema = schema
            self._entries: tuple[ManifestEntry, ...] = ()
            self._write_manifest_locked(initial=True)
        else:
            if not manifest_path.exists():
                raise StoreStateError(f"no store at {self.path}")
            schema_on_disk, entries = _decode_manifest(manifest_path.read_bytes())
            if schema is not None and schema != schema_on_disk:
                raise SchemaError("schema does not match the stored session")
            self._schema = schema_on_disk
            self._entries = tuple(entries)
            self._validate_on_open()

        self._version = len(self._entries)
        self._next_episode_id = (self._entries[-1].episode_id + 1) if self._entries else 0
        self._next_chunk_id = self._scan_next_chunk_id()
        self._failure: BaseException | None = None
        self._lock = threading.Lock()

        self.writable = writable
        self._queue: queue.Queue = queue.Queue(maxsize=max_queue)
        self._gate = threading.Event()
        self._gate.set()
        self._closed = False
        self._pending: _PendingEpisode | None = None
        self._chunk_file = None
        self._chunk_id = -1
        self._chunk_offset = 0
        self._commit_thread = None
        if writable:
            self._commit_thread = threading.Thread(target=self._commit_loop,
                                                   name="vizarel-commit", daemon=True)
            self._commit_thread.start()

    # -- class-style constructors ------------------------------------------------

    @classmethod
    def create(cls, path, schema: SessionSchema, **kw) -> "EpisodeStore":
        return cls(path, schema, create=True, writable=True, **kw)

    @classmethod
    def open_write(cls, path, schema: SessionSchema | None = None, **kw) -> "EpisodeStore":
        return cls(path, schema, create=False, writable=True, **kw)

    @classmethod
    def open_read(cls, path) -> "EpisodeStore":
        return cls(path, None, create=False, writable=False)

    # -- public surface ----------------------------------------------------------

    @property
    def schema(self) -> SessionSchema:
        return self._schema

    @property
    def manifest_version(self) -> int:
        return self._version

    def snapshot(self) -> ManifestSnapshot:
        with self._lock:
            return ManifestSnapshot(self._version, self._schema, self._entries)

    def enqueue_append(self, experiences: list[Experience]) -> int:
        """Queue experiences for durability; returns the queue depth.

        Returns after the enqueue only — this path never touches disk.
        """
        self._check_writable()
        for e in experiences:
            self._validate_experience(e)
        task = _CommitTask(experiences, time.time())
        try:
            self._queue.put_nowait(task)
        except queue.Full:
            depth = self._queue.qsize()
            raise BackpressureError(f"commit queue full ({depth} tasks)", depth) from None
        return self._queue.qsize()

    def flush(self, timeout: float | None = 30.0) -> None:
        """Block until everything enqueued so far is durable.

        Seals the in-progress episode as complete=False, so a stream that
        continues afterwards starts a new episode.
        """
        self._check_writable()
        req = _FlushRequest()
        self._queue.put(req)
        if not req.done.wait(timeout):
            raise StoreStateError("flush timed out")
        if self._failure is not None:
            raise StoreStateError(f"store failed: {self._failure}")

    def close(self) -> None:
        """Flush pending data and stop the commit thread. Idempotent."""
        if self._closed:
            return
        self._closed = True
        if self.writable and self._commit_thread is not None:
            req = _StopRequest()
            self._queue.put(req)
            self._gate.set()
            req.done.wait(30.0)
            self._commit_thread.join(timeout=30.0)

    def pause_commits(self) -> None:
        """Stall the commit thread before its next cycle (testing/debug)."""
        self._gate.clear()

    def resume_commits(self) -> None:
        self._gate.set()

    def list_episodes(self) -> list[EpisodeSummary]:
        return [e.summary() for e in self.snapshot().entries]

    def read_episode(self, episode_id: int) -> Episode:
        """Full reconstruction with per-record checksum validation."""
        snap = self.snapshot()
        entry = snap.find(episode_id)
        schema = snap.schema
        obs_parts, act_parts, rew_parts, done_parts, frame_parts = [], [], [], [], []
        successor = None
        for k, loc in enumerate(entry.records):
            rec = self._read_record(loc, entry.episode_id, k)
            n = rec["n_steps"]
            obs = rec["obs"]
            if rec["has_successor"]:
                if k == len(entry.records) - 1:
                    successor = obs[n]
                obs = obs[:n]
            obs_parts.append(obs)
            act_parts.append(rec["actions"])
            rew_parts.append(rec["rewards"])
            done_parts.append(rec["dones"])
            if rec["frames"] is not None:
                frame_parts.append(rec["frames"])
        obses = np.concatenate(obs_parts) if len(obs_parts) > 1 else obs_parts[0]
        actions = np.concatenate(act_parts) if len(act_parts) > 1 else act_parts[0]
        rewards = np.concatenate(rew_parts) if len(rew_parts) > 1 else rew_parts[0]
        dones = np.concatenate(done_parts) if len(done_parts) > 1 else done_parts[0]
        frames = None
        if frame_parts:
            frames = np.concatenate(frame_parts) if len(frame_parts) > 1 else frame_parts[0]
        n_total = entry.n_steps
        if len(obses) != n_total:
            raise CorruptionError(f"episode {episode_id}: step count mismatch")
        experiences = []
        for t in range(n_total):
            if t + 1 < n_total:
                s_next = obses[t + 1]
            else:
                s_next = successor
            experiences.append(Experience(
                s=obses[t], a=actions[t], r=rewards[t], s_next=s_next,
                done=bool(dones[t]), t=t,
                frame=frames[t] if frames is not None else None))
        return Episode(id=episode_id, experiences=experiences, complete=entry.complete,
                       wall_start=entry.wall_start, wall_end=entry.wall_end)

    def read_frame(self, episode_id: int, t: int) -> Experience:
        """Single-step read via offset arithmetic; skips whole-record loads.

        With a non-identity codec the record payload is not addressable on
        disk, so this falls back to a full record read.
        """
        snap = self.snapshot()
        entry = snap.find(episode_id)
        if not 0 <= t < entry.n_steps:
            raise BoundsError(f"step {t} outside [0, {entry.n_steps})")
        base = 0
        for k, loc in enumerate(entry.records):
            if t < base + loc.n_steps:
                return self._read_step(snap.schema, entry, k, t - base, t)
            base += loc.n_steps
        raise CorruptionError(f"episode {episode_id}: locators do not cover step {t}")

    # -- experience validation ----------------------------------------------------

    def _validate_experience(self, e: Experience) -> None:
        sch = self._schema
        if e.s.shape != sch.obs_dim or e.s.dtype != sch.obs_type.np_dtype:
            raise SchemaError("experience obs does not match schema")
        if e.s_next is not None and (e.s_next.shape != sch.obs_dim
                                     or e.s_next.dtype != sch.obs_type.np_dtype):
            raise SchemaError("experience successor obs does not match schema")
        if e.a.shape != sch.action_dim or e.a.dtype != sch.action_type.np_dtype:
            raise SchemaError("experience action does not match schema")
        if e.r.shape != (sch.reward_dim,) or e.r.dtype != sch.reward_type.np_dtype:
            raise SchemaError("experience reward does not match schema")
        if sch.has_frames and e.frame is None:
            raise SchemaError("schema declares frames but experience has none")

    def _check_writable(self) -> None:
        if not self.writable or self._closed:
            raise StoreStateError("store is not open for writing")
        if self._failure is not None:
            raise StoreStateError(f"store failed and is read-only: {self._failure}")

    # -- commit thread -------------------------------------------------------------

    def _commit_loop(self) -> None:
        while True:
            # Honor the pause gate before touching the queue at all: a
            # paused store must leave tasks where backpressure can count
            # them instead of hoarding a drained batch in this thread.
            if not self._gate.is_set() and not self._closed:
                self._gate.wait(timeout=0.05)
                continue
            try:
                item = self._queue.get(timeout=0.05)
            except queue.Empty:
                continue
            except Exception:
                return
            items = [item]
            while True:
                try:
                    items.append(self._queue.get_nowait())
                except queue.Empty:
                    break
            while not self._gate.wait(timeout=0.1):
                if self._closed and any(isinstance(i, _StopRequest) for i in items):
                    break
            try:
                stop = self._process_items(items)
            except _InjectedCrash:
                self._failure = StoreStateError("commit thread killed by injected crash")
                return
            except Exception as exc:  # disk full / IO error: fail fast thereafter
                self._failure = exc
                for i in items:
                    if isinstance(i, _FlushRequest):
                        i.done.set()
                return
            if stop:
                return

    def _process_items(self, items) -> bool:
        sealed: list[_PendingEpisode] = []
        record_jobs: list[tuple[_PendingEpisode, list[Experience], np.ndarray | None, bool]] = []
        waiters: list[_FlushRequest] = []
        stop = False

        def seal(complete: bool) -> None:
            p = self._pending
            if p is None:
                return
            successor = p.buffer[-1].s_next if p.buffer else None
            record_jobs.append((p, p.buffer, successor, complete))
            p.buffer = []
            p.buffered_bytes = 0
            sealed.append(p)
            self._pending = None

        for item in items:
            if isinstance(item, _StopRequest):
                seal(False)
                waiters.append(item)
                stop = True
            elif isinstance(item, _FlushRequest):
                seal(False)
                waiters.append(item)
            else:
                for exp in item.experiences:
                    if self._pending is None:
                        self._pending = _PendingEpisode(self._next_episode_id,
                                                        item.enqueued_at)
                        self._next_episode_id += 1
                    p = self._pending
                    p.buffer.append(exp)
                    p.buffered_bytes += self._experience_bytes(exp)
                    p.wall_end = item.enqueued_at
                    p.return_sum += scalar_rewards([exp.r])[0]
                    if exp.done:
                        seal(True)
                    elif p.buffered_bytes >= self.chunk_target_bytes:
                        # spill a continuation record; successor obs rides along
                        record_jobs.append((p, p.buffer, exp.s_next, False))
                        p.buffer = []
                        p.buffered_bytes = 0

        wrote = False
        for p, buf, successor, complete in record_jobs:
            if not buf and not complete:
                continue  # flush with an already-spilled buffer: nothing new to write
            if buf:
                self._write_record(p, buf, successor, complete)
                wrote = True
        if wrote:
            self._sync_chunk()
        if sealed:
            new_entries = []
            for p in sealed:
                complete = any(job[3] for job in record_jobs if job[0] is p)
                new_entries.append(ManifestEntry(
                    episode_id=p.episode_id, n_steps=p.n_steps, complete=complete,
                    return_sum=p.return_sum, wall_start=p.wall_start,
                    wall_end=p.wall_end, records=tuple(p.locators)))
            with self._lock:
                self._entries = self._entries + tuple(new_entries)
                self._write_manifest_locked()
                self._version += 1
        for w in waiters:
            w.done.set()
        if stop and self._chunk_file is not None:
            self._chunk_file.close()
            self._chunk_file = None
        return stop

    def _experience_bytes(self, e: Experience) -> int:
        n = e.s.nbytes + e.a.nbytes + e.r.nbytes + 1
        if e.frame is not None:
            n += e.frame.nbytes
        return n

    def _hook(self, point: str) -> None:
        for h in self.commit_hooks:
            h(point)

    def _ensure_chunk(self) -> None:
        if self._chunk_file is None:
            self._chunk_id = self._next_chunk_id
            self._next_chunk_id += 1
            path = self.path / f"chunk-{self._chunk_id}.vzc"
            self._chunk_file = open(path, "wb")
            self._chunk_file.write(CHUNK_HEADER.pack(CHUNK_MAGIC, FORMAT_VERSION, self.codec))
            self._chunk_offset = CHUNK_HEADER.size

    def _write_record(self, p: _PendingEpisode, buf: list[Experience],
                      successor: np.ndarray | None, complete: bool) -> None:
        self._ensure_chunk()
        sch = self._schema
        n = len(buf)
        flags = 0
        if complete:
            flags |= FLAG_COMPLETE
        obs_list = [e.s for e in buf]
        if successor is not None:
            flags |= FLAG_SUCCESSOR
            obs_list.append(successor)
        payload_parts = [
            tensors.encode_tensor(np.stack(obs_list), sch.obs_type),
            tensors.encode_tensor(np.stack([e.a for e in buf]), sch.action_type),
            tensors.encode_tensor(np.stack([e.r for e in buf]), sch.reward_type),
            tensors.encode_bitset([e.done for e in buf]),
        ]
        if sch.has_frames:
            flags |= FLAG_FRAMES
            payload_parts.append(tensors.encode_tensor(
                np.stack([e.frame for e in buf]), DType.U8))
        payload = b"".join(payload_parts)
        if self.codec == CODEC_ZLIB:
            payload = zlib.compress(payload)
        part_index = len(p.locators)
        header_rest = RECORD_HEADER.pack(0, p.episode_id, part_index, n, flags,
                                         p.wall_start, p.wall_end)[4:]
        crc = zlib.crc32(header_rest + payload)
        record = RECORD_LEN.pack(RECORD_HEADER.size - 4 + len(payload) + 4) \
            + _U32.pack(crc) + header_rest + payload
        offset = self._chunk_offset
        self._chunk_file.write(record)
        self._chunk_offset += len(record)
        self.stats["chunk_records_written"] += 1
        self.stats["chunk_bytes_written"] += len(record)
        p.locators.append(RecordLocator(self._chunk_id, offset, n))
        p.steps_flushed += n
        self._hook("record_written")

    def _sync_chunk(self) -> None:
        f = self._chunk_file
        if f is None:
            return
        f.flush()
        os.fsync(f.fileno())
        self.stats["chunk_syncs"] += 1
        self._hook("chunk_synced")
        if self._chunk_offset >= self.chunk_target_bytes:
            f.close()
            self._chunk_file = None

    def _write_manifest_locked(self, initial: bool = False) -> None:
        data = _encode_manifest(self._schema, self._entries)
        tmp = self.path / "manifest.tmp"
        with open(tmp, "wb") as f:
            f.write(data)
            if not initial:
                self._hook("manifest_temp_written")
            f.flush()
            os.fsync(f.fileno())
        if not initial:
            self._hook("manifest_temp_synced")
        os.replace(tmp, self.path / "manifest")
        if not initial:
            self._hook("manifest_renamed")
        dir_fd = os.open(self.path, os.O_RDONLY)
        try:
            os.fsync(dir_fd)
        finally:
            os.close(dir_fd)
        self.stats["manifest_writes"] += 1

    # -- read path ------------------------------------------------------------------

    def _chunk_path(self, chunk_id: int) -> Path:
        return self.path / f"chunk-{chunk_id}.vzc"

    def _open_chunk(self, chunk_id: int):
        path = self._chunk_path(chunk_id)
        try:
            f = open(path, "rb")
        except FileNotFoundError:
            raise CorruptionError(f"missing chunk file {path.name}") from None
        header = f.read(CHUNK_HEADER.size)
        if len(header) != CHUNK_HEADER.size:
            f.close()
            raise CorruptionError(f"chunk {path.name}: truncated header")
        magic, version, codec = CHUNK_HEADER.unpack(header)
        if magic != CHUNK_MAGIC or version != FORMAT_VERSION:
            f.close()
            raise CorruptionError(f"chunk {path.name}: bad magic or version")
        return f, codec

    def _read_record(self, loc: RecordLocator, episode_id: int, part_index: int) -> dict:
        name = self._chunk_path(loc.chunk_id).name
        f, codec = self._open_chunk(loc.chunk_id)
        with f:
            f.seek(loc.offset)
            len_bytes = f.read(RECORD_LEN.size)
            if len(len_bytes) != RECORD_LEN.size:
                raise CorruptionError(f"chunk {name}: truncated record length")
            (rec_len,) = RECORD_LEN.unpack(len_bytes)
            rest = f.read(rec_len)
        if len(rest) != rec_len:
            raise CorruptionError(f"chunk {name}: truncated record")
        (crc,) = _U32.unpack_from(rest, 0)
        if zlib.crc32(rest[4:]) != crc:
            raise CorruptionError(f"chunk {name}: record checksum mismatch")
        _, ep_id, part, n_steps, flags, wall_start, wall_end = RECORD_HEADER.unpack_from(rest, 0)
        if ep_id != episode_id or part != part_index:
            raise CorruptionError(f"chunk {name}: record identity mismatch")
        payload = rest[RECORD_HEADER.size:]
        if codec == CODEC_ZLIB:
            payload = zlib.decompress(payload)
        elif codec != CODEC_IDENTITY:
            raise CorruptionError(f"chunk {name}: unknown codec {codec}")
        pos = 0
        obs, pos = tensors.decode_tensor(payload, pos)
        actions, pos = tensors.decode_tensor(payload, pos)
        rewards, pos = tensors.decode_tensor(payload, pos)
        dones, pos = tensors.decode_bitset(payload, n_steps, pos)
        frames = None
        if flags & FLAG_FRAMES:
            frames, pos = tensors.decode_tensor(payload, pos)
        return {
            "n_steps": n_steps,
            "complete": bool(flags & FLAG_COMPLETE),
            "has_successor": bool(flags & FLAG_SUCCESSOR),
            "wall_start": wall_start,
            "wall_end": wall_end,
            "obs": obs,
            "actions": actions,
            "rewards": rewards,
            "dones": dones,
            "frames": frames,
        }

    def _read_step(self, schema: SessionSchema, entry: ManifestEntry,
                   part_index: int, local_t: int, global_t: int) -> Experience:
        loc = entry.records[part_index]
        name = self._chunk_path(loc.chunk_id).name
        f, codec = self._open_chunk(loc.chunk_id)
        with f:
            if codec != CODEC_IDENTITY:
                # payload bytes are not addressable when compressed
                rec = self._read_record(loc, entry.episode_id, part_index)
                return self._step_from_record(rec, entry, part_index, local_t, global_t)
            f.seek(loc.offset + RECORD_LEN.size)
            head = f.read(RECORD_HEADER.size)
            if len(head) != RECORD_HEADER.size:
                raise CorruptionError(f"chunk {name}: truncated record header")
            _, ep_id, part, n_steps, flags, _, _ = RECORD_HEADER.unpack(head)
            if ep_id != entry.episode_id or part != part_index:
                raise CorruptionError(f"chunk {name}: record identity mismatch")
            has_successor = bool(flags & FLAG_SUCCESSOR)
            n_obs = n_steps + (1 if has_successor else 0)

            payload_at = loc.offset + RECORD_HEADER_TOTAL
            obs_shape, act_shape = schema.obs_dim, schema.action_dim
            obs_elem = schema.obs_size * schema.obs_type.itemsize
            act_elem = schema.action_size * schema.action_type.itemsize
            rew_elem = schema.reward_dim * schema.reward_type.itemsize

            obs_data = payload_at + tensors.tensor_header_size(1 + len(obs_shape))
            act_block = payload_at + tensors.tensor_block_size((n_obs,) + obs_shape,
                                                               schema.obs_type)
            act_data = act_block + tensors.tensor_header_size(1 + len(act_shape))
            rew_block = act_block + tensors.tensor_block_size((n_steps,) + act_shape,
                                                              schema.action_type)
            rew_data = rew_block + tensors.tensor_header_size(2)
            dones_at = rew_block + tensors.tensor_block_size((n_steps, schema.reward_dim),
                                                             schema.reward_type)
            frames_block = dones_at + tensors.bitset_size(n_steps)

            def read_at(pos: int, nbytes: int) -> bytes:
                f.seek(pos)
                data = f.read(nbytes)
                if len(data) != nbytes:
                    raise CorruptionError(f"chunk {name}: truncated step read")
                return data

            def read_elem(pos: int, nbytes: int, dtype: DType, shape) -> np.ndarray:
                return np.frombuffer(read_at(pos, nbytes), dtype=dtype.np_dtype).reshape(shape)

            s = read_elem(obs_data + local_t * obs_elem, obs_elem, schema.obs_type, obs_shape)
            if local_t + 1 < n_obs:
                s_next = read_elem(obs_data + (local_t + 1) * obs_elem, obs_elem,
                                   schema.obs_type, obs_shape)
            elif part_index + 1 < len(entry.records):
                nxt = self._read_record(entry.records[part_index + 1], entry.episode_id,
                                        part_index + 1)
                s_next = np.ascontiguousarray(nxt["obs"][0])
            else:
                s_next = None
            a = read_elem(act_data + local_t * act_elem, act_elem,
                          schema.action_type, act_shape)
            r = read_elem(rew_data + local_t * rew_elem, rew_elem,
                          schema.reward_type, (schema.reward_dim,))
            done_byte = read_at(dones_at + local_t // 8, 1)[0]
            done = bool((done_byte >> (local_t % 8)) & 1)
            frame = None
            if flags & FLAG_FRAMES:
                fr_hdr = tensors.tensor_header_size(4)
                dims = read_at(frames_block + 2, 16)
                h, w = _U32.unpack_from(dims, 4)[0], _U32.unpack_from(dims, 8)[0]
                fr_elem = h * w * 3
                frame = read_elem(frames_block + fr_hdr + local_t * fr_elem, fr_elem,
                                  DType.U8, (h, w, 3))
            return Experience(s=s, a=a, r=r, s_next=s_next, done=done,
                              t=global_t, frame=frame)

    def _step_from_record(self, rec: dict, entry: ManifestEntry, part_index: int,
                          local_t: int, global_t: int) -> Experience:
        n = rec["n_steps"]
        obs = rec["obs"]
        if local_t + 1 < len(obs):
            s_next = np.ascontiguousarray(obs[local_t + 1])
        elif part_index + 1 < len(entry.records):
            nxt = self._read_record(entry.records[part_index + 1], entry.episode_id,
                                    part_index + 1)
            s_next = np.ascontiguousarray(nxt["obs"][0])
        else:
            s_next = None
        frames = rec["frames"]
        return Experience(s=np.ascontiguousarray(obs[local_t]),
                          a=np.ascontiguousarray(rec["actions"][local_t]),
                          r=np.ascontiguousarray(rec["rewards"][local_t]),
                          s_next=s_next, done=bool(rec["dones"][local_t]), t=global_t,
                          frame=np.ascontiguousarray(frames[local_t]) if frames is not None else None)

    # -- open-time validation ----------------------------------------------------------

    def _validate_on_open(self) -> None:
        for e in self._entries:
            total = 0
            for loc in e.records:
                if not self._chunk_path(loc.chunk_id).exists():
                    raise CorruptionError(
                        f"manifest references missing chunk chunk-{loc.chunk_id}.vzc")
                total += loc.n_steps
            if total != e.n_steps:
                raise CorruptionError(f"episode {e.episode_id}: locator step mismatch")

    def _scan_next_chunk_id(self) -> int:
        max_id = -1
        for p in self.path.glob("chunk-*.vzc"):
            try:
                max_id = max(max_id, int(p.stem.split("-", 1)[1]))
            except ValueError:
                continue
        for e in self._entries:
            for loc in e.records:
                max_id = max(max_id, loc.chunk_id)
        return max_id + 1
