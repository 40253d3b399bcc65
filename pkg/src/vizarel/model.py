"""Core data model: session schema, experiences, episodes, and returns.

Everything here is a pure value type or a pure function; nothing holds
locks or touches IO, so all of it is safe to call from any thread.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SchemaError


class DType(enum.IntEnum):
    """Closed set of element types carried on the wire and on disk."""

    F32 = 1
    F64 = 2
    I32 = 3
    U8 = 4

    @property
    def np_dtype(self) -> np.dtype:
        return _NP_DTYPES[self]

    @property
    def itemsize(self) -> int:
        return _NP_DTYPES[self].itemsize

    @property
    def is_integer(self) -> bool:
        return self in (DType.I32, DType.U8)

    @classmethod
    def from_code(cls, code: int) -> "DType":
        try:
            return cls(code)
        except ValueError:
            raise SchemaError(f"unknown dtype code {code}") from None


# All multi-byte types are little-endian both in memory and in the formats.
_NP_DTYPES = {
    DType.F32: np.dtype("<f4"),
    DType.F64: np.dtype("<f8"),
    DType.I32: np.dtype("<i4"),
    DType.U8: np.dtype("u1"),
}


@dataclass(frozen=True)
class SessionSchema:
    """Declared shapes and dtypes of the observation/action/reward streams.

    `steps` is the producer's expected total step count; it is a
    non-binding hint and never enforced.
    """

    steps: int
    obs_dim: tuple[int, ...]
    obs_type: DType
    action_dim: tuple[int, ...]
    action_type: DType
    reward_dim: int
    reward_type: DType
    has_frames: bool = False

    def __post_init__(self):
        object.__setattr__(self, "obs_dim", tuple(int(d) for d in self.obs_dim))
        object.__setattr__(self, "action_dim", tuple(int(d) for d in self.action_dim))
        object.__setattr__(self, "obs_type", DType(self.obs_type))
        object.__setattr__(self, "action_type", DType(self.action_type))
        object.__setattr__(self, "reward_type", DType(self.reward_type))
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise SchemaError("steps must be >= 0")
        for name, shape in (("obs_dim", self.obs_dim), ("action_dim", self.action_dim)):
            if len(shape) == 0:
                raise SchemaError(f"{name} must have at least one entry")
            if any(d < 1 for d in shape):
                raise SchemaError(f"all {name} entries must be >= 1")
        if self.reward_dim < 1:
            raise SchemaError("reward_dim must be >= 1")

    @property
    def obs_size(self) -> int:
        return int(np.prod(self.obs_dim))

    @property
    def action_size(self) -> int:
        return int(np.prod(self.action_dim))


@dataclass
class Experience:
    """One interaction step: observation, action, reward, successor.

    `s_next` is None (ABSENT) when the step is terminal or when it is the
    trailing step of a stream cut by a flush before its successor arrived.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray | None
    done: bool
    t: int
    frame: np.ndarray | None = None


@dataclass
class Episode:
    """An ordered run of experiences ending at a terminal flag (if complete)."""

    id: int
    experiences: list[Experience]
    complete: bool
    wall_start: float = 0.0
    wall_end: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.experiences)

    @property
    def duration_s(self) -> float:
        return self.wall_end - self.wall_start


@dataclass
class EpisodeSummary:
    """Manifest-level view of one episode; cheap to list without payload reads."""

    id: int
    n_steps: int
    complete: bool
    return_sum: float
    wall_start: float
    wall_end: float

    @property
    def duration_s(self) -> float:
        return self.wall_end - self.wall_start


def _as_stream(schema: SessionSchema, name: str, values, n_samples: int,
               elem_shape: tuple[int, ...], dtype: DType) -> np.ndarray:
    arr = np.asarray(values)
    expected = (n_samples,) + elem_shape
    if arr.shape != expected:
        raise SchemaError(f"{name} shape {arr.shape} does not match schema {expected}")
    if arr.dtype != dtype.np_dtype:
        raise SchemaError(f"{name} dtype {arr.dtype} does not match schema {dtype.name}")
    return np.ascontiguousarray(arr)


@dataclass
class StepBatch:
    """A contiguous slice of a step stream with stacked per-stream tensors."""

    n_samples: int
    obses: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    frames: np.ndarray | None = None

    def validate(self, schema: SessionSchema) -> None:
        if self.n_samples < 1:
            raise SchemaError("n_samples must be >= 1")
        self.obses = _as_stream(schema, "obses", self.obses, self.n_samples,
                                schema.obs_dim, schema.obs_type)
        self.actions = _as_stream(schema, "actions", self.actions, self.n_samples,
                                  schema.action_dim, schema.action_type)
        self.rewards = _as_stream(schema, "rewards", self.rewards, self.n_samples,
                                  (schema.reward_dim,), schema.reward_type)
        dones = np.asarray(self.dones)
        if dones.shape != (self.n_samples,):
            raise SchemaError(f"dones shape {dones.shape} does not match ({self.n_samples},)")
        self.dones = dones.astype(bool)
        if schema.has_frames:
            if self.frames is None:
                raise SchemaError("schema declares frames but batch has none")
            frames = np.asarray(self.frames)
            if frames.ndim != 4 or frames.shape[0] != self.n_samples or frames.shape[3] != 3:
                raise SchemaError(f"frames shape {frames.shape} is not (n, H, W, 3)")
            if frames.dtype != np.uint8:
                raise SchemaError(f"frames dtype {frames.dtype} is not uint8")
            self.frames = np.ascontiguousarray(frames)
        elif self.frames is not None:
            raise SchemaError("schema declares no frames but batch carries them")


def compute_return(rewards, gamma: float) -> float:
    """Discounted sum of a scalar reward sequence.

    Accumulates in order with a running discount coefficient so that
    gamma=1.0 degenerates to an exact ordered sum.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    total = 0.0
    coef = 1.0
    for r in rewards:
        total += coef * float(r)
        coef *= gamma
    return total


def scalar_rewards(reward_vectors) -> list[float]:
    """Per-step scalar reward: the unweighted sum of reward components.

    The canonical reduction used everywhere a single reward number is
    needed (returns, manifest summaries); components are converted to
    float64 before summing so every caller gets the identical value.
    """
    out = []
    for r in reward_vectors:
        out.append(float(np.asarray(r, dtype=np.float64).sum()))
    return out


def episode_return(episode: Episode, gamma: float = 1.0) -> float:
    return compute_return(scalar_rewards(e.r for e in episode.experiences), gamma)


def segment_episodes(dones) -> list[tuple[int, int, bool]]:
    """Split a done-flag sequence into half-open (start, end, complete) spans.

    Spans partition [0, len); a span ends one past each true flag; a
    trailing run with no terminal is returned with complete=False.
    """
    spans: list[tuple[int, int, bool]] = []
    start = 0
    n = 0
    for i, d in enumerate(dones):
        n = i + 1
        if d:
            spans.append((start, i + 1, True))
            start = i + 1
    if start < n:
        spans.append((start, n, False))
    return spans


@dataclass
class PendingStep:
    """A trailing step whose successor observation has not arrived yet."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    t: int
    frame: np.ndarray | None = None


@dataclass
class ExperienceBuilder:
    """Turns a stream of step batches into experiences, carrying the tail.

    The final step of a batch with done=False is held as the carry and
    completed by the first observation of the next batch, so splitting a
    stream into batches at any boundary yields the same experiences.
    """

    schema: SessionSchema
    carry: PendingStep | None = None
    next_t: int = 0

    def add_batch(self, batch: StepBatch) -> list[Experience]:
        batch.validate(self.schema)
        out: list[Experience] = []
        if self.carry is not None:
            p = self.carry
            out.append(Experience(s=p.s, a=p.a, r=p.r, s_next=batch.obses[0],
                                  done=False, t=p.t, frame=p.frame))
            self.carry = None
        for i in range(batch.n_samples):
            frame = batch.frames[i] if batch.frames is not None else None
            done = bool(batch.dones[i])
            if done:
                out.append(Experience(s=batch.obses[i], a=batch.actions[i],
                                      r=batch.rewards[i], s_next=None, done=True,
                                      t=self.next_t, frame=frame))
                self.next_t = 0
            elif i + 1 < batch.n_samples:
                out.append(Experience(s=batch.obses[i], a=batch.actions[i],
                                      r=batch.rewards[i], s_next=batch.obses[i + 1],
                                      done=False, t=self.next_t, frame=frame))
                self.next_t += 1
            else:
                self.carry = PendingStep(s=batch.obses[i], a=batch.actions[i],
                                         r=batch.rewards[i], t=self.next_t, frame=frame)
                self.next_t += 1
        return out

    def flush(self) -> Experience | None:
        """Emit the carry with an ABSENT successor; used at stream shutdown."""
        if self.carry is None:
            return None
        p = self.carry
        self.carry = None
        self.next_t = 0
        return Experience(s=p.s, a=p.a, r=p.r, s_next=None, done=False,
                          t=p.t, frame=p.frame)


def build_experiences(batch: StepBatch, schema: SessionSchema,
                      carry: ExperienceBuilder | None = None,
                      ) -> tuple[list[Experience], ExperienceBuilder]:
    """Functional wrapper over ExperienceBuilder for one-shot callers."""
    builder = carry if carry is not None else ExperienceBuilder(schema)
    return builder.add_batch(batch), builder
