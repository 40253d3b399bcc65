"""Descriptive metrics and per-viewport series extraction.

Everything here is a pure function over already-read episodes or
summaries, so query threads can call concurrently without locking.

Averages are accumulated with plain Python float adds in episode-id
order. That makes `metrics` reproducible to the last bit: an oracle
that folds the same values in the same order gets exact F64 equality,
which is what the test suite checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BoundsError
from .model import Episode, EpisodeSummary, scalar_rewards


@dataclass(frozen=True)
class MetricsSummary:
    """Control-panel headline numbers.

    Counts include incomplete episodes; the averages are over complete
    episodes only and are None (never NaN) when there are none.
    """

    episode_count: int
    complete_count: int
    step_count: int
    average_return: float | None
    average_duration_s: float | None
    average_length: float | None

    def to_json(self) -> dict:
        return {
            "episode_count": self.episode_count,
            "complete_count": self.complete_count,
            "step_count": self.step_count,
            "average_return": self.average_return,
            "average_duration_s": self.average_duration_s,
            "average_length": self.average_length,
        }


def metrics(summaries: list[EpisodeSummary]) -> MetricsSummary:
    """Fold episode summaries into the session's headline metrics.

    Average return is undiscounted (gamma = 1) over complete episodes.
    """
    ordered = sorted(summaries, key=lambda s: s.id)
    episode_count = len(ordered)
    step_count = 0
    complete_count = 0
    return_acc = 0.0
    duration_acc = 0.0
    length_acc = 0
    for s in ordered:
        step_count += s.n_steps
        if not s.complete:
            continue
        complete_count += 1
        return_acc += s.return_sum
        duration_acc += s.wall_end - s.wall_start
        length_acc += s.n_steps
    if complete_count == 0:
        return MetricsSummary(episode_count, 0, step_count, None, None, None)
    return MetricsSummary(
        episode_count=episode_count,
        complete_count=complete_count,
        step_count=step_count,
        average_return=return_acc / complete_count,
        average_duration_s=duration_acc / complete_count,
        average_length=length_acc / complete_count,
    )


def scalar_reward_series(episode: Episode) -> list[float]:
    """Per-step scalar rewards (component sum), the series behind returns."""
    return scalar_rewards([e.r for e in episode.experiences])


def reward_component_series(episode: Episode, component: int) -> list[float]:
    n_components = len(episode.experiences[0].r) if episode.experiences else 0
    if not 0 <= component < n_components:
        raise BoundsError(f"reward component {component} outside [0, {n_components})")
    return [float(e.r[component]) for e in episode.experiences]


def state_series(episode: Episode, dim: int) -> list[float]:
    """Flattened-observation component `dim` over time."""
    size = episode.experiences[0].s.size if episode.experiences else 0
    if not 0 <= dim < size:
        raise BoundsError(f"state dim {dim} outside [0, {size})")
    return [float(e.s.reshape(-1)[dim]) for e in episode.experiences]


def action_series(episode: Episode, dim: int) -> list[float]:
    """Flattened-action component `dim` over time."""
    size = episode.experiences[0].a.size if episode.experiences else 0
    if not 0 <= dim < size:
        raise BoundsError(f"action dim {dim} outside [0, {size})")
    return [float(e.a.reshape(-1)[dim]) for e in episode.experiences]


@dataclass(frozen=True)
class Histogram:
    """Counts over flattened action values.

    Integer actions get one bin per integer value spanning [min, max]
    (`bin_values` set, `bin_edges` None). Continuous actions get
    equal-width bins over [min, max] (`bin_edges` has len(counts)+1
    entries); a single-point range collapses to one bin.
    """

    counts: list[int]
    bin_edges: list[float] | None
    bin_values: list[int] | None

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_json(self) -> dict:
        return {"counts": self.counts, "bin_edges": self.bin_edges,
                "bin_values": self.bin_values}


def action_histogram(episode: Episode, bins: int = 10) -> Histogram:
    """Histogram of all flattened action values across the episode."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not episode.experiences:
        return Histogram(counts=[], bin_edges=[], bin_values=None)
    values = np.concatenate([e.a.reshape(-1) for e in episode.experiences])
    if values.dtype.kind in "iu":
        lo, hi = int(values.min()), int(values.max())
        bin_values = list(range(lo, hi + 1))
        counts = [0] * len(bin_values)
        for v in values:
            counts[int(v) - lo] += 1
        return Histogram(counts=counts, bin_edges=None, bin_values=bin_values)
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        return Histogram(counts=[int(values.size)], bin_edges=[lo, hi], bin_values=None)
    counts = [0] * bins
    width = hi - lo
    for v in values:
        idx = int(bins * (float(v) - lo) / width)
        if idx == bins:  # v == hi lands in the last (closed) bin
            idx -= 1
        counts[idx] += 1
    edges = [lo + width * i / bins for i in range(bins)] + [hi]
    return Histogram(counts=counts, bin_edges=edges, bin_values=None)
