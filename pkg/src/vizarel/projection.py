"""Exact t-SNE projection of replay-buffer experiences to 2-D.

The pipeline is subsample -> featurize -> project. The t-SNE core is
the exact O(N^2) method: per-row bisection on the Gaussian bandwidth
until the row perplexity hits the target, symmetrized affinities, and
gradient descent with a Student-t low-dimensional kernel, early
exaggeration, and per-parameter gains. N is bounded upstream by
subsampling, so no Barnes-Hut approximation is attempted.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import Episode, Experience

AFFINITY_FLOOR = 1e-12
PERPLEXITY_RTOL = 1e-5
MAX_BISECTION_STEPS = 200
POOL_TARGET = 16  # max output side length for image observations

ProgressFn = Callable[[float], None]


class ProjectionCancelled(RuntimeError):
    """Raised inside a projection job when its cancel event is set."""


@dataclass(frozen=True)
class ProjectionParams:
    perplexity: float = 30.0
    iterations: int = 1000
    learning_rate: float = 200.0
    early_exaggeration: float = 12.0
    exaggeration_iters: int = 250
    momentum_early: float = 0.5
    momentum_late: float = 0.8
    momentum_switch_iter: int = 250
    seed: int = 0

    def validate(self, n_points: int) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if n_points >= 4 and not 1.0 < self.perplexity < n_points:
            raise ValueError(
                f"perplexity must lie in (1, {n_points}) for {n_points} points")

    def to_json(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "early_exaggeration": self.early_exaggeration,
            "exaggeration_iters": self.exaggeration_iters,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FeatureMatrix:
    """Standardized feature rows plus back-references to their sources."""

    X: np.ndarray                       # N x D, float64
    refs: tuple[tuple[int, int], ...]   # (episode_id, t) per row
    mean: np.ndarray                    # per-column mean before scaling
    std: np.ndarray                     # per-column std; 0 where constant


@dataclass(frozen=True)
class ProjectionResult:
    Y: np.ndarray                       # N x 2, float64
    refs: tuple[tuple[int, int], ...]
    kl: float
    params: ProjectionParams
    # KL measured the moment exaggeration is lifted; None for short runs
    kl_post_exaggeration: float | None = None

    def to_json(self) -> dict:
        return {
            "points": [[float(x), float(y)] for x, y in self.Y],
            "refs": [[int(e), int(t)] for e, t in self.refs],
            "kl": self.kl,
            "params": self.params.to_json(),
            "n": int(self.Y.shape[0]),
        }


# -- featurization --------------------------------------------------------------


def _pool_axis(a: np.ndarray, axis: int) -> np.ndarray:
    """Mean-pool one axis down to at most POOL_TARGET entries."""
    n = a.shape[axis]
    if n <= POOL_TARGET:
        return a
    k = math.ceil(n / POOL_TARGET)
    starts = np.arange(0, n, k)
    sums = np.add.reduceat(a, starts, axis=axis)
    sizes = np.minimum(starts + k, n) - starts
    shape = [1] * a.ndim
    shape[axis] = len(starts)
    return sums / sizes.reshape(shape)


def _obs_features(obs: np.ndarray) -> np.ndarray:
    """Flatten an observation; images are mean-pooled spatially first."""
    x = obs.astype(np.float64)
    if x.ndim >= 2:
        x = _pool_axis(x, 0)
        x = _pool_axis(x, 1)
    return x.reshape(-1)


def featurize(experiences: Sequence[Experience],
              refs: Sequence[tuple[int, int]]) -> FeatureMatrix:
    """Rows of concat(s, a, r, s_next), standardized per column.

    A missing successor observation contributes a copy of s, keeping
    the row width fixed. Zero-variance columns are left at exactly 0.
    """
    if len(experiences) == 0:
        raise ValueError("featurize needs at least one experience")
    if len(refs) != len(experiences):
        raise ValueError("refs must parallel experiences")
    rows = []
    for e in experiences:
        s = _obs_features(e.s)
        s_next = _obs_features(e.s_next) if e.s_next is not None else s
        rows.append(np.concatenate([
            s,
            e.a.astype(np.float64).reshape(-1),
            e.r.astype(np.float64).reshape(-1),
            s_next,
        ]))
    X = np.stack(rows)
    X = np.nan_to_num(X, nan=0.0, posinf=0.0, neginf=0.0)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    nonzero = std > 0
    X = X - mean
    X[:, nonzero] /= std[nonzero]
    X[:, ~nonzero] = 0.0
    return FeatureMatrix(X=X, refs=tuple((int(a), int(b)) for a, b in refs),
                         mean=mean, std=np.where(nonzero, std, 0.0))


# -- affinities -----------------------------------------------------------------


def pairwise_sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", X, X)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def calibrate_conditionals(X: np.ndarray, perplexity: float, *,
                           progress: ProgressFn | None = None,
                           cancel: threading.Event | None = None,
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Per-row Gaussian conditionals tuned to the target perplexity.

    Bisection on the precision beta_i runs until the achieved row
    perplexity 2^H is within PERPLEXITY_RTOL (relative) of the target,
    up to MAX_BISECTION_STEPS. Returns (P_cond, beta).
    """
    n = X.shape[0]
    if n < 4:
        raise ValueError("affinity calibration needs at least 4 points")
    if not 1.0 < perplexity < n:
        raise ValueError(f"perplexity must lie in (1, {n})")
    d2 = pairwise_sq_dists(X)
    off_diag = ~np.eye(n, dtype=bool)
    dup = off_diag & (d2 == 0.0)
    if dup.any():
        # duplicate points give degenerate rows; nudge them apart
        d2 = d2 + dup * 1e-10

    target_h = math.log2(perplexity)
    beta = np.ones(n)
    beta_lo = np.zeros(n)
    beta_hi = np.full(n, np.inf)
    active = np.arange(n)
    p_cond = np.zeros((n, n))
    # drop the diagonal so each row is a distribution over the other points
    idx_wo_self = np.stack([np.delete(np.arange(n), i) for i in range(n)])
    d2_wo_self = np.take_along_axis(d2, idx_wo_self, axis=1)

    for step in range(MAX_BISECTION_STEPS):
        if cancel is not None and cancel.is_set():
            raise ProjectionCancelled
        if active.size == 0:
            break
        d2a = d2_wo_self[active]
        shift = d2a.min(axis=1, keepdims=True)
        logits = -beta[active, None] * (d2a - shift)
        p = np.exp(logits)
        sum_p = p.sum(axis=1)
        p /= sum_p[:, None]
        # H in bits; shift-invariant because it is computed from p itself
        h_nats = beta[active] * np.einsum("ij,ij->i", p, d2a - shift) + np.log(sum_p)
        h_bits = h_nats / math.log(2.0)
        achieved = np.exp2(h_bits)
        done = np.abs(achieved - perplexity) <= PERPLEXITY_RTOL * perplexity
        if step == MAX_BISECTION_STEPS - 1:
            done[:] = True  # give up and keep the best rows found so far
        if done.any():
            settled = active[done]
            scattered = np.zeros((len(settled), n))
            np.put_along_axis(scattered, idx_wo_self[settled], p[done], axis=1)
            p_cond[settled] = scattered
        too_high = h_bits > target_h  # entropy too high: sharpen (raise beta)
        grow = too_high & ~done
        shrink = ~too_high & ~done
        g, s = active[grow], active[shrink]
        beta_lo[g] = beta[g]
        beta[g] = np.where(np.isinf(beta_hi[g]), beta[g] * 2.0,
                           (beta[g] + beta_hi[g]) / 2.0)
        beta_hi[s] = beta[s]
        beta[s] = (beta[s] + beta_lo[s]) / 2.0
        active = active[~done]
        if progress is not None:
            progress(1.0 - active.size / n)
    return p_cond, beta


def calibrate_affinities(X: np.ndarray, perplexity: float, *,
                         progress: ProgressFn | None = None,
                         cancel: threading.Event | None = None) -> np.ndarray:
    """Symmetrized joint affinities P: zero diagonal, Sum P = 1.

    Entries are floored at AFFINITY_FLOOR and the matrix renormalized,
    so both the floor and the unit sum hold to reporting precision.
    """
    p_cond, _ = calibrate_conditionals(X, perplexity, progress=progress,
                                       cancel=cancel)
    n = X.shape[0]
    p = (p_cond + p_cond.T) / (2.0 * n)
    off_diag = ~np.eye(n, dtype=bool)
    p[off_diag] = np.maximum(p[off_diag], AFFINITY_FLOOR)
    p /= p.sum()
    return p


# -- optimization ---------------------------------------------------------------


def kl_and_grad(P: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    """KL(P || Q) under the Student-t kernel and its analytic gradient.

    grad_i = 4 * sum_j (p_ij - q_ij) * w_ij * (y_i - y_j), with
    w_ij = 1 / (1 + ||y_i - y_j||^2).
    """
    sq = np.einsum("ij,ij->i", Y, Y)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Y @ Y.T)
    np.maximum(d2, 0.0, out=d2)
    w = 1.0 / (1.0 + d2)
    np.fill_diagonal(w, 0.0)
    q = w / w.sum()
    np.maximum(q, AFFINITY_FLOOR, out=q)
    np.fill_diagonal(q, 0.0)
    mask = P > 0
    kl = float(np.sum(P[mask] * np.log(P[mask] / q[mask])))
    m = (P - q) * w
    grad = 4.0 * (m.sum(axis=1)[:, None] * Y - m @ Y)
    return kl, grad


def _degenerate_layout(n: int) -> np.ndarray:
    if n == 1:
        return np.zeros((1, 2))
    if n == 2:
        return np.array([[-0.5, 0.0], [0.5, 0.0]])
    # unit-side equilateral triangle centered on the origin
    r = 1.0 / math.sqrt(3.0)
    return np.array([[0.0, r],
                     [-0.5, -r / 2.0],
                     [0.5, -r / 2.0]])


def project(X: np.ndarray, refs: Sequence[tuple[int, int]],
            params: ProjectionParams = ProjectionParams(), *,
            progress: ProgressFn | None = None,
            cancel: threading.Event | None = None) -> ProjectionResult:
    """Run t-SNE on standardized features; deterministic per seed.

    For fewer than 4 points a fixed layout is returned (origin; two
    points at +-0.5 on the x axis; a centered unit triangle).
    """
    n = X.shape[0]
    refs = tuple((int(a), int(b)) for a, b in refs)
    if len(refs) != n:
        raise ValueError("refs must parallel X rows")
    params.validate(n)
    if n < 4:
        return ProjectionResult(Y=_degenerate_layout(n), refs=refs, kl=0.0,
                                params=params)

    def affinity_progress(frac: float) -> None:
        if progress is not None:
            progress(0.2 * frac)

    P = calibrate_affinities(X, params.perplexity, progress=affinity_progress,
                             cancel=cancel)
    exaggerated = P * params.early_exaggeration
    rng = np.random.default_rng(params.seed)
    Y = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(Y)
    gains = np.ones_like(Y)
    kl = math.inf
    kl_post_exaggeration = None
    for it in range(params.iterations):
        if cancel is not None and cancel.is_set():
            raise ProjectionCancelled
        p_cur = exaggerated if it < params.exaggeration_iters else P
        kl, grad = kl_and_grad(p_cur, Y)
        if it == params.exaggeration_iters:
            kl_post_exaggeration = kl
        if not np.isfinite(grad).all():
            bad = int(np.argwhere(~np.isfinite(grad))[0][0])
            raise ArithmeticError(
                f"non-finite gradient at iteration {it}, point {bad}")
        opposed = velocity * grad < 0.0
        gains = np.where(opposed, gains + 0.2, gains * 0.8)
        np.maximum(gains, 0.01, out=gains)
        momentum = (params.momentum_early if it < params.momentum_switch_iter
                    else params.momentum_late)
        velocity = momentum * velocity - params.learning_rate * gains * grad
        Y = Y + velocity
        Y = Y - Y.mean(axis=0)
        if progress is not None:
            progress(0.2 + 0.8 * (it + 1) / params.iterations)
    if params.iterations > params.exaggeration_iters:
        final_kl = kl  # last iteration already used the plain P
    else:
        final_kl, _ = kl_and_grad(P, Y)
    return ProjectionResult(Y=Y, refs=refs, kl=float(final_kl), params=params,
                            kl_post_exaggeration=kl_post_exaggeration)


# -- subsampling ----------------------------------------------------------------


def subsample(episodes: Sequence[Episode], window: int | None,
              max_points: int, seed: int,
              ) -> tuple[list[Experience], list[tuple[int, int]]]:
    """Most recent `window` steps across episodes, thinned to max_points.

    Thinning is a seeded uniform sample without replacement; the
    surviving steps keep (episode_id, t) order.
    """
    if max_points < 4:
        raise ValueError("max_points must be >= 4")
    if window is not None and window < 1:
        raise ValueError("window must be >= 1 when given")
    pool: list[tuple[Experience, tuple[int, int]]] = []
    for ep in sorted(episodes, key=lambda e: e.id):
        for exp in ep.experiences:
            pool.append((exp, (ep.id, exp.t)))
    if window is not None:
        pool = pool[-window:]
    if len(pool) < 4:
        raise ValueError(f"projection needs at least 4 steps, have {len(pool)}")
    if len(pool) > max_points:
        rng = np.random.default_rng(seed)
        keep = np.sort(rng.choice(len(pool), size=max_points, replace=False))
        pool = [pool[i] for i in keep]
    return [e for e, _ in pool], [r for _, r in pool]
