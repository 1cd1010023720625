"""Prior-guided depth sampling along camera rays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BvhIndex, crossing_table

EXTEND = 0.1
DEFAULT_SAMPLES = math.ceil(128 * 1.2)  # 154
FALLBACK = -1


@dataclass
class IntervalSet:
    starts: np.ndarray
    ends: np.ndarray
    lengths: np.ndarray  # un-extended crossing lengths (summed when intervals merge)

    @property
    def n(self) -> int:
        return len(self.starts)


@dataclass
class DepthSamples:
    depths: np.ndarray
    interval_ids: np.ndarray  # FALLBACK for uniform samples

    @property
    def is_fallback(self) -> bool:
        return bool(len(self.interval_ids)) and bool(self.interval_ids[0] == FALLBACK)


def build_intervals(depths, near: float = 0.0, far: float = np.inf) -> IntervalSet | None:
    """Pair crossings into intervals, extend each by 10% of its length, merge and clip.

    Returns None (fallback) for an odd crossing count or when nothing survives clipping.
    """
    z = np.asarray(depths, dtype=np.float64)
    if len(z) == 0 or len(z) % 2:
        return None
    z0, z1 = z[0::2], z[1::2]
    lengths = z1 - z0
    starts = z0 - EXTEND * lengths
    ends = z1 + EXTEND * lengths
    ms, me, ml = [starts[0]], [ends[0]], [lengths[0]]
    for s, e, l in zip(starts[1:], ends[1:], lengths[1:]):
        if s <= me[-1]:
            me[-1] = max(me[-1], e)
            ml[-1] += l
        else:
            ms.append(s)
            me.append(e)
            ml.append(l)
    s = np.clip(np.array(ms), near, far)
    e = np.clip(np.array(me), near, far)
    keep = e > s
    if not np.any(keep):
        return None
    return IntervalSet(s[keep], e[keep], np.array(ml)[keep])


def allocate_counts(lengths, n_samples: int) -> np.ndarray:
    """Floor of the proportional share, remainder by largest fractional part (ties: lower index)."""
    lengths = np.asarray(lengths, dtype=np.float64)
    if n_samples < len(lengths):
        raise ValueError(f"N_samples={n_samples} is smaller than the interval count {len(lengths)}")
    share = lengths / lengths.sum() * n_samples
    counts = np.floor(share).astype(np.int64)
    rest = n_samples - counts.sum()
    if rest:
        order = np.argsort(-(share - counts), kind="stable")
        counts[order[:rest]] += 1
    return counts


def _cells(start, end, count, offsets):
    step = (end - start) / count
    return start + (np.arange(count) + offsets) * step


def allocate_samples(intervals: IntervalSet, n_samples: int, rng: np.random.Generator | None = None) -> DepthSamples:
    """Midpoint-rule samples in each interval; ``rng`` jitters within each cell."""
    counts = allocate_counts(intervals.lengths, n_samples)
    depths, ids = [], []
    for i, c in enumerate(counts):
        if c == 0:
            continue
        off = 0.5 if rng is None else rng.random(c)
        depths.append(_cells(intervals.starts[i], intervals.ends[i], c, off))
        ids.append(np.full(c, i))
    return DepthSamples(np.concatenate(depths), np.concatenate(ids))


def fallback_uniform(near: float, far: float, n_samples: int, rng: np.random.Generator | None = None) -> DepthSamples:
    off = 0.5 if rng is None else rng.random(n_samples)
    return DepthSamples(_cells(near, far, n_samples, off), np.full(n_samples, FALLBACK))


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab test; returns (t_near, t_far, hit) with t clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tn = np.nanmax(np.minimum(t0, t1), axis=1)
    tf = np.nanmin(np.maximum(t0, t1), axis=1)
    tn = np.maximum(tn, 0.0)
    return tn, tf, tf > tn


@dataclass
class RaySamples:
    depths: np.ndarray  # (R, N)
    interval_ids: np.ndarray  # (R, N)
    fallback: np.ndarray  # (R,) bool
    parity_violations: int


def sample_rays(
    bvh: BvhIndex | None,
    origins: np.ndarray,
    dirs: np.ndarray,
    n_samples: int,
    near: float,
    far: float,
    scene_box: tuple[np.ndarray, np.ndarray] | None = None,
    rng: np.random.Generator | None = None,
) -> RaySamples:
    """Per-ray prior-guided samples against ``bvh`` (the posed dilated body).

    Rays with no usable crossing interval fall back to uniform samples over the
    span where they cross ``scene_box`` (or [near, far] when they miss it).
    """
    R = len(origins)
    depths = np.empty((R, n_samples))
    ids = np.empty((R, n_samples), dtype=np.int64)
    fallback = np.zeros(R, dtype=bool)
    if bvh is not None:
        table, counts = crossing_table(bvh, origins, dirs)
    else:
        table, counts = np.zeros((R, 0)), np.zeros(R, dtype=np.int64)
    if scene_box is not None:
        tn, tf, hit = ray_box(origins, dirs, *scene_box)
        span_near = np.where(hit, np.maximum(tn, near), near)
        span_far = np.where(hit, np.minimum(tf, far), far)
        span_far = np.where(span_far > span_near, span_far, far)
        span_near = np.where(span_far > span_near, span_near, near)
    else:
        span_near = np.full(R, near)
        span_far = np.full(R, far)
    violations = int((counts % 2 == 1).sum())
    for r in range(R):
        iv = build_intervals(table[r, : counts[r]], near, far) if counts[r] else None
        if iv is not None and iv.n <= n_samples:
            s = allocate_samples(iv, n_samples, rng)
        else:
            s = fallback_uniform(span_near[r], span_far[r], n_samples, rng)
            fallback[r] = True
        depths[r] = s.depths
        ids[r] = s.interval_ids
    return RaySamples(depths, ids, fallback, violations)
