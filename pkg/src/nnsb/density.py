"""Non-parametric nearest-neighbor density and density-ratio estimation in 1-D.

The distance to the M-th nearest neighbor of a query z within a sample set
spans an interval of probability mass M/N, so the density at z is estimated
as (M/N) / (2 * eps) where eps is that distance and 2 the length of the 1-D
unit ball. Two refinements stabilize the raw estimate: the neighbor distance
is replaced by a weighted combination over ranks M-2..M+2, and the density is
averaged over several values of M.

Ratios of such radii between two sample sets estimate density ratios with the
unit-ball constant cancelling; the rank in the larger set is scaled by the
set-size ratio so both radii cover comparable probability mass.

Gradients flow through the distance to the selected neighbor: neighbor
identities are recomputed from current values at every evaluation and then
held fixed during backpropagation, which is the exact gradient almost
everywhere because the ranking is piecewise constant.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clamp_min, gather, mul, reduce_sum, sqrt_pos

__all__ = [
    "WINDOW_OFFSETS",
    "DEFAULT_M_VALUES",
    "EPS_FLOOR",
    "DegenerateNeighborsWarning",
    "SmoothingSpec",
    "neighbor_distance",
    "smoothed_neighbor_distance",
    "density_at",
    "density_ratio",
    "scaled_rank",
    "ranked_distances",
    "ranked_neighbor_indices",
    "gathered_radii",
    "window_combine",
]

WINDOW_OFFSETS = (-2, -1, 0, 1, 2)
DEFAULT_M_VALUES = (5, 10, 20)
EPS_FLOOR = 1e-9


class DegenerateNeighborsWarning(UserWarning):
    """Duplicate points produced a zero neighbor distance that was clamped."""


def _gaussian_window(sigma: float) -> tuple[float, ...]:
    w = np.exp(-0.5 * (np.asarray(WINDOW_OFFSETS, dtype=float) / sigma) ** 2)
    w /= w.sum()
    return tuple(w)


@dataclass(frozen=True)
class SmoothingSpec:
    """Rank-window weights plus the list of M values to average densities over.

    ``window_weights`` apply to neighbor ranks M-2..M+2 and must be
    nonnegative and sum to one. Ranks carrying zero weight are never
    evaluated, so a degenerate window (0,0,1,0,0) places no constraint
    beyond the center rank itself.
    """

    window_weights: tuple[float, ...] = field(default_factory=lambda: _gaussian_window(1.0))
    m_values: tuple[int, ...] = DEFAULT_M_VALUES

    def __post_init__(self):
        w = np.asarray(self.window_weights, dtype=float)
        if w.shape != (len(WINDOW_OFFSETS),):
            raise ValueError(f"window_weights must have {len(WINDOW_OFFSETS)} entries")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("window_weights must be nonnegative and sum to 1")
        if not self.m_values:
            raise ValueError("m_values must be nonempty")
        if any(int(m) != m or m < 1 for m in self.m_values):
            raise ValueError("m_values must be positive integers")
        low = min(o for o, wk in zip(WINDOW_OFFSETS, self.window_weights) if wk > 0)
        if min(self.m_values) + low < 1:
            raise ValueError("smallest weighted rank must be >= 1")

    @staticmethod
    def gaussian(sigma: float = 1.0, m_values=DEFAULT_M_VALUES) -> "SmoothingSpec":
        return SmoothingSpec(_gaussian_window(sigma), tuple(m_values))

    @staticmethod
    def unsmoothed(m_values=DEFAULT_M_VALUES) -> "SmoothingSpec":
        return SmoothingSpec((0.0, 0.0, 1.0, 0.0, 0.0), tuple(m_values))

    def active_offsets(self) -> list[tuple[int, float]]:
        return [(o, w) for o, w in zip(WINDOW_OFFSETS, self.window_weights) if w > 0]

    def max_rank(self) -> int:
        hi = max(o for o, w in self.active_offsets())
        return max(self.m_values) + hi


def _self_excluded(dist: np.ndarray) -> np.ndarray:
    zero = np.flatnonzero(dist == 0.0)
    if zero.size == 0:
        raise ValueError("exclude_self requires the query to be a member of the set")
    return np.delete(dist, zero[0])


def neighbor_distance(z: float, points: np.ndarray, rank: int, exclude_self: bool = False) -> float:
    """Distance from z to its rank-th nearest neighbor among ``points``.

    With exclude_self, one zero-distance self match is removed first (the
    query must then be a member of the set).
    """
    points = np.asarray(points, dtype=np.float64).ravel()
    dist = np.abs(points - z)
    if exclude_self:
        dist = _self_excluded(dist)
    if not 1 <= rank <= dist.size:
        raise ValueError(f"rank {rank} out of range for {dist.size} candidates")
    return float(np.partition(dist, rank - 1)[rank - 1])


def smoothed_neighbor_distance(
    z: float,
    points: np.ndarray,
    spec: SmoothingSpec,
    rank: int,
    exclude_self: bool = False,
) -> float:
    """Window-weighted combination of neighbor distances around ``rank``."""
    return sum(
        w * neighbor_distance(z, points, rank + o, exclude_self)
        for o, w in spec.active_offsets()
    )


def _clamped(eps: float) -> tuple[float, bool]:
    if eps < EPS_FLOOR:
        return EPS_FLOOR, True
    return eps, False


def _warn_degenerate(count: int):
    warnings.warn(
        f"{count} zero neighbor distance(s) clamped to {EPS_FLOOR}; "
        "duplicate points in the sample set",
        DegenerateNeighborsWarning,
        stacklevel=3,
    )


def density_at(
    z: float,
    points: np.ndarray,
    spec: SmoothingSpec | None = None,
    exclude_self: bool = False,
) -> float:
    """Estimated probability density at z, averaged over ``spec.m_values``."""
    spec = spec or SmoothingSpec()
    points = np.asarray(points, dtype=np.float64).ravel()
    n = points.size - (1 if exclude_self else 0)
    clamped = 0
    total = 0.0
    for m in spec.m_values:
        eps, hit = _clamped(smoothed_neighbor_distance(z, points, spec, m, exclude_self))
        clamped += hit
        total += (m / n) / (2.0 * eps)
    if clamped:
        _warn_degenerate(clamped)
    return total / len(spec.m_values)


def scaled_rank(n_p: int, n_q: int, rank: int) -> int:
    """Rank in the p set carrying the same probability mass as ``rank`` in q."""
    return max(1, round(n_p / n_q * rank))


def density_ratio(
    z: float,
    p_points: np.ndarray,
    q_points: np.ndarray,
    rank: int,
    spec: SmoothingSpec | None = None,
    exclude_self_p: bool = False,
    exclude_self_q: bool = False,
) -> float:
    """Estimate q(z) / p(z) as a ratio of neighbor radii.

    q is typically the subset of samples sharing the query's sensitive label
    and p the full sample; the rank in p is scaled by n_p / n_q so both radii
    enclose comparable mass, and the unit-ball constant cancels. Callers set
    the exclusion flags for whichever sets contain the query itself.
    """
    spec = spec or SmoothingSpec()
    p_points = np.asarray(p_points, dtype=np.float64).ravel()
    q_points = np.asarray(q_points, dtype=np.float64).ravel()
    rank_p = scaled_rank(p_points.size, q_points.size, rank)
    num, hit_n = _clamped(smoothed_neighbor_distance(z, p_points, spec, rank_p, exclude_self_p))
    den, hit_d = _clamped(smoothed_neighbor_distance(z, q_points, spec, rank, exclude_self_q))
    if hit_n or hit_d:
        _warn_degenerate(hit_n + hit_d)
    return num / den


# --- batched evaluation -----------------------------------------------------

_CHUNK = 512


def ranked_distances(
    queries: np.ndarray,
    points: np.ndarray,
    ranks: np.ndarray,
    self_indices: np.ndarray | None = None,
) -> np.ndarray:
    """[n_queries, n_ranks] neighbor distances at the given 1-based ranks.

    ``self_indices[i]`` names the column of ``points`` holding query i itself,
    to be excluded from its own ranking; pass None when queries are not
    members of the set.
    """
    queries = np.asarray(queries, dtype=np.float64).ravel()
    points = np.asarray(points, dtype=np.float64).ravel()
    ranks = np.asarray(ranks, dtype=np.int64)
    avail = points.size - (1 if self_indices is not None else 0)
    if ranks.min() < 1 or ranks.max() > avail:
        raise ValueError(f"ranks must lie in [1, {avail}]")
    out = np.empty((queries.size, ranks.size))
    top = int(ranks.max())
    for lo in range(0, queries.size, _CHUNK):
        hi = min(lo + _CHUNK, queries.size)
        dist = np.abs(queries[lo:hi, None] - points[None, :])
        if self_indices is not None:
            dist[np.arange(hi - lo), self_indices[lo:hi]] = np.inf
        head = np.partition(dist, top - 1, axis=1)[:, :top]
        head.sort(axis=1)
        out[lo:hi] = head[:, ranks - 1]
    return out


def ranked_neighbor_indices(
    queries: np.ndarray,
    points: np.ndarray,
    ranks: np.ndarray,
    self_indices: np.ndarray | None = None,
) -> np.ndarray:
    """[n_queries, n_ranks] indices into ``points`` of the rank-th neighbors."""
    queries = np.asarray(queries, dtype=np.float64).ravel()
    points = np.asarray(points, dtype=np.float64).ravel()
    ranks = np.asarray(ranks, dtype=np.int64)
    avail = points.size - (1 if self_indices is not None else 0)
    if ranks.min() < 1 or ranks.max() > avail:
        raise ValueError(f"ranks must lie in [1, {avail}]")
    out = np.empty((queries.size, ranks.size), dtype=np.int64)
    top = int(ranks.max())
    for lo in range(0, queries.size, _CHUNK):
        hi = min(lo + _CHUNK, queries.size)
        dist = np.abs(queries[lo:hi, None] - points[None, :])
        if self_indices is not None:
            dist[np.arange(hi - lo), self_indices[lo:hi]] = np.inf
        part = np.argpartition(dist, top - 1, axis=1)[:, :top]
        order = np.take_along_axis(dist, part, axis=1).argsort(axis=1, kind="stable")
        out[lo:hi] = np.take_along_axis(part, order, axis=1)[:, ranks - 1]
    return out


def gathered_radii(sqdist: Tensor, flat_indices: np.ndarray, warn: bool = True) -> Tensor:
    """Recorded neighbor distances from a pairwise squared-distance tensor.

    ``flat_indices`` select (query, neighbor) entries of the raveled matrix;
    squared distances are clamped at EPS_FLOOR^2 before the square root so
    duplicate points stay differentiable (with a warning).
    """
    picked = gather(sqdist, flat_indices)
    if warn:
        n_zero = int(np.count_nonzero(picked.values < EPS_FLOOR**2))
        if n_zero:
            _warn_degenerate(n_zero)
    return sqrt_pos(clamp_min(picked, EPS_FLOOR**2))


def window_combine(radii: Tensor, weights) -> Tensor:
    """Weighted sum over the trailing (window) axis of recorded radii."""
    return reduce_sum(mul(radii, np.asarray(weights, dtype=np.float64)), axis=radii.values.ndim - 1)
