"""Trainable dependency losses built on the nearest-neighbor density estimator.

For a batch of scalar latents with balanced binary labels, the density of
each sample is estimated twice: within the subset sharing its label (the
conditional) and within the full batch (the marginal). Their agreement is
driven toward zero through a curriculum: squared density differences first,
then squared deviation of the density ratio from one. The log-ratio form is
the reported mutual
information estimate and is never differentiated.

Because samples are drawn from the conditional, the Monte-Carlo estimate of
the label dependency is the plain mean of per-sample log density ratios.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Tensor, add, div, pairwise_sqdist, reduce_mean, sqrt_pos, square, sub
from .density import (
    EPS_FLOOR,
    SmoothingSpec,
    WINDOW_OFFSETS,
    gathered_radii,
    ranked_distances,
    ranked_neighbor_indices,
    scaled_rank,
    window_combine,
)

__all__ = [
    "LossPhase",
    "PhaseSchedule",
    "LatentBatch",
    "NeighborPlan",
    "mi_estimate",
    "kl_estimate",
    "loss_sq_diff",
    "loss_sq_ratio",
    "training_loss",
    "select_phase",
    "mi_upper_bound",
]

_OFFS = np.asarray(WINDOW_OFFSETS)


class LossPhase(Enum):
    SQ_DIFF = "sq_diff"
    SQ_RATIO = "sq_ratio"
    LOG_RATIO = "log_ratio"


@dataclass(frozen=True)
class PhaseSchedule:
    """Curriculum control: switch thresholds on a trailing-mean loss window.

    Training starts at SQ_DIFF and moves to SQ_RATIO once the trailing mean
    drops below ``sqdiff_threshold``; SQ_RATIO is terminal for training.
    ``sqratio_threshold`` is reserved for a symmetric switch out of SQ_RATIO
    and currently has no effect. LOG_RATIO is reporting-only.
    """

    sqdiff_threshold: float = 1e-3
    sqratio_threshold: float = 1e-3
    window: int = 10

    def __post_init__(self):
        if self.sqdiff_threshold <= 0 or self.sqratio_threshold <= 0:
            raise ValueError("thresholds must be positive")
        if self.window < 1:
            raise ValueError("window must be >= 1")


class LatentBatch:
    """Scalar latents paired with balanced binary labels in {-1, +1}.

    ``z`` may be a recorded Tensor (training) or a plain array (evaluation).
    """

    def __init__(self, z, s):
        self.z = z
        self.s = np.asarray(s)
        values = self.values
        if values.ndim == 2 and values.shape[1] == 1:
            values = values.ravel()
        if values.ndim != 1:
            raise ValueError("latents must be scalar per sample")
        if values.size != self.s.size:
            raise ValueError("z and s must have equal length")
        labels, counts = np.unique(self.s, return_counts=True)
        if not np.array_equal(labels, [-1, 1]):
            raise ValueError("labels must be -1 and +1, both present")
        if counts[0] != counts[1]:
            raise ValueError(f"labels must be balanced, got counts {counts}")

    @property
    def values(self) -> np.ndarray:
        return self.z.values if isinstance(self.z, Tensor) else np.asarray(self.z, dtype=np.float64)

    def __len__(self) -> int:
        return self.s.size


class NeighborPlan:
    """Frozen neighbor assignments for one loss evaluation.

    Maps each (set name, center rank) pair to flat indices into the raveled
    [n, n] pairwise squared-distance matrix of the batch. Building the plan
    ranks neighbors from current values; evaluating a loss against a fixed
    plan keeps the graph piecewise smooth, which is what finite-difference
    gradient checks require.
    """

    def __init__(self, indices: dict[tuple[str, int], np.ndarray], n: int, n_sub: int):
        self.indices = indices
        self.n = n
        self.n_sub = n_sub


def build_plan(values: np.ndarray, s: np.ndarray, spec: SmoothingSpec, ratio_form: bool) -> NeighborPlan:
    """Rank neighbors of every sample within its label subset and the batch.

    For the ratio form the full-set rank is scaled by the set-size ratio
    (exactly 2 for balanced binary labels).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    n = values.size
    n_sub = n // 2
    sub_centers = list(spec.m_values)
    full_centers = [scaled_rank(n, n_sub, m) for m in spec.m_values] if ratio_form else sub_centers
    max_sub = max(sub_centers) + max(_OFFS)
    max_full = max(full_centers) + max(_OFFS)
    if max_sub > n_sub - 1:
        raise ValueError(f"rank {max_sub} exceeds subset capacity {n_sub - 1}")
    if max_full > n - 1:
        raise ValueError(f"rank {max_full} exceeds batch capacity {n - 1}")

    indices: dict[tuple[str, int], np.ndarray] = {}
    order = np.arange(n)
    full_ranks = np.unique(np.concatenate([c + _OFFS for c in full_centers]))
    nbr_full = ranked_neighbor_indices(values, values, full_ranks, self_indices=order)
    pos_full = {r: i for i, r in enumerate(full_ranks)}
    for c in full_centers:
        cols = nbr_full[:, [pos_full[c + o] for o in _OFFS]]
        indices[("full", c)] = order[:, None] * n + cols

    sub_ranks = np.unique(np.concatenate([c + _OFFS for c in sub_centers]))
    for lab in (-1, 1):
        rows = np.flatnonzero(s == lab)
        nbr = ranked_neighbor_indices(
            values[rows], values[rows], sub_ranks, self_indices=np.arange(rows.size)
        )
        pos = {r: i for i, r in enumerate(sub_ranks)}
        for c in sub_centers:
            local = nbr[:, [pos[c + o] for o in _OFFS]]
            key = ("sub", c)
            block = indices.setdefault(key, np.empty((n, len(_OFFS)), dtype=np.int64))
            block[rows] = rows[:, None] * n + rows[local]
    return NeighborPlan(indices, n, n_sub)


def _smoothed_radii(d2: Tensor, plan: NeighborPlan, spec: SmoothingSpec, key: str, center: int) -> Tensor:
    radii = gathered_radii(d2, plan.indices[(key, center)])
    return window_combine(radii, spec.window_weights)


def _standardized_sqdist(z: Tensor) -> Tensor:
    """Pairwise squared distances of the batch-standardized latents.

    Standardizing (with gradients flowing through mean and scale) removes the
    degenerate descent direction where the encoder inflates the latent scale:
    that lowers every density estimate and hence any absolute-density loss
    without reducing the dependency at all. Neighbor ranks are unchanged by
    the affine map, so plans built from raw values stay valid.
    """
    centered = sub(z, reduce_mean(z))
    scale = sqrt_pos(add(reduce_mean(square(centered)), 1e-12))
    zn = div(centered, scale)
    return pairwise_sqdist(zn, zn)


def loss_sq_diff(batch: LatentBatch, spec: SmoothingSpec | None = None, plan: NeighborPlan | None = None) -> Tensor:
    """Mean squared difference between conditional and marginal densities.

    Densities are estimated on batch-standardized latents, making the loss
    invariant to the latent scale (see _standardized_sqdist).
    """
    spec = spec or SmoothingSpec()
    z = batch.z if isinstance(batch.z, Tensor) else Tensor(batch.z)
    plan = plan or build_plan(batch.values, batch.s, spec, ratio_form=False)
    d2 = _standardized_sqdist(z)
    n, n_sub = plan.n, plan.n_sub
    dens_sub = None
    dens_full = None
    for m in spec.m_values:
        ds = div(Tensor(np.full(n, m / (2.0 * n_sub))), _smoothed_radii(d2, plan, spec, "sub", m))
        df = div(Tensor(np.full(n, m / (2.0 * n))), _smoothed_radii(d2, plan, spec, "full", m))
        dens_sub = ds if dens_sub is None else dens_sub + ds
        dens_full = df if dens_full is None else dens_full + df
    k = float(len(spec.m_values))
    return reduce_mean(square(sub(dens_sub * (1.0 / k), dens_full * (1.0 / k))))


def loss_sq_ratio(batch: LatentBatch, spec: SmoothingSpec | None = None, plan: NeighborPlan | None = None) -> Tensor:
    """Mean squared deviation of the density ratio from one."""
    spec = spec or SmoothingSpec()
    z = batch.z if isinstance(batch.z, Tensor) else Tensor(batch.z)
    plan = plan or build_plan(batch.values, batch.s, spec, ratio_form=True)
    d2 = _standardized_sqdist(z)
    n, n_sub = plan.n, plan.n_sub
    ratio = None
    for m in spec.m_values:
        num = _smoothed_radii(d2, plan, spec, "full", scaled_rank(n, n_sub, m))
        den = _smoothed_radii(d2, plan, spec, "sub", m)
        term = div(num, den)
        ratio = term if ratio is None else ratio + term
    ratio = ratio * (1.0 / float(len(spec.m_values)))
    return reduce_mean(square(sub(Tensor(np.ones(n)), ratio)))


def training_loss(batch: LatentBatch, phase: LossPhase, spec: SmoothingSpec | None = None,
                  plan: NeighborPlan | None = None) -> Tensor:
    if phase is LossPhase.SQ_DIFF:
        return loss_sq_diff(batch, spec, plan)
    if phase is LossPhase.SQ_RATIO:
        return loss_sq_ratio(batch, spec, plan)
    raise ValueError(f"{phase} is not a training phase")


def select_phase(history, phase: LossPhase, schedule: PhaseSchedule | None = None) -> LossPhase:
    """Advance the curriculum once the trailing mean clears the threshold.

    ``history`` holds recent loss values of the current phase, most recent
    last; the trailing mean is taken over the last ``schedule.window``
    entries, and no switch happens before a full window has accumulated
    (early losses fluctuate too much to compare against the threshold).
    """
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    schedule = schedule or PhaseSchedule()
    if phase is LossPhase.SQ_DIFF and len(history) >= schedule.window:
        trailing = float(np.mean(history[-schedule.window:]))
        if trailing < schedule.sqdiff_threshold:
            return LossPhase.SQ_RATIO
    return phase


def mi_estimate(batch: LatentBatch, rank: int = 20, spec: SmoothingSpec | None = None) -> float:
    """Dependency between latents and labels as a mean log density ratio.

    Zero indicates independence; values are in nats. Evaluation only -- this
    path builds no graph and is never differentiated.
    """
    spec = spec or SmoothingSpec()
    z = batch.values
    s = batch.s
    n = len(batch)
    w = np.asarray(spec.window_weights)
    total = 0.0
    for lab in (-1, 1):
        rows = np.flatnonzero(s == lab)
        zq = z[rows]
        sub_ranks = rank + _OFFS
        eq = ranked_distances(zq, zq, sub_ranks, self_indices=np.arange(rows.size)) @ w
        rp = scaled_rank(n, rows.size, rank)
        ep = ranked_distances(zq, z, rp + _OFFS, self_indices=rows) @ w
        total += float(np.sum(np.log(np.maximum(ep, EPS_FLOOR) / np.maximum(eq, EPS_FLOOR))))
    return total / n


def kl_estimate(q_samples: np.ndarray, p_samples: np.ndarray, rank: int = 20,
                spec: SmoothingSpec | None = None, p_contains_q: bool = False) -> float:
    """Two-sample KL divergence KL(q || p) from neighbor radii.

    Queries are the q samples (self-excluded within q). With
    ``p_contains_q`` the first len(q) entries of p are taken to be the q
    samples themselves and are likewise self-excluded.
    """
    spec = spec or SmoothingSpec()
    q = np.asarray(q_samples, dtype=np.float64).ravel()
    p = np.asarray(p_samples, dtype=np.float64).ravel()
    w = np.asarray(spec.window_weights)
    eq = ranked_distances(q, q, rank + _OFFS, self_indices=np.arange(q.size)) @ w
    rp = scaled_rank(p.size, q.size, rank)
    self_p = np.arange(q.size) if p_contains_q else None
    ep = ranked_distances(q, p, rp + _OFFS, self_indices=self_p) @ w
    return float(np.mean(np.log(np.maximum(ep, EPS_FLOOR) / np.maximum(eq, EPS_FLOOR))))


def mi_upper_bound(batches, rank: int = 20, spec: SmoothingSpec | None = None) -> float:
    """Sum of per-dimension dependency estimates; bounds the joint dependency
    when dimensions are independent (which the VAE regularizer encourages)."""
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one per-dimension batch")
    first = batches[0].s
    for b in batches[1:]:
        if not np.array_equal(b.s, first):
            raise ValueError("all per-dimension batches must share the same labels")
    return sum(mi_estimate(b, rank, spec) for b in batches)
