"""Adaptive (per-sector) and fixed global top-k query selection.

Both selectors read an encoder output that exposes, for every pyramid
position in level-major order:

* ``scores``          foreground probabilities, shape ``(N,)``
* ``levels``          1-based pyramid level
* ``t_index``         0-based index within the level
* ``position_times``  snippet-midpoint time in seconds (sector membership)
* ``proposal_centers`` / ``proposal_widths``  decoded encoder proposals
* ``snippet_sec``     seconds per level-1 step

Ties in score go to the earlier position time, then the lower level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


@dataclass(frozen=True, eq=False)
class SectorPlan:
    sector_len: int
    num_sectors: int
    boundaries: np.ndarray

    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)


@dataclass(eq=False)
class QuerySet:
    index: np.ndarray  # flat pyramid position of each query
    centers: Any
    widths: Any
    scores: np.ndarray
    t_index: np.ndarray
    levels: np.ndarray
    sectors: np.ndarray

    def __len__(self):
        return len(self.index)


def plan_sectors(T1: int, t_sector: int) -> SectorPlan:
    if T1 < 1 or t_sector < 1:
        raise ValueError(f"T1 and t_sector must be >= 1, got {T1}, {t_sector}")
    S = max(1, T1 // t_sector)
    # floor(s*T1/S) spreads the remainder so every sector has >= t_sector steps
    boundaries = (np.arange(S + 1, dtype=np.int64) * T1) // S
    return SectorPlan(t_sector, S, boundaries)


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


def _rank_order(scores: np.ndarray, times: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # lexsort: last key is primary
    return np.lexsort((levels, times, -scores))


def sector_membership(enc, plan: SectorPlan) -> np.ndarray:
    edges = plan.boundaries[1:-1].astype(np.float64) * enc.snippet_sec
    times = _as_numpy(enc.position_times).astype(np.float64)
    return np.searchsorted(edges, times, side="right")


def gather_queries(enc, chosen: np.ndarray, sectors: np.ndarray) -> QuerySet:
    """QuerySet for fixed flat positions ``chosen`` of an encoder output."""
    chosen = np.asarray(chosen, dtype=np.int64)
    centers, widths = enc.proposal_centers, enc.proposal_widths
    if hasattr(centers, "index_select"):
        import torch

        idx = torch.as_tensor(chosen, device=centers.device)
        centers, widths = centers.index_select(0, idx), widths.index_select(0, idx)
    else:
        centers, widths = np.asarray(centers)[chosen], np.asarray(widths)[chosen]
    return QuerySet(
        index=chosen,
        centers=centers,
        widths=widths,
        scores=_as_numpy(enc.scores)[chosen],
        t_index=_as_numpy(enc.t_index)[chosen],
        levels=_as_numpy(enc.levels)[chosen],
        sectors=sectors,
    )


def select_adaptive(enc, grids: Sequence, plan: SectorPlan, k: int) -> QuerySet:
    """Top-``k`` encoder proposals inside every sector, pooled over all levels."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_grids(enc, grids)
    scores = _as_numpy(enc.scores)
    times = _as_numpy(enc.position_times)
    levels = _as_numpy(enc.levels)
    membership = sector_membership(enc, plan)
    chosen, owner = [], []
    for s in range(plan.num_sectors):
        members = np.flatnonzero(membership == s)
        if len(members) < k:
            raise ValueError(f"k={k} exceeds the {len(members)} positions of sector {s}")
        order = _rank_order(scores[members], times[members], levels[members])
        chosen.append(members[order[:k]])
        owner.append(np.full(k, s, dtype=np.int64))
    return gather_queries(enc, np.concatenate(chosen), np.concatenate(owner))


def select_fixed_topk(enc, grids: Sequence, n: int) -> QuerySet:
    """Global top-``n`` by foreground score (the conventional two-stage rule)."""
    _check_grids(enc, grids)
    scores = _as_numpy(enc.scores)
    if not 1 <= n <= len(scores):
        raise ValueError(f"n={n} must lie in [1, {len(scores)}]")
    order = _rank_order(scores, _as_numpy(enc.position_times), _as_numpy(enc.levels))
    return gather_queries(enc, order[:n], np.zeros(n, dtype=np.int64))


def _check_grids(enc, grids):
    if grids is None:
        return
    total = sum(len(g) for g in grids)
    if total != len(enc.scores):
        raise ValueError(f"grids describe {total} positions, encoder produced {len(enc.scores)}")
