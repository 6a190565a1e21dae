"""Rollout metrics: priority-order agreement, goal visits, batch diversity."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist


def sequence_match(visit_order: Sequence, priority: Sequence) -> int:
    """Number of priority-ordered goal pairs visited in the same relative order.

    A pair ``(g_i, g_j)`` with ``g_i`` ranked before ``g_j`` counts when both
    were visited and ``g_i`` was visited first. The maximum is ``C(|G|, 2)``.
    """
    rank = {g: k for k, g in enumerate(priority)}
    if len(rank) != len(priority):
        raise ValueError("priority lists a goal twice")
    unknown = [g for g in visit_order if g not in rank]
    if unknown:
        raise ValueError(f"visited goals {unknown} are not in the goal set")
    if len(set(visit_order)) != len(visit_order):
        raise ValueError("visit order must list each goal once")
    when = {g: k for k, g in enumerate(visit_order)}
    return sum(1 for a, b in combinations(priority, 2) if a in when and b in when and when[a] < when[b])


def goal_metrics(first_visits: dict, total_steps: int, priority: Sequence | None = None) -> dict:
    """Found count, steps per found goal (``None`` when nothing was found), success.

    ``first_visits`` maps goal -> first timestep within threshold.
    """
    found = len(first_visits)
    out = {
        "found": found,
        "timesteps_per_goal": (total_steps / found) if found else None,
        "success": found > 0,
        "visit_order": [g for g, _ in sorted(first_visits.items(), key=lambda kv: (kv[1], kv[0]))],
    }
    if priority is not None:
        out["sequence_match"] = sequence_match(out["visit_order"], priority)
        out["all_found"] = found == len(priority)
    return out


def pairwise_distance(batch: np.ndarray) -> float:
    """Mean L2 distance over all unordered pairs of flattened trajectories."""
    batch = np.asarray(batch, dtype=float)
    if len(batch) < 2:
        raise ValueError("pairwise distance needs at least two trajectories")
    return float(np.mean(pdist(batch.reshape(len(batch), -1))))
