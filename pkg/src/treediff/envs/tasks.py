"""Test-time tasks on the point-mass world and their guide functions.

Guides act on ``(..., T, W)`` arrays in environment units whose first two
channels are the position ``(x, y)``; every other channel gets zero gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..diffusion import ConditionSet
from ..guidance import GuideFunction
from .maze import MazeEnv

POS = slice(0, 2)


def _pos_grad(x: np.ndarray, gpos: np.ndarray) -> np.ndarray:
    g = np.zeros(np.shape(x))
    g[..., POS] = gpos
    return g


def _no_gradient(_x):
    raise TypeError("this objective is a selection score and exposes no gradient")


# --------------------------------------------------------------------------- gold picking


@dataclass(frozen=True)
class GoldTask:
    """Reach ``goal`` from ``start`` while passing ``gold`` (unknown to the demos)."""

    start: np.ndarray  # full state (x, y, vx, vy)
    goal: np.ndarray  # position
    gold: np.ndarray  # position
    threshold: float = 0.3
    T_pred: int = 64
    T_max: int = 64
    name: str = "gold"
    kind: str = field(default="gold", init=False)

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")
        for k in ("start", "goal", "gold"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))

    @classmethod
    def from_map(cls, env: MazeEnv, **kw) -> "GoldTask":
        """Start, goal and gold from the ``S``, ``G`` and ``*`` marks of a map."""
        marks = {m: env.marked(m) for m in "SG*"}
        for m, cells in marks.items():
            if len(cells) != 1:
                raise ValueError(f"map {env.name!r} needs exactly one {m!r} cell, found {len(cells)}")
        start = np.concatenate([env.center(marks["S"][0]), np.zeros(2)])
        return cls(start, env.center(marks["G"][0]), env.center(marks["*"][0]), name=f"gold-{env.name}", **kw)

    def validate(self, env: MazeEnv) -> None:
        for p in (self.start[:2], self.goal, self.gold):
            if not env.is_free(p):
                raise ValueError(f"task position {p} is not in a free cell")

    def conditions(self, W: int = 4) -> ConditionSet:
        """Start state on row 0, goal at rest on the last row."""
        goal_row = np.zeros(W)
        goal_row[:2] = self.goal
        return ConditionSet.from_rows({0: self.start[:W], self.T_pred - 1: goal_row})

    def success(self, states: np.ndarray) -> bool:
        states = np.asarray(states)
        d_gold = np.linalg.norm(states[:, :2] - self.gold, axis=1).min()
        d_goal = np.linalg.norm(states[-1, :2] - self.goal)
        return bool(d_gold <= self.threshold and d_goal <= self.threshold)


def gold_guidance(task: GoldTask) -> GuideFunction:
    """``J = -sum_i |s_i - gold|`` over positions."""
    gold = task.gold

    def value(x):
        return -np.sum(np.linalg.norm(x[..., POS] - gold, axis=-1), axis=-1)

    def grad(x):
        d = x[..., POS] - gold
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        safe = np.where(n > 0, n, 1.0)
        return _pos_grad(x, np.where(n > 0, -d / safe, 0.0))

    return GuideFunction("gold-guidance", value, grad, has_true=True)


def gold_true(task: GoldTask) -> GuideFunction:
    """``J = -min_i |s_i - gold|`` (selection only)."""
    gold = task.gold

    def value(x):
        return -np.min(np.linalg.norm(x[..., POS] - gold, axis=-1), axis=-1)

    return GuideFunction("gold-true", value, _no_gradient, has_true=True)


# --------------------------------------------------------------------------- multi-peak placement


@dataclass(frozen=True)
class PlacementTask:
    """Wide local peak and narrow, higher global peak, equidistant from the start.

    ``s_mid`` sits on the segment between the peaks with
    ``|s_mid - s_local| : |s_mid - s_global| = 3 : 1``; the peak widths are
    ``width_factor`` times those two distances.
    """

    start: np.ndarray
    s_local: np.ndarray
    s_global: np.ndarray
    c: tuple[float, float, float] = (1.0, 1.5, 2.0)
    width_factor: float = 0.5
    threshold: float = 0.4
    T_pred: int = 64
    T_max: int = 64
    name: str = "placement"
    kind: str = field(default="placement", init=False)

    def __post_init__(self):
        if min(self.c) <= 0:
            raise ValueError("c1, c2, c3 must be positive")
        for k in ("start", "s_local", "s_global"):
            object.__setattr__(self, k, np.asarray(getattr(self, k), dtype=float))

    @classmethod
    def symmetric(cls, start, radius: float, angle_local: float, angle_global: float, **kw) -> "PlacementTask":
        start = np.asarray(start, dtype=float)
        at = lambda a: start[:2] + radius * np.array([math.cos(a), math.sin(a)])  # noqa: E731
        return cls(start, at(angle_local), at(angle_global), **kw)

    @property
    def s_mid(self) -> np.ndarray:
        return self.s_local + 0.75 * (self.s_global - self.s_local)

    @property
    def widths(self) -> tuple[float, float]:
        m = self.s_mid
        return (
            self.width_factor * float(np.linalg.norm(m - self.s_local)),
            self.width_factor * float(np.linalg.norm(m - self.s_global)),
        )

    def conditions(self, W: int = 4) -> ConditionSet:
        return ConditionSet.from_rows({0: self.start[:W]})

    def reached_global(self, states: np.ndarray) -> bool:
        return bool(np.linalg.norm(np.asarray(states)[-1, :2] - self.s_global) <= self.threshold)

    def reached_local(self, states: np.ndarray) -> bool:
        return bool(np.linalg.norm(np.asarray(states)[-1, :2] - self.s_local) <= self.threshold)

    def success(self, states: np.ndarray) -> bool:
        return self.reached_global(states)


def pnwp_guide(task: PlacementTask) -> GuideFunction:
    """Peak field ``sum_i c1 exp(-|s_i - s_local|^2 / 2 w_l^2) + c3 exp(-|s_i - s_global|^2 / 2 w_g^2)``."""
    c1, _, c3 = task.c
    wl, wg = task.widths
    sl, sg = task.s_local, task.s_global

    def bumps(p):
        el = c1 * np.exp(-0.5 * np.sum((p - sl) ** 2, axis=-1) / wl**2)
        eg = c3 * np.exp(-0.5 * np.sum((p - sg) ** 2, axis=-1) / wg**2)
        return el, eg

    def value(x):
        el, eg = bumps(x[..., POS])
        return np.sum(el + eg, axis=-1)

    def grad(x):
        p = x[..., POS]
        el, eg = bumps(p)
        return _pos_grad(x, -(p - sl) / wl**2 * el[..., None] - (p - sg) / wg**2 * eg[..., None])

    return GuideFunction("pnwp-peaks", value, grad)


def pnwp_literal_guide(task: PlacementTask) -> GuideFunction:
    """``sum_i -c1 |s_i - s_local| - c2 |s_i - s_mid| + c3 |s_i - s_global|`` as written."""
    c1, c2, c3 = task.c
    terms = ((-c1, task.s_local), (-c2, task.s_mid), (c3, task.s_global))

    def value(x):
        p = x[..., POS]
        return sum(w * np.sum(np.linalg.norm(p - q, axis=-1), axis=-1) for w, q in terms)

    def grad(x):
        p = x[..., POS]
        g = np.zeros(p.shape)
        for w, q in terms:
            d = p - q
            n = np.linalg.norm(d, axis=-1, keepdims=True)
            g += w * np.where(n > 0, d / np.where(n > 0, n, 1.0), 0.0)
        return _pos_grad(x, g)

    return GuideFunction("pnwp-literal", value, grad)


# --------------------------------------------------------------------------- multi-goal exploration


@dataclass(frozen=True)
class MultiGoalTask:
    """Goals with heights/widths; ``priority`` lists goal indices, best first."""

    start: np.ndarray
    goals: np.ndarray  # (G, 2)
    heights: tuple[float, ...] = (4.0, 2.0, 0.5, 0.25)
    widths: tuple[float, ...] = (0.05, 0.15, 0.2, 0.25)
    priority: tuple[int, ...] | None = None
    threshold: float = 0.1
    T_pred: int = 64
    T_max: int = 400
    name: str = "multigoal"
    kind: str = field(default="multigoal", init=False)

    def __post_init__(self):
        goals = np.atleast_2d(np.asarray(self.goals, dtype=float))
        object.__setattr__(self, "goals", goals)
        object.__setattr__(self, "start", np.asarray(self.start, dtype=float))
        G = len(goals)
        if len(self.heights) != G or len(self.widths) != G:
            raise ValueError("need one height and one width per goal")
        if min(self.heights) <= 0 or min(self.widths) <= 0:
            raise ValueError("heights and widths must be positive")
        if self.priority is None:
            object.__setattr__(self, "priority", tuple(int(k) for k in np.argsort(-np.asarray(self.heights), kind="stable")))
        if sorted(self.priority) != list(range(G)):
            raise ValueError("priority must be a permutation of goal indices")

    def conditions(self, W: int = 4) -> ConditionSet:
        return ConditionSet.from_rows({0: self.start[:W]})

    def first_visits(self, states: np.ndarray) -> dict[int, int]:
        """Goal index -> first timestep within ``threshold``."""
        states = np.asarray(states)
        out = {}
        for g, pos in enumerate(self.goals):
            hit = np.flatnonzero(np.linalg.norm(states[:, :2] - pos, axis=1) <= self.threshold)
            if len(hit):
                out[g] = int(hit[0])
        return out


def multigoal_guide(task: MultiGoalTask) -> GuideFunction:
    """``J = sum_g h_g exp(-sum_i |s_i - s_g|^2 / sigma_g^2)``."""
    goals = task.goals
    h = np.asarray(task.heights)
    s2 = np.asarray(task.widths) ** 2

    def terms(p):
        d2 = np.stack([np.sum((p - g) ** 2, axis=(-2, -1)) for g in goals], axis=-1)
        return h * np.exp(-d2 / s2)

    def value(x):
        return np.sum(terms(x[..., POS]), axis=-1)

    def grad(x):
        p = x[..., POS]
        t = terms(p)
        g = np.zeros(p.shape)
        for k, q in enumerate(goals):
            g += -2.0 * (p - q) / s2[k] * t[..., k][..., None, None]
        return _pos_grad(x, g)

    return GuideFunction("multigoal", value, grad)
