"""Point-mass navigation on an occupancy grid.

Coordinates: ``x`` runs along columns, ``y`` along rows; cell ``(r, c)`` covers
``[c, c+1) x [r, r+1)`` (times ``cell`` size). The state is
``(x, y, vx, vy)``; an action is an acceleration.

One step of the double integrator::

    v' = clip_norm(v + a dt, v_max)
    p' = p + v' dt          (per axis, x first then y; a move into a wall
                             cell is cancelled and that velocity zeroed)
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAPS_DIR = Path(__file__).with_name("maps")
FREE_MARKS = {".", "S", "G", "*"}


@dataclass(frozen=True)
class MazeEnv:
    """Immutable map plus dynamics constants."""

    grid: tuple[str, ...]
    cell: float = 1.0
    dt: float = 0.1
    v_max: float = 5.0
    # a_max * dt >= 2 v_max lets the demo controller stop or reverse in one step
    a_max: float = 100.0
    name: str = "maze"
    _free: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dt <= 0 or self.v_max <= 0 or self.a_max <= 0 or self.cell <= 0:
            raise ValueError("dt, v_max, a_max and cell must be positive")
        widths = {len(row) for row in self.grid}
        if len(widths) != 1:
            raise ValueError("ragged maze map")
        bad = {ch for row in self.grid for ch in row} - FREE_MARKS - {"#"}
        if bad:
            raise ValueError(f"unknown map characters {sorted(bad)}")
        free = np.array([[ch in FREE_MARKS for ch in row] for row in self.grid])
        object.__setattr__(self, "_free", free)

    # ------------------------------------------------------------------ map queries

    @classmethod
    def from_text(cls, text: str, **kw) -> "MazeEnv":
        rows = tuple(line.strip() for line in text.strip().splitlines() if line.strip())
        return cls(rows, **kw)

    @classmethod
    def builtin(cls, name: str, **kw) -> "MazeEnv":
        path = MAPS_DIR / f"{name}.txt"
        if not path.exists():
            known = sorted(p.stem for p in MAPS_DIR.glob("*.txt"))
            raise ValueError(f"unknown map {name!r}; built-ins: {known}")
        return cls.from_text(path.read_text(), name=name, **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return self._free.shape

    @property
    def free(self) -> np.ndarray:
        return self._free

    def marked(self, mark: str) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.grid) for c, ch in enumerate(row) if ch == mark]

    def free_cells(self) -> list[tuple[int, int]]:
        return [tuple(rc) for rc in np.argwhere(self._free)]

    def cell_of(self, pos) -> tuple[int, int]:
        return int(math.floor(pos[1] / self.cell)), int(math.floor(pos[0] / self.cell))

    def center(self, rc) -> np.ndarray:
        return (np.array([rc[1], rc[0]], dtype=float) + 0.5) * self.cell

    def is_free(self, pos) -> bool:
        r, c = self.cell_of(pos)
        H, W = self.shape
        return 0 <= r < H and 0 <= c < W and bool(self._free[r, c])

    def position_limits(self) -> tuple[np.ndarray, np.ndarray]:
        H, W = self.shape
        return np.zeros(2), np.array([W, H], dtype=float) * self.cell

    # ------------------------------------------------------------------ dynamics

    def step(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        a = np.asarray(action, dtype=float)
        if not np.all(np.isfinite(a)):
            raise ValueError("action must be finite")
        v = state[2:] + a * self.dt
        speed = float(np.linalg.norm(v))
        if speed > self.v_max:
            v = v * (self.v_max / speed)
        p = state[:2].copy()
        for axis in (0, 1):
            trial = p.copy()
            trial[axis] += v[axis] * self.dt
            if self.is_free(trial):
                p = trial
            else:
                v[axis] = 0.0
        return np.concatenate([p, v])

    def inverse_dynamics(self, s_t: np.ndarray, s_next: np.ndarray) -> tuple[np.ndarray, bool]:
        """Acceleration that best reproduces the move ``s_t -> s_next``.

        The target velocity is the position difference over ``dt``; the returned
        flag is False when clipping (speed or acceleration) or a wall makes the
        transition unreachable.
        """
        s_t = np.asarray(s_t, dtype=float)
        v_target = (np.asarray(s_next, dtype=float)[:2] - s_t[:2]) / self.dt
        a = (v_target - s_t[2:]) / self.dt
        feasible = np.linalg.norm(v_target) <= self.v_max * (1 + 1e-9)
        norm = float(np.linalg.norm(a))
        if norm > self.a_max:
            a = a * (self.a_max / norm)
            feasible = False
        if feasible:
            feasible = bool(np.allclose(self.step(s_t, a)[:2], np.asarray(s_next)[:2], atol=1e-9))
        return a, bool(feasible)

    # ------------------------------------------------------------------ paths and demos

    def shortest_path(self, start_rc, goal_rc) -> list[tuple[int, int]] | None:
        """Breadth-first search over 4-connected free cells."""
        start_rc, goal_rc = tuple(start_rc), tuple(goal_rc)
        if not (self._free[start_rc] and self._free[goal_rc]):
            return None
        prev = {start_rc: None}
        queue = deque([start_rc])
        H, W = self.shape
        while queue:
            cur = queue.popleft()
            if cur == goal_rc:
                break
            r, c = cur
            for nb in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
                if 0 <= nb[0] < H and 0 <= nb[1] < W and self._free[nb] and nb not in prev:
                    prev[nb] = cur
                    queue.append(nb)
        if goal_rc not in prev:
            return None
        path = [goal_rc]
        while prev[path[-1]] is not None:
            path.append(prev[path[-1]])
        return path[::-1]

    def track(self, start: np.ndarray, waypoints: list[np.ndarray], T: int) -> tuple[np.ndarray, np.ndarray, bool]:
        """Roll out the waypoint-tracking controller for ``T - 1`` steps.

        The controller asks for ``v = dir * min(v_max, dist / dt)`` toward the
        current waypoint, which the integrator realises exactly because
        ``a_max * dt >= 2 v_max``. Returns states ``(T, 4)``, actions
        ``(T - 1, 2)`` and whether the last waypoint was reached at rest.
        """
        states = [np.asarray(start, dtype=float)]
        actions = []
        k = 0
        blocked = False
        for _ in range(T - 1):
            s = states[-1]
            while k < len(waypoints) - 1 and np.linalg.norm(waypoints[k] - s[:2]) < 1e-12:
                k += 1
            delta = waypoints[k] - s[:2]
            dist = float(np.linalg.norm(delta))
            v_des = np.zeros(2) if dist < 1e-12 else delta / dist * min(self.v_max, dist / self.dt)
            a = (v_des - s[2:]) / self.dt
            actions.append(a)
            nxt = self.step(s, a)
            blocked |= not np.allclose(nxt[2:], v_des, atol=1e-9)
            states.append(nxt)
        states = np.array(states)
        done = not blocked and bool(np.linalg.norm(states[-1, :2] - waypoints[-1]) < 1e-9 and np.linalg.norm(states[-1, 2:]) < 1e-9)
        return states, np.array(actions).reshape(-1, 2), done


def smooth_waypoints(cells: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Drop interior cells that lie on a straight run."""
    if len(cells) <= 2:
        return list(cells)
    out = [cells[0]]
    for a, b, c in zip(cells, cells[1:], cells[2:]):
        if (b[0] - a[0], b[1] - a[1]) != (c[0] - b[0], c[1] - b[1]):
            out.append(b)
    out.append(cells[-1])
    return out


@dataclass(frozen=True)
class DemoSpec:
    """Where demos start and end.

    ``starts`` / ``goals`` restrict the endpoint cells (default: any free cell);
    with probability ``via_prob`` the route detours through a random free cell,
    which spreads demos over alternative corridors.
    """

    T_pred: int = 64
    starts: tuple[tuple[int, int], ...] | None = None
    goals: tuple[tuple[int, int], ...] | None = None
    via_prob: float = 0.0
    # interior waypoints move uniformly within +-jitter of their cell centre
    waypoint_jitter: float = 0.0
    # the final waypoint moves uniformly within +-endpoint_jitter of the goal cell centre
    endpoint_jitter: float = 0.0
    max_retries: int = 1000


def generate_demos(env: MazeEnv, n: int, rng: np.random.Generator, spec: DemoSpec = DemoSpec()):
    """``n`` feasible demonstrations as ``(states (T, 4), actions (T-1, 2))`` pairs."""
    if n < 1:
        raise ValueError("n must be >= 1")
    free = env.free_cells()
    starts = list(spec.starts) if spec.starts else free
    goals = list(spec.goals) if spec.goals else free
    demos = []
    for _ in range(n):
        for _attempt in range(spec.max_retries):
            s_rc = starts[rng.integers(len(starts))]
            g_rc = goals[rng.integers(len(goals))]
            route = [s_rc]
            if spec.via_prob > 0 and rng.random() < spec.via_prob:
                route.append(free[rng.integers(len(free))])
            route.append(g_rc)
            cells = [s_rc]
            ok = True
            for a, b in zip(route, route[1:]):
                leg = env.shortest_path(a, b)
                if leg is None:
                    ok = False
                    break
                cells += leg[1:]
            if not ok:
                continue
            wps = [env.center(rc) for rc in smooth_waypoints(cells)]
            if spec.waypoint_jitter > 0 and len(wps) > 2:
                for k in range(1, len(wps) - 1):
                    wps[k] = wps[k] + rng.uniform(-spec.waypoint_jitter, spec.waypoint_jitter, 2) * env.cell
            if spec.endpoint_jitter > 0:
                wps[-1] = wps[-1] + rng.uniform(-spec.endpoint_jitter, spec.endpoint_jitter, 2) * env.cell
            start = np.concatenate([env.center(s_rc), np.zeros(2)])
            states, actions, done = env.track(start, wps, spec.T_pred)
            if done:
                demos.append((states, actions))
                break
        else:
            raise RuntimeError(f"no feasible demo within {spec.max_retries} retries")
    return demos


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine map from environment units to ``[-1, 1]``."""

    low: np.ndarray
    high: np.ndarray

    @classmethod
    def for_env(cls, env: MazeEnv) -> "Normalizer":
        lo, hi = env.position_limits()
        v = np.array([env.v_max, env.v_max])
        return cls(np.concatenate([lo, -v]), np.concatenate([hi, v]))

    @property
    def scale(self) -> np.ndarray:
        return (self.high - self.low) / 2.0

    @property
    def offset(self) -> np.ndarray:
        return (self.high + self.low) / 2.0

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.offset) / self.scale

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) * self.scale + self.offset
