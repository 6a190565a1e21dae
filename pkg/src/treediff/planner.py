"""Bi-level tree planner: diverse parents, fast-refined children, best-leaf selection.

Random streams of one ``plan`` call, all derived from ``cfg.seed``:

* key 0 -- one stream per parent / mono-level sample;
* key 1 -- one stream per child;
* key 2 -- branch-site draws;
* key 3 -- per-sample proposal choices of MCSS+SS;
* key 9 -- probe samples for the state decomposition.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import baselines
from .diffusion import Budget, ConditionSet, NoiseSchedule, make_schedule, partial_denoise, sample, spawn_rngs
from .guidance import GuideFunction, StateMask, decompose_states, gradient_guidance_shift, integrated_shift, particle_shift

VARIANTS = ("TDP", "TDP-no-child", "TDP-no-PG", "Diffuser-GG", "MCSS", "MCSS-SS")
PB_MODES = ("unconditional-PG", "conditional-PG")


@dataclass(frozen=True)
class PlannerConfig:
    variant: str = "TDP"
    n_samples: int = 32  # parents, or mono-level samples
    n_children: int | None = None  # defaults to n_samples
    n_steps: int = 32  # diffusion steps of the full chain
    n_fast: int = 3  # steps of the child chain
    schedule: str = "linear"
    alpha_p: float = 0.1
    alpha_g: float = 1.0
    pb_mode: str = "conditional-PG"
    bandwidth: float | str = "auto"
    # apply the child-loop gradient on observation channels only
    child_split: bool = False
    ss_candidates: int = 4
    ss_temperature: float = 1.0
    loop: str = "open"
    T_max: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.pb_mode not in PB_MODES:
            raise ValueError(f"unknown parent-branching mode {self.pb_mode!r}")
        if self.loop not in ("open", "closed"):
            raise ValueError(f"loop must be 'open' or 'closed', got {self.loop!r}")
        if self.n_samples < 1 or self.n_steps < 1 or self.T_max < 1 or self.ss_candidates < 1:
            raise ValueError("sample counts, step counts and T_max must be >= 1")
        if self.n_children is not None and self.n_children < 1:
            raise ValueError("n_children must be >= 1")
        if not 1 <= self.n_fast <= self.n_steps:
            raise ValueError(f"n_fast must lie in [1, n_steps={self.n_steps}]")
        if self.alpha_p < 0 or self.alpha_g < 0:
            raise ValueError("guidance strengths must be nonnegative")

    @property
    def B(self) -> int:
        return self.n_samples if self.n_children is None else self.n_children

    @property
    def leaf_count(self) -> int:
        return self.n_samples + (self.B if self.variant in ("TDP", "TDP-no-PG") else 0)


@dataclass(frozen=True)
class PlanProblem:
    """Everything a planner needs, in the model's (normalised) coordinates."""

    model: object
    schedule: NoiseSchedule
    shape: tuple[int, int]
    guide: GuideFunction
    true_guide: GuideFunction
    conditions: ConditionSet
    mask: StateMask

    def with_conditions(self, C: ConditionSet) -> "PlanProblem":
        return replace(self, conditions=C)


def probe_mask(model, guide: GuideFunction, schedule: NoiseSchedule, shape, C=None, seed: int = 0, n_probes: int = 8):
    """State decomposition from unguided samples plus the all-zeros trajectory."""
    probes = sample(model, shape, schedule, spawn_rngs(seed, n_probes, key=9), C)
    return decompose_states(guide, list(probes) + [np.zeros(shape)])


@dataclass
class TrajectoryTree:
    root: np.ndarray
    parents: np.ndarray
    parent_scores: np.ndarray
    children: np.ndarray = field(default_factory=lambda: np.zeros((0,)))
    child_parent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    child_sites: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    child_scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    selected: int = 0

    @property
    def leaves(self) -> np.ndarray:
        if len(self.child_scores) == 0:
            return self.parents
        return np.concatenate([self.parents, self.children])

    @property
    def scores(self) -> np.ndarray:
        return np.concatenate([self.parent_scores, self.child_scores])

    @property
    def best(self) -> np.ndarray:
        return self.leaves[self.selected]

    def records(self, guide_scores: np.ndarray | None = None) -> list[dict]:
        """One flat record per leaf."""
        out = []
        for k, s in enumerate(self.scores):
            is_child = k >= len(self.parent_scores)
            j = k - len(self.parent_scores)
            out.append(
                {
                    "leaf": k,
                    "kind": "child" if is_child else "parent",
                    "parent": int(self.child_parent[j]) if is_child else None,
                    "branch_site": int(self.child_sites[j]) if is_child else None,
                    "guide_score": None if guide_scores is None else float(guide_scores[k]),
                    "true_score": float(s),
                    "selected": k == self.selected,
                }
            )
        return out


# --------------------------------------------------------------------------- phases


def parent_branching(
    problem: PlanProblem,
    cfg: PlannerConfig,
    rngs: Sequence[np.random.Generator],
    alpha_p: float | None = None,
    mode: str | None = None,
    budget: Budget | None = None,
) -> np.ndarray:
    """Batch chain with particle guidance on control channels.

    In conditional mode the gradient shift on observation channels is added.
    """
    alpha_p = cfg.alpha_p if alpha_p is None else alpha_p
    mode = cfg.pb_mode if mode is None else mode
    J, mask = problem.guide, problem.mask

    if mode == "conditional-PG":

        def shift(mu, i):
            return integrated_shift(mu, mask, alpha_p, cfg.alpha_g, J, cfg.bandwidth)

    else:

        def shift(mu, i):
            return particle_shift(mu, mask, alpha_p, cfg.bandwidth)

    return sample(problem.model, problem.shape, problem.schedule, list(rngs), problem.conditions, shift, budget)


def subtree_expansion(
    problem: PlanProblem,
    cfg: PlannerConfig,
    parents: np.ndarray,
    rngs: Sequence[np.random.Generator],
    site_rng: np.random.Generator,
    sites: Sequence[int] | None = None,
    budget: Budget | None = None,
):
    """Children re-denoised from ``n_fast`` under a random parent prefix.

    Child ``j`` grows from parent ``j mod len(parents)``. Returns
    ``(children, parent index, branch site)``.
    """
    if len(parents) < 1:
        raise ValueError("sub-tree expansion needs at least one parent")
    B = len(rngs)
    T = problem.shape[0]
    parent_idx = np.arange(B) % len(parents)
    if sites is None:
        sites = site_rng.integers(0, T, size=B)
    sites = np.asarray(sites, dtype=int)
    conds = [ConditionSet.prefix(parents[p], int(b)).merged(problem.conditions) for p, b in zip(parent_idx, sites)]
    J = problem.guide
    mask = problem.mask if cfg.child_split else None
    guidance = None if cfg.alpha_g == 0 else (lambda mu, i: gradient_guidance_shift(mu, mask, cfg.alpha_g, J))
    children = partial_denoise(
        problem.model, parents[parent_idx], cfg.n_fast, problem.schedule, list(rngs), conds, guidance, budget
    )
    return children, parent_idx, sites


def leaf_evaluation(tree: TrajectoryTree, true_J: GuideFunction) -> int:
    """Score every leaf with ``true_J`` and mark the argmax (lowest index on ties)."""
    parent_scores = np.atleast_1d(np.asarray(true_J.value(tree.parents), dtype=float))
    tree.parent_scores = parent_scores
    if len(tree.child_parent):
        tree.child_scores = np.atleast_1d(np.asarray(true_J.value(tree.children), dtype=float))
    tree.selected = int(np.argmax(tree.scores))
    return tree.selected


# --------------------------------------------------------------------------- entry point


@dataclass
class PlanResult:
    trajectory: np.ndarray
    tree: TrajectoryTree
    budget: Budget
    wall_ms: float


def plan(problem: PlanProblem, cfg: PlannerConfig, seed=None) -> PlanResult:
    """Run one planner variant; ``seed`` (int or SeedSequence) defaults to ``cfg.seed``."""
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    budget = Budget()
    N = cfg.n_samples
    root = _root(problem)
    rngs = spawn_rngs(seed, N, key=0)
    v = cfg.variant
    if v in ("TDP", "TDP-no-child", "TDP-no-PG"):
        alpha_p = 0.0 if v == "TDP-no-PG" else cfg.alpha_p
        mode = "conditional-PG" if v == "TDP-no-child" else cfg.pb_mode
        parents = parent_branching(problem, cfg, rngs, alpha_p, mode, budget)
        tree = TrajectoryTree(root, parents, np.zeros(N))
        if v != "TDP-no-child":
            site_rng = spawn_rngs(seed, 1, key=2)[0]
            kids, pidx, sites = subtree_expansion(problem, cfg, parents, spawn_rngs(seed, cfg.B, key=1), site_rng, budget=budget)
            tree.children, tree.child_parent, tree.child_sites = kids, pidx, sites
            tree.child_scores = np.zeros(len(kids))
        leaf_evaluation(tree, problem.true_guide)
    elif v == "Diffuser-GG":
        trajs = baselines.diffuser_gg(
            problem.model, problem.guide, problem.conditions, cfg.alpha_g, problem.schedule, problem.shape, rngs[:1], budget
        )
        tree = TrajectoryTree(root, trajs, np.zeros(1))
        leaf_evaluation(tree, problem.true_guide)
    elif v == "MCSS":
        _, _, trajs, _ = baselines.mcss(
            problem.model, problem.guide, problem.true_guide, problem.conditions, cfg.alpha_g,
            problem.schedule, problem.shape, rngs, budget,
        )
        tree = TrajectoryTree(root, trajs, np.zeros(N))
        leaf_evaluation(tree, problem.true_guide)
    else:
        _, _, trajs, _ = baselines.mcss_ss(
            problem.model, problem.guide, problem.true_guide, problem.conditions, cfg.alpha_g,
            problem.schedule, problem.shape, rngs, spawn_rngs(seed, N, key=3),
            cfg.ss_candidates, cfg.ss_temperature, budget,
        )
        tree = TrajectoryTree(root, trajs, np.zeros(N))
        leaf_evaluation(tree, problem.true_guide)
    wall = (time.perf_counter() - t0) * 1e3
    return PlanResult(tree.best, tree, budget, wall)


def _root(problem: PlanProblem) -> np.ndarray:
    W = problem.shape[1]
    root = np.full(W, np.nan)
    for t, w, val in problem.conditions.entries:
        if t == 0:
            root[w] = val
    return root


def make_problem(model, task, guide: GuideFunction, true_guide: GuideFunction, normalizer, cfg: PlannerConfig, W: int = 4):
    """Pull task guides back to normalised coordinates and decompose states."""
    schedule = make_schedule(cfg.n_steps, cfg.schedule)
    scale, offset = normalizer.scale, normalizer.offset
    g = guide.affine_pullback(scale, offset)
    tg = true_guide.affine_pullback(scale, offset)
    C = normalize_conditions(task.conditions(W), normalizer)
    shape = (task.T_pred, W)
    mask = probe_mask(model, g, schedule, shape, C, seed=cfg.seed)
    return PlanProblem(model, schedule, shape, g, tg, C, mask)


def normalize_conditions(C: ConditionSet, normalizer) -> ConditionSet:
    return ConditionSet(
        tuple((t, w, float((v - normalizer.offset[w]) / normalizer.scale[w])) for t, w, v in C.entries)
    )


# --------------------------------------------------------------------------- execution


@dataclass
class Rollout:
    states: np.ndarray
    actions: np.ndarray
    plans: int
    infeasible_steps: int
    wall_ms: float
    reverse_steps: int
    complete: bool = True


def execute(env, problem: PlanProblem, cfg: PlannerConfig, normalizer, start: np.ndarray, done=None) -> Rollout:
    """Roll a plan out through the environment.

    Actions come from inverse dynamics between the current state and the next
    planned state. ``open`` plans once and follows the plan for
    ``min(T_pred, T_max)`` states; ``closed`` replans from the current state
    before every step (plan ``t`` uses seed stream ``(cfg.seed, t)``) until
    ``done(states)`` or ``T_max`` steps.
    """
    states = [np.asarray(start, dtype=float)]
    actions, infeasible, wall, steps, plans = [], 0, 0.0, 0, 0

    def follow(target):
        nonlocal infeasible
        a, ok = env.inverse_dynamics(states[-1], target)
        infeasible += not ok
        actions.append(a)
        states.append(env.step(states[-1], a))

    try:
        if cfg.loop == "open":
            res = plan(problem, cfg)
            plans, wall, steps = 1, res.wall_ms, res.budget.reverse_steps
            P = normalizer.denormalize(res.trajectory)
            for t in range(min(problem.shape[0], cfg.T_max) - 1):
                follow(P[t + 1])
        else:
            for t in range(cfg.T_max):
                row0 = normalizer.normalize(states[-1])
                keep = tuple(e for e in problem.conditions.entries if e[0] != 0)
                C = ConditionSet(keep + tuple((0, w, float(v)) for w, v in enumerate(row0[: problem.shape[1]])))
                res = plan(problem.with_conditions(C), cfg, seed=np.random.SeedSequence(cfg.seed, spawn_key=(t,)))
                plans += 1
                wall += res.wall_ms
                steps += res.budget.reverse_steps
                follow(normalizer.denormalize(res.trajectory[1]))
                if done is not None and done(np.array(states)):
                    break
    except (FloatingPointError, ValueError):
        return Rollout(np.array(states), np.array(actions).reshape(-1, 2), plans, infeasible, wall, steps, complete=False)
    return Rollout(np.array(states), np.array(actions).reshape(-1, 2), plans, infeasible, wall, steps)
