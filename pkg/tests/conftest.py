import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import numpy as np
import pytest

from treediff.envs.maze import DemoSpec, MazeEnv, Normalizer, generate_demos
from treediff.envs.tasks import GoldTask, gold_guidance, gold_true
from treediff.planner import PlannerConfig, make_problem
from treediff.scores import fit_empirical


def small_gold(T_pred=32, n_demos=60, n_steps=10, seed=0):
    """Gold task on the open map with a gold cell off the diagonal."""
    env = MazeEnv.builtin("open")
    s_rc, g_rc = env.marked("S")[0], env.marked("G")[0]
    task = GoldTask(
        np.concatenate([env.center(s_rc), np.zeros(2)]), env.center(g_rc), env.center((1, 5)), T_pred=T_pred, T_max=T_pred
    )
    spec = DemoSpec(T_pred, (s_rc,), (g_rc,), via_prob=0.5)
    demos = generate_demos(env, n_demos, np.random.default_rng(seed), spec)
    norm = Normalizer.for_env(env)
    model = fit_empirical([norm.normalize(s) for s, _ in demos])
    cfg = PlannerConfig(n_steps=n_steps, n_fast=2, n_samples=4)
    problem = make_problem(model, task, gold_guidance(task), gold_true(task), norm, cfg)
    return env, task, norm, problem


@pytest.fixture(scope="session")
def gold_problem():
    return small_gold()
