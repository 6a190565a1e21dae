"""Mono-level reference planners: guided Diffuser, best-of-N, and best-of-N with per-step resampling.

All three run guided chains in which every element shifts its posterior mean
by ``alpha_g * grad J(mu)`` on every channel. Element ``k`` draws its noise
from ``rngs[k]`` only, so ``mcss`` with one sample reproduces ``diffuser_gg``.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .diffusion import Budget, ConditionSet, NoiseSchedule, _clamp, _cond_arrays, _normal, denoise, posterior_mean, sample
from .guidance import GuideFunction


def gradient_guidance(J: GuideFunction, alpha_g: float):
    """Per-step provider ``u = alpha_g * grad J(mu)``; ``None`` when ``alpha_g == 0``."""
    if alpha_g == 0:
        return None
    return lambda mu, i: alpha_g * J.gradient(mu)


def diffuser_gg(
    model,
    J: GuideFunction,
    C: ConditionSet | None,
    alpha_g: float,
    schedule: NoiseSchedule,
    shape: tuple[int, int],
    rngs: Sequence[np.random.Generator],
    budget: Budget | None = None,
) -> np.ndarray:
    """One guided chain per generator in ``rngs``; returns ``(len(rngs), T, W)``."""
    return sample(model, shape, schedule, list(rngs), C, gradient_guidance(J, alpha_g), budget)


def select_best(trajs: np.ndarray, J_select: GuideFunction) -> tuple[int, np.ndarray]:
    """Index of the highest score (lowest index on ties) and all scores."""
    scores = np.asarray(J_select.value(trajs), dtype=float)
    return int(np.argmax(scores)), scores


def mcss(
    model,
    J: GuideFunction,
    J_select: GuideFunction,
    C: ConditionSet | None,
    alpha_g: float,
    schedule: NoiseSchedule,
    shape: tuple[int, int],
    rngs: Sequence[np.random.Generator],
    budget: Budget | None = None,
):
    """``len(rngs)`` guided samples, then the best one under ``J_select``.

    Returns ``(best trajectory, index, all samples, all scores)``.
    """
    if len(rngs) < 1:
        raise ValueError("MCSS needs at least one sample")
    trajs = diffuser_gg(model, J, C, alpha_g, schedule, shape, rngs, budget)
    k, scores = select_best(trajs, J_select)
    return trajs[k], k, trajs, scores


def mcss_ss(
    model,
    J: GuideFunction,
    J_select: GuideFunction,
    C: ConditionSet | None,
    alpha_g: float,
    schedule: NoiseSchedule,
    shape: tuple[int, int],
    rngs: Sequence[np.random.Generator],
    choice_rngs: Sequence[np.random.Generator],
    M: int = 4,
    temperature: float = 1.0,
    budget: Budget | None = None,
):
    """Best-of-N where each reverse step keeps one of ``M`` stochastic proposals.

    Proposals are scored by ``J`` on their Tweedie clean estimates and one is
    drawn with probability ``softmax(J / temperature)``. With ``M = 1`` no
    choice is drawn and the chain is exactly the guided chain of ``mcss``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    B = len(rngs)
    if B < 1:
        raise ValueError("MCSS+SS needs at least one sample")
    shape = tuple(shape)
    arrs = _cond_arrays(C, B, shape)
    x = _clamp(_normal(rngs, shape), arrs, schedule.alpha_bar[schedule.N])
    for i in range(schedule.N, 0, -1):
        mu = posterior_mean(model, x, i, schedule)
        var = schedule.sigma(i)
        mean = mu if alpha_g == 0 else mu + var * (alpha_g * J.gradient(mu))
        if i > 1:
            eps = np.stack([_normal(rngs, shape) for _ in range(M)], axis=1)  # (B, M, T, W)
            cands = mean[:, None] + math.sqrt(var) * eps
        else:
            cands = np.repeat(mean[:, None], M, axis=1)
        cands = _clamp(cands, None if arrs is None else (arrs[0][:, None], arrs[1][:, None]), schedule.alpha_bar[i - 1])
        if M == 1:
            x = cands[:, 0]
        else:
            flat = cands.reshape(B * M, *shape)
            x0 = denoise(model, flat, i - 1, schedule) if i > 1 else flat
            logits = np.asarray(J.value(x0), dtype=float).reshape(B, M) / temperature
            w = np.exp(logits - logits.max(axis=1, keepdims=True))
            w /= w.sum(axis=1, keepdims=True)
            pick = [int(g.choice(M, p=p)) for g, p in zip(choice_rngs, w)]
            x = cands[np.arange(B), pick]
            if budget is not None:
                budget.score_evals += B * M
        if budget is not None:
            budget.reverse_steps += B
            budget.candidate_draws += B * M
            budget.score_evals += B
    k, scores = select_best(x, J_select)
    return x[k], k, x, scores
