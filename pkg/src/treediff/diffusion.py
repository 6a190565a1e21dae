"""Discrete variance-preserving diffusion: schedules, noising, guided reverse chains.

Conventions used across the package:

* A trajectory is a ``(T, W)`` float array (horizon x channels); a batch is
  ``(B, T, W)``. Score models see the row-major flattening ``(B, T*W)``.
* Step ``i = 0`` is clean data, ``i = N`` is (almost) pure noise.
  ``alpha_bar[0] == 1`` exactly.
* The sampler variance is ``Sigma^i = beta_i`` (strictly positive for every
  ``i >= 1``). The last step ``i = 1`` emits the mean with no noise.
* A guidance provider is ``guidance(mu, i) -> u`` evaluated on the batch of
  posterior means; the reverse step adds ``Sigma^i * u`` to the mean, so ``u``
  already carries the guidance scale (``alpha * grad``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

Guidance = Callable[[np.ndarray, int], "np.ndarray | None"]


class NonFiniteError(FloatingPointError):
    """Raised when a reverse step produces non-finite values."""

    def __init__(self, step: int, batch_index: int | None = None):
        self.step = step
        self.batch_index = batch_index
        where = f"step {step}" if batch_index is None else f"step {step}, batch element {batch_index}"
        super().__init__(f"non-finite score or mean at {where}")


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise rates and cumulative signal levels for an ``N``-step chain.

    Arrays are indexed by step: ``betas[0]`` is unused (set to 0) so that
    ``betas[i]`` is the rate of step ``i``.
    """

    kind: str
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def N(self) -> int:
        return len(self.betas) - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def sigma(self, i: int) -> float:
        """Sampler variance of reverse step ``i``."""
        return float(self.betas[i])

    def noise_var(self, i: int) -> float:
        return float(1.0 - self.alpha_bar[i])


def _linear_betas(N: int) -> np.ndarray:
    # DDPM endpoints, rescaled so that short chains still reach near-pure noise
    scale = 1000.0 / N
    return np.clip(np.linspace(1e-4 * scale, 0.02 * scale, N), 1e-12, 0.999)


def cosine_alpha_bar(t: np.ndarray, N: int, s: float = 0.008) -> np.ndarray:
    """Closed form ``f(t)/f(0)`` with ``f(t) = cos^2(((t/N + s)/(1 + s)) * pi/2)``."""
    f = lambda u: np.cos((u / N + s) / (1.0 + s) * math.pi / 2) ** 2  # noqa: E731
    return f(np.asarray(t, dtype=float)) / f(0.0)


def _cosine_betas(N: int, s: float) -> np.ndarray:
    ab = cosine_alpha_bar(np.arange(N + 1), N, s)
    betas = 1.0 - ab[1:] / ab[:-1]
    return np.clip(betas, 1e-12, 0.999)


def make_schedule(N: int, kind: str = "linear", cosine_s: float = 0.008) -> NoiseSchedule:
    """Build a variance-preserving schedule with ``N`` steps.

    ``linear`` uses the DDPM beta range rescaled by ``1000/N``; ``cosine``
    uses the improved-DDPM cosine law (offset ``cosine_s``). In both cases the
    stored ``alpha_bar`` is the running product of ``1 - beta``.
    """
    if not isinstance(N, (int, np.integer)) or N < 1:
        raise ValueError(f"N must be a positive integer, got {N!r}")
    if kind == "linear":
        betas = _linear_betas(int(N))
    elif kind == "cosine":
        betas = _cosine_betas(int(N), cosine_s)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}; expected 'linear' or 'cosine'")
    betas = np.concatenate([[0.0], betas])
    alpha_bar = np.cumprod(1.0 - betas)
    alpha_bar[0] = 1.0
    return NoiseSchedule(kind=kind, betas=betas, alpha_bar=alpha_bar)


# --------------------------------------------------------------------------- rng streams


def spawn_rngs(seed: int | np.random.SeedSequence, n: int, key: int = 0) -> list[np.random.Generator]:
    """``n`` independent generators derived from ``seed`` under sub-stream ``key``.

    Stream ``k`` depends only on ``(seed, key, k)``, so a batch of 1 and a
    batch of 8 share their first stream.
    """
    if isinstance(seed, np.random.SeedSequence):
        entropy, base = seed.entropy, tuple(seed.spawn_key)
    else:
        entropy, base = int(seed), ()
    return [
        np.random.default_rng(np.random.SeedSequence(entropy, spawn_key=base + (key, k)))
        for k in range(n)
    ]


def _normal(rngs: Sequence[np.random.Generator], shape: tuple[int, ...]) -> np.ndarray:
    return np.stack([g.standard_normal(shape) for g in rngs])


# --------------------------------------------------------------------------- conditioning


@dataclass(frozen=True)
class ConditionSet:
    """Clamped ``(time, channel) -> value`` entries."""

    entries: tuple[tuple[int, int, float], ...] = ()

    def __post_init__(self):
        seen = set()
        for t, w, _ in self.entries:
            if (t, w) in seen:
                raise ValueError(f"duplicate condition at (t={t}, w={w})")
            seen.add((t, w))

    @classmethod
    def from_rows(cls, rows: dict[int, Iterable[float]], channels: Sequence[int] | None = None):
        """Clamp whole rows (or the listed ``channels`` of each row)."""
        entries = []
        for t, values in rows.items():
            values = list(np.asarray(values, dtype=float).ravel())
            chans = range(len(values)) if channels is None else channels
            for w, v in zip(chans, values):
                entries.append((int(t), int(w), float(v)))
        return cls(tuple(entries))

    @classmethod
    def prefix(cls, traj: np.ndarray, b: int) -> "ConditionSet":
        """Rows ``0..b`` (inclusive) of ``traj``."""
        return cls.from_rows({t: traj[t] for t in range(b + 1)})

    def merged(self, other: "ConditionSet") -> "ConditionSet":
        """Union where ``other`` wins on collisions."""
        keep = {(t, w): v for t, w, v in self.entries}
        keep.update({(t, w): v for t, w, v in other.entries})
        return ConditionSet(tuple((t, w, v) for (t, w), v in keep.items()))

    def __len__(self) -> int:
        return len(self.entries)

    def to_arrays(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        T, W = shape
        mask = np.zeros(shape, dtype=bool)
        values = np.zeros(shape)
        for t, w, v in self.entries:
            if not (0 <= t < T and 0 <= w < W):
                raise IndexError(f"condition index (t={t}, w={w}) outside trajectory {shape}")
            mask[t, w] = True
            values[t, w] = v
        return mask, values


def _cond_arrays(C, batch: int, shape: tuple[int, int]):
    """Normalise ``None`` / one ConditionSet / a per-element list to batched arrays."""
    if C is None:
        return None
    if isinstance(C, ConditionSet):
        if len(C) == 0:
            return None
        m, v = C.to_arrays(shape)
        return np.broadcast_to(m, (batch, *shape)), np.broadcast_to(v, (batch, *shape))
    if len(C) != batch:
        raise ValueError(f"got {len(C)} condition sets for batch of {batch}")
    arrs = [c.to_arrays(shape) for c in C]
    return np.stack([a[0] for a in arrs]), np.stack([a[1] for a in arrs])


def _clamp(x: np.ndarray, arrs, ab: float) -> np.ndarray:
    if arrs is None:
        return x
    mask, values = arrs
    return np.where(mask, math.sqrt(ab) * values, x)


def apply_condition(traj: np.ndarray, C, schedule: NoiseSchedule, i: int) -> np.ndarray:
    """Clamp the entries of ``C`` to their level-``i`` means ``sqrt(alpha_bar_i) * value``.

    Works on a single ``(T, W)`` trajectory or a ``(B, T, W)`` batch; ``C`` may
    be a list with one ConditionSet per batch element. At ``i = 0`` the clamped
    entries hold the exact values.
    """
    single = traj.ndim == 2
    x = traj[None] if single else traj
    out = _clamp(x, _cond_arrays(C, x.shape[0], x.shape[1:]), schedule.alpha_bar[i])
    out = np.array(out, copy=True)
    return out[0] if single else out


# --------------------------------------------------------------------------- forward / reverse


def forward_noise(traj: np.ndarray, i: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """Draw from ``q(x_i | x_0) = N(sqrt(ab_i) x_0, (1 - ab_i) I)``.

    ``rng`` is one generator, or a list of generators (one per batch element).
    """
    if not 0 <= i <= schedule.N:
        raise ValueError(f"step {i} outside [0, {schedule.N}]")
    if i == 0:
        return np.array(traj, dtype=float, copy=True)
    ab = schedule.alpha_bar[i]
    if isinstance(rng, np.random.Generator):
        eps = rng.standard_normal(np.shape(traj))
    else:
        eps = _normal(rng, np.shape(traj)[1:])
    return math.sqrt(ab) * traj + math.sqrt(1.0 - ab) * eps


def posterior_mean(model, x: np.ndarray, i: int, schedule: NoiseSchedule) -> np.ndarray:
    """DDPM mean of ``x_{i-1} | x_i`` from the model's exact score.

    Tweedie gives ``x0_hat = (x_i + (1 - ab_i) * score) / sqrt(ab_i)``; the
    Gaussian posterior ``q(x_{i-1} | x_i, x0_hat)`` then fixes the mean.
    Accepts ``(T, W)`` or ``(B, T, W)``.
    """
    if i < 1:
        raise ValueError("posterior mean needs i >= 1")
    x0 = denoise(model, x, i, schedule)
    ab, ab_prev, beta = schedule.alpha_bar[i], schedule.alpha_bar[i - 1], schedule.betas[i]
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ct = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x


def denoise(model, x: np.ndarray, i: int, schedule: NoiseSchedule) -> np.ndarray:
    """Tweedie estimate of the clean trajectory from a level-``i`` sample."""
    if i == 0:
        return np.array(x, copy=True)
    flat = x.reshape(-1, x.shape[-2] * x.shape[-1]) if x.ndim == 3 else x.reshape(1, -1)
    ab = schedule.alpha_bar[i]
    s = model.score(flat, ab)
    if not np.all(np.isfinite(s)):
        bad = np.flatnonzero(~np.all(np.isfinite(s), axis=1))
        raise NonFiniteError(i, int(bad[0]) if x.ndim == 3 else None)
    x0 = (flat + (1.0 - ab) * s) / math.sqrt(ab)
    return x0.reshape(x.shape)


@dataclass
class Budget:
    """Instrumentation counters (per trajectory element)."""

    reverse_steps: int = 0
    candidate_draws: int = 0
    score_evals: int = 0

    def add(self, other: "Budget") -> None:
        self.reverse_steps += other.reverse_steps
        self.candidate_draws += other.candidate_draws
        self.score_evals += other.score_evals


def reverse_step(
    model,
    x: np.ndarray,
    i: int,
    schedule: NoiseSchedule,
    rng,
    shift=None,
    sigma_override: float | None = None,
) -> np.ndarray:
    """One reverse draw ``x_{i-1} ~ N(mu + Sigma^i u, Sigma^i)``.

    ``shift`` is an array ``u`` or a callable ``u = shift(mu, i)``; ``None`` means
    unguided. At ``i == 1`` the shifted mean is returned without noise.
    ``sigma_override`` replaces ``Sigma^i`` (used to inspect degenerate cases).
    """
    if i < 1:
        raise ValueError("reverse step needs i >= 1")
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(i)
    batched = x.ndim == 3
    xb = x if batched else x[None]
    mu = posterior_mean(model, xb, i, schedule)
    var = schedule.sigma(i) if sigma_override is None else sigma_override
    u = shift(mu, i) if callable(shift) else shift
    mean = mu if u is None else mu + var * (u if batched or u.ndim == 3 else u[None])
    if i > 1 and var > 0:
        if isinstance(rng, np.random.Generator):
            eps = rng.standard_normal(xb.shape)
        else:
            eps = _normal(rng, xb.shape[1:])
        out = mean + math.sqrt(var) * eps
    else:
        out = mean
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.all(np.isfinite(out.reshape(len(out), -1)), axis=1))
        raise NonFiniteError(i, int(bad[0]))
    return out if batched else out[0]


def run_chain(
    model,
    x: np.ndarray,
    steps: Sequence[int],
    schedule: NoiseSchedule,
    rngs: Sequence[np.random.Generator],
    C=None,
    guidance: Guidance | None = None,
    budget: Budget | None = None,
) -> np.ndarray:
    """Run reverse steps ``steps`` (descending) on a batch, conditioning after each."""
    arrs = _cond_arrays(C, x.shape[0], x.shape[1:])
    for i in steps:
        x = reverse_step(model, x, i, schedule, rngs, shift=guidance)
        x = _clamp(x, arrs, schedule.alpha_bar[i - 1])
        if budget is not None:
            budget.reverse_steps += x.shape[0]
            budget.score_evals += x.shape[0]
    return x


def sample(
    model,
    shape: tuple[int, int],
    schedule: NoiseSchedule,
    rngs: Sequence[np.random.Generator] | int,
    C=None,
    guidance: Guidance | None = None,
    budget: Budget | None = None,
) -> np.ndarray:
    """Full ``N``-step reverse chain for a batch, one rng stream per element.

    ``rngs`` is either a list of generators (batch size = its length) or an
    integer seed, in which case a single-element batch is drawn.
    """
    if isinstance(rngs, (int, np.integer)):
        rngs = spawn_rngs(int(rngs), 1)
    if len(rngs) < 1:
        raise ValueError("batch must be >= 1")
    x = _normal(rngs, tuple(shape))
    x = apply_condition(x, C, schedule, schedule.N)
    return run_chain(model, x, range(schedule.N, 0, -1), schedule, rngs, C, guidance, budget)


def partial_denoise(
    model,
    start: np.ndarray,
    n_fast: int,
    schedule: NoiseSchedule,
    rngs: Sequence[np.random.Generator],
    C=None,
    guidance: Guidance | None = None,
    budget: Budget | None = None,
) -> np.ndarray:
    """Re-noise ``start`` to level ``n_fast`` and denoise it back in ``n_fast`` steps.

    ``start`` is ``(T, W)`` or ``(B, T, W)`` (one rng per element).
    """
    if not isinstance(n_fast, (int, np.integer)) or not 1 <= n_fast <= schedule.N:
        raise ValueError(f"n_fast must be in [1, {schedule.N}], got {n_fast!r}")
    single = start.ndim == 2
    xb = start[None] if single else start
    x = forward_noise(xb, int(n_fast), schedule, list(rngs))
    x = apply_condition(x, C, schedule, int(n_fast))
    out = run_chain(model, x, range(int(n_fast), 0, -1), schedule, rngs, C, guidance, budget)
    return out[0] if single else out

