"""Cold versus warm initialisation of gradient guidance on subspace data.

Data live on ``span(A)`` (a :class:`LinearSubspaceModel`). The guide is a sum
of two Gaussian bumps: a narrow one ``J1`` centred on the subspace at ``A v1``
(the global optimum) and a wide one ``J2`` centred at ``w_perp``, orthogonal
to the subspace (a local optimum). Guided chains started from pure noise are
dragged off the subspace toward ``w_perp``; chains started from a lightly
re-noised unconditional sample stay on it and climb ``J1``.

Each point is a ``(1, D)`` trajectory so the generic samplers apply unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import Budget, make_schedule, partial_denoise, sample, spawn_rngs
from .guidance import GuideFunction
from .scores import LinearSubspaceModel


@dataclass(frozen=True)
class Prop1Config:
    D: int = 16
    d: int = 2
    sigma1: float = 0.1  # width of the on-subspace bump
    sigma2: float = 1.0  # width of the off-subspace bump
    w_perp_norm: float = 1.0
    # latent covariance eigenvalues (descending); v1 is the leading eigenvector
    latent_eigs: tuple[float, ...] = (0.02, 0.005)
    # the data cloud is centred at A v1, so unconditional samples sit near the global optimum
    latent_mean_on_v1: bool = True
    residual: float = 1e-4
    alpha: float = 2e4  # guidance strength
    N: int = 10000
    schedule: str = "cosine"
    cosine_s: float = 0.0
    n_fast: int = 20  # re-noising level of the warm start
    trials: int = 200
    seed: int = 0
    # the run refuses configs where E[J1] / E[J2] under N(0, I) exceeds this
    max_expectation_ratio: float = 0.01
    expectation_samples: int = 100_000

    def __post_init__(self):
        if not self.sigma1 < self.sigma2:
            raise ValueError("need sigma1 < sigma2")
        if not 1 <= self.d < self.D:
            raise ValueError("need 1 <= d < D")
        if len(self.latent_eigs) != self.d or min(self.latent_eigs) <= 0:
            raise ValueError("latent_eigs must hold d positive values")
        if list(self.latent_eigs) != sorted(self.latent_eigs, reverse=True):
            raise ValueError("latent_eigs must be in descending order")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not 1 <= self.n_fast <= self.N:
            raise ValueError("n_fast must lie in [1, N]")


@dataclass(frozen=True)
class Prop1Geometry:
    A: np.ndarray
    v1: np.ndarray
    w_perp: np.ndarray
    model: LinearSubspaceModel

    @property
    def target(self) -> np.ndarray:
        """Global optimum ``A v1``."""
        return self.A @ self.v1


def build_geometry(cfg: Prop1Config) -> Prop1Geometry:
    """Random orthonormal ``A`` and unit ``w_perp`` orthogonal to it, from ``cfg.seed``."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(7,)))
    Q, _ = np.linalg.qr(rng.standard_normal((cfg.D, cfg.d + 1)))
    A, w = Q[:, : cfg.d], Q[:, cfg.d]
    v1 = np.zeros(cfg.d)
    v1[0] = 1.0  # latent covariance is diagonal with descending eigenvalues
    model = LinearSubspaceModel(
        A,
        np.diag(cfg.latent_eigs),
        residual=cfg.residual,
        latent_mean=v1.copy() if cfg.latent_mean_on_v1 else None,
    )
    return Prop1Geometry(A=A, v1=v1, w_perp=cfg.w_perp_norm * w, model=model)


def prop1_guide(cfg: Prop1Config, geom: Prop1Geometry | None = None) -> GuideFunction:
    """``J = exp(-|X - A v1|^2 / 2 s1^2) + exp(-|X - w_perp|^2 / 2 s2^2)`` on ``(..., 1, D)``."""
    geom = geom or build_geometry(cfg)
    c1 = geom.target.reshape(1, -1)
    c2 = geom.w_perp.reshape(1, -1)
    s1, s2 = cfg.sigma1**2, cfg.sigma2**2

    def parts(x):
        j1 = np.exp(-0.5 * np.sum((x - c1) ** 2, axis=(-2, -1)) / s1)
        j2 = np.exp(-0.5 * np.sum((x - c2) ** 2, axis=(-2, -1)) / s2)
        return j1, j2

    def value(x):
        j1, j2 = parts(x)
        return j1 + j2

    def grad(x):
        j1, j2 = parts(x)
        return -(x - c1) / s1 * j1[..., None, None] - (x - c2) / s2 * j2[..., None, None]

    return GuideFunction("prop1", value, grad)


def orthogonal_gradient(cfg: Prop1Config, geom: Prop1Geometry, X: np.ndarray) -> np.ndarray:
    """Closed form of ``(I - A A^T) grad J`` for a flat ``X``.

    Both bumps are projected; dropping the projection on the second term is
    only exact when ``A^T X = 0``.
    """
    A = geom.A
    P = np.eye(cfg.D) - A @ A.T
    r1, r2 = X - geom.target, X - geom.w_perp
    j1 = math.exp(-0.5 * r1 @ r1 / cfg.sigma1**2)
    j2 = math.exp(-0.5 * r2 @ r2 / cfg.sigma2**2)
    return -(P @ (r1 * j1 / cfg.sigma1**2 + r2 * j2 / cfg.sigma2**2))


def expectation_ratio(cfg: Prop1Config, geom: Prop1Geometry) -> tuple[float, float]:
    """Monte Carlo ``(E[J1], E[J2])`` under standard normal inputs."""
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(11,)))
    n = rng.standard_normal((cfg.expectation_samples, cfg.D))
    e1 = np.mean(np.exp(-0.5 * np.sum((n - geom.target) ** 2, axis=1) / cfg.sigma1**2))
    e2 = np.mean(np.exp(-0.5 * np.sum((n - geom.w_perp) ** 2, axis=1) / cfg.sigma2**2))
    return float(e1), float(e2)


@dataclass
class Prop1Summary:
    init: str
    mean_perp: float
    mean_dist_target: float
    perp_norms: np.ndarray = field(repr=False)
    dist_target: np.ndarray = field(repr=False)
    reverse_steps: int = 0

    def record(self, cfg: Prop1Config) -> dict:
        return {
            "init": self.init,
            "alpha": cfg.alpha,
            "sigma1": cfg.sigma1,
            "sigma2": cfg.sigma2,
            "N": cfg.N,
            "n_fast": cfg.n_fast,
            "schedule": cfg.schedule,
            "trials": cfg.trials,
            "seed": cfg.seed,
            "mean_perp": self.mean_perp,
            "mean_dist_target": self.mean_dist_target,
            "w_perp_norm": cfg.w_perp_norm,
            "target_norm": 1.0,
        }


def run_prop1(cfg: Prop1Config, init: str, trials: int | None = None, check_expectation: bool = True) -> Prop1Summary:
    """Run guided chains from ``cold`` (pure noise) or ``warm`` (re-noised data) starts."""
    if init not in ("cold", "warm"):
        raise ValueError(f"init must be 'cold' or 'warm', got {init!r}")
    trials = cfg.trials if trials is None else trials
    if trials < 1:
        raise ValueError("trials must be >= 1")
    geom = build_geometry(cfg)
    if check_expectation:
        e1, e2 = expectation_ratio(cfg, geom)
        if not e1 <= cfg.max_expectation_ratio * e2:
            raise ValueError(f"expectation ordering violated: E[J1]={e1:.3g}, E[J2]={e2:.3g}")
    J = prop1_guide(cfg, geom)
    sched = make_schedule(cfg.N, cfg.schedule, cfg.cosine_s)
    guidance = (lambda mu, i: cfg.alpha * J.gradient(mu)) if cfg.alpha else None
    budget = Budget()
    key = 1 if init == "cold" else 2
    rngs = spawn_rngs(cfg.seed, trials, key=key)
    if init == "cold":
        X = sample(geom.model, (1, cfg.D), sched, rngs, guidance=guidance, budget=budget)
    else:
        data_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))
        start = geom.model.sample(trials, data_rng).reshape(trials, 1, cfg.D)
        X = partial_denoise(geom.model, start, cfg.n_fast, sched, rngs, guidance=guidance, budget=budget)
    X = X.reshape(trials, cfg.D)
    perp = X - (X @ geom.A) @ geom.A.T
    perp_norms = np.linalg.norm(perp, axis=1)
    dist = np.linalg.norm(X - geom.target, axis=1)
    return Prop1Summary(init, float(perp_norms.mean()), float(dist.mean()), perp_norms, dist, budget.reverse_steps)


def sweep_sigma2(cfg: Prop1Config, sigma2_values, trials: int | None = None) -> list[Prop1Summary]:
    return [run_prop1(replace(cfg, sigma2=s), "cold", trials) for s in sigma2_values]
