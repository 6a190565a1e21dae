"""Exact score models standing in for a pretrained diffusion planner.

Every model describes a data distribution ``p_0`` and answers, for any signal
level ``ab = alpha_bar_i``, the score and log-density of the noised marginal
``p_i``. Inputs are row-major flattened trajectories of shape ``(B, D)``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

LOG_2PI = math.log(2.0 * math.pi)


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None], True
    return x, False


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError("score model input contains non-finite values")


@dataclass(frozen=True)
class LinearSubspaceModel:
    """Gaussian data on ``span(A)`` plus a small isotropic jitter.

    ``x_0 = A z``, ``z ~ N(latent_mean, latent_cov)``. At signal level ``ab``
    the marginal is ``N(sqrt(ab) A m, ab A S A^T + (1 - ab + residual) I)``,
    so the residual acts like a floor that keeps the off-subspace density
    non-degenerate at ``ab = 1``.
    """

    A: np.ndarray
    latent_cov: np.ndarray
    residual: float = 1e-4
    latent_mean: np.ndarray | None = None

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        D, d = A.shape
        if d > D:
            raise ValueError("latent dimension exceeds ambient dimension")
        if not np.allclose(A.T @ A, np.eye(d), atol=1e-10):
            raise ValueError("A must have orthonormal columns")
        S = np.asarray(self.latent_cov, dtype=float)
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() <= 0:
            raise ValueError("latent covariance must be symmetric positive-definite")
        if self.residual <= 0:
            raise ValueError("residual variance must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "latent_cov", S)
        m = np.zeros(d) if self.latent_mean is None else np.asarray(self.latent_mean, dtype=float)
        object.__setattr__(self, "latent_mean", m)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def _parts(self, ab: float):
        v = 1.0 - ab + self.residual
        inner = v * np.eye(self.A.shape[1]) + ab * self.latent_cov
        return v, inner

    def mean(self, ab: float = 1.0) -> np.ndarray:
        return math.sqrt(ab) * (self.A @ self.latent_mean)

    def cov(self, ab: float = 1.0) -> np.ndarray:
        v, _ = self._parts(ab)
        return ab * self.A @ self.latent_cov @ self.A.T + v * np.eye(self.dim)

    def score(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, single = _as_batch(x)
        _check_finite(xb)
        v, inner = self._parts(ab)
        r = xb - self.mean(ab)
        z = r @ self.A  # latent coordinates
        perp = r - z @ self.A.T
        s = -perp / v - np.linalg.solve(inner, z.T).T @ self.A.T
        return s[0] if single else s

    def log_prob(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, single = _as_batch(x)
        v, inner = self._parts(ab)
        r = xb - self.mean(ab)
        z = r @ self.A
        perp = r - z @ self.A.T
        D, d = self.A.shape
        quad = np.sum(perp**2, axis=1) / v + np.sum(z * np.linalg.solve(inner, z.T).T, axis=1)
        logdet = (D - d) * math.log(v) + np.linalg.slogdet(inner)[1]
        lp = -0.5 * (quad + logdet + D * LOG_2PI)
        return lp[0] if single else lp

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.multivariate_normal(self.latent_mean, self.latent_cov, size=n)
        return z @ self.A.T


@dataclass(frozen=True)
class GaussianMixtureModel:
    """Finite Gaussian mixture; the noised marginal stays a mixture in closed form."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        C = np.asarray(self.covs, dtype=float)
        if C.ndim == 2:
            C = C[None]
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        if not (len(w) == len(mu) == len(C)):
            raise ValueError("weights, means and covariances disagree on K")
        for c in C:
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() <= 0:
                raise ValueError("mixture covariances must be SPD")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covs", C)

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixtureModel":
        return cls(np.ones(1), np.atleast_2d(mean), np.asarray(cov)[None])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _components(self, xb: np.ndarray, ab: float):
        D = self.dim
        logs, grads = [], []
        for w, m, c in zip(self.weights, self.means, self.covs):
            cov = ab * c + (1.0 - ab) * np.eye(D)
            L = np.linalg.cholesky(cov)
            r = xb - math.sqrt(ab) * m
            y = np.linalg.solve(L, r.T)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            logs.append(math.log(w) - 0.5 * (np.sum(y**2, axis=0) + logdet + D * LOG_2PI) if w > 0
                        else np.full(len(xb), -np.inf))
            grads.append(-np.linalg.solve(L.T, y).T)
        return np.stack(logs, axis=1), np.stack(grads, axis=1)

    def score(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, single = _as_batch(x)
        _check_finite(xb)
        logs, grads = self._components(xb, ab)
        resp = np.exp(logs - logsumexp(logs, axis=1, keepdims=True))
        s = np.einsum("bk,bkd->bd", resp, grads)
        return s[0] if single else s

    def log_prob(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, single = _as_batch(x)
        logs, _ = self._components(xb, ab)
        lp = logsumexp(logs, axis=1)
        return lp[0] if single else lp

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(len(self.weights), size=n, p=self.weights)
        return np.stack([rng.multivariate_normal(self.means[k], self.covs[k]) for k in ks])


@dataclass(frozen=True)
class EmpiricalScoreModel:
    """Exact score of a demonstration set pushed through the forward process.

    ``p_i = mean_m N(sqrt(ab) m, (1 - ab + floor) I)`` over flattened demos ``m``.
    """

    demos: np.ndarray
    floor: float = 1e-6
    shape: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        demos = np.atleast_2d(np.asarray(self.demos, dtype=float))
        if len(demos) < 1:
            raise ValueError("need at least one demonstration")
        if not np.all(np.isfinite(demos)):
            raise ValueError("demonstrations contain non-finite values")
        if self.floor <= 0:
            raise ValueError("kernel floor must be positive")
        object.__setattr__(self, "demos", demos)
        object.__setattr__(self, "_sq", np.sum(demos**2, axis=1))

    @property
    def dim(self) -> int:
        return self.demos.shape[1]

    def _logits(self, xb: np.ndarray, ab: float) -> tuple[np.ndarray, float]:
        var = 1.0 - ab + self.floor
        # ||x - c m||^2 expanded; the ||x||^2 term is common to all demos
        cross = xb @ self.demos.T
        d2 = np.sum(xb**2, axis=1, keepdims=True) - 2.0 * math.sqrt(ab) * cross + ab * self._sq[None]
        return -0.5 * np.maximum(d2, 0.0) / var, var

    def responsibilities(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, _ = _as_batch(x)
        logits, _ = self._logits(xb, ab)
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))

    def score(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, single = _as_batch(x)
        _check_finite(xb)
        logits, var = self._logits(xb, ab)
        resp = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        s = (math.sqrt(ab) * (resp @ self.demos) - xb) / var
        return s[0] if single else s

    def log_prob(self, x: np.ndarray, ab: float) -> np.ndarray:
        xb, single = _as_batch(x)
        var = 1.0 - ab + self.floor
        d2 = np.sum((xb[:, None, :] - math.sqrt(ab) * self.demos[None]) ** 2, axis=2)
        D = self.dim
        lp = logsumexp(-0.5 * d2 / var, axis=1) - math.log(len(self.demos)) - 0.5 * D * (math.log(var) + LOG_2PI)
        return lp[0] if single else lp


def fit_empirical(demos: Sequence[np.ndarray], floor: float = 1e-6) -> EmpiricalScoreModel:
    """Stack equally shaped ``(T, W)`` demonstrations into an empirical model."""
    demos = list(demos)
    if not demos:
        raise ValueError("empty demonstration list")
    shape = np.shape(demos[0])
    if len(shape) != 2:
        raise ValueError(f"demonstrations must be (T, W) arrays, got shape {shape}")
    for k, d in enumerate(demos):
        if np.shape(d) != shape:
            raise ValueError(f"demo {k} has shape {np.shape(d)}, expected {shape}")
    flat = np.stack([np.asarray(d, dtype=float).reshape(-1) for d in demos])
    return EmpiricalScoreModel(flat, floor=floor, shape=(int(shape[0]), int(shape[1])))


def score(model, x: np.ndarray, i: int, schedule) -> np.ndarray:
    """Score of ``p_i`` at flattened ``x``."""
    if not 0 <= i <= schedule.N:
        raise ValueError(f"step {i} outside [0, {schedule.N}]")
    return model.score(x, float(schedule.alpha_bar[i]))


# --------------------------------------------------------------------------- demo files


def write_demo_csv(path: str | Path, traj: np.ndarray) -> None:
    traj = np.asarray(traj)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"ch{k}" for k in range(traj.shape[1])])
        for t, row in enumerate(traj):
            w.writerow([t] + [repr(float(v)) for v in row])


def read_demo_csv(path: str | Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[0] != "t" or any(h != f"ch{k}" for k, h in enumerate(header[1:])):
        raise ValueError(f"{path}: bad demo header {header}")
    for k, row in enumerate(body):
        if int(row[0]) != k:
            raise ValueError(f"{path}: row {k} has t={row[0]}")
    return np.array([[float(v) for v in row[1:]] for row in body])


def save_demo_set(directory: str | Path, demos: Sequence[np.ndarray]) -> Path:
    """Write one CSV per demo plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    T, W = np.shape(demos[0])
    names = []
    for k, d in enumerate(demos):
        name = f"demo_{k:05d}.csv"
        write_demo_csv(directory / name, d)
        names.append(name)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"T_pred": int(T), "W": int(W), "demos": names}, indent=1))
    return manifest


def load_demo_set(manifest: str | Path) -> list[np.ndarray]:
    manifest = Path(manifest)
    meta = json.loads(manifest.read_text())
    demos = [read_demo_csv(manifest.parent / name) for name in meta["demos"]]
    for name, d in zip(meta["demos"], demos):
        if d.shape != (meta["T_pred"], meta["W"]):
            raise ValueError(f"{name}: shape {d.shape} disagrees with manifest")
    return demos
