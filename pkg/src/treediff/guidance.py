"""Test-time guidance: guide functions, state decomposition, and mean shifts.

Two shifts act on the batch of posterior means ``mu`` at every reverse step:

* gradient shift ``alpha_g * grad J(mu)`` on observation channels;
* particle shift ``alpha_p * grad Phi`` on control channels, with the
  repulsive potential ``Phi(x_k) = -sum_{j != k} exp(-|x_k - x_j|^2 / (2 h^2))``
  computed over the control part of each flattened trajectory.

Shifts returned here are the raw ``u`` of :func:`treediff.diffusion.reverse_step`;
the sampler multiplies them by the step variance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import pdist

ValueFn = Callable[[np.ndarray], np.ndarray]


def fd_gradient(fn: ValueFn, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array.

    The step for entry ``k`` is ``rel_step * max(1, |x_k|)``.
    """
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        h = rel_step * max(1.0, abs(flat[k]))
        orig = flat[k]
        flat[k] = orig + h
        up = float(fn(x))
        flat[k] = orig - h
        down = float(fn(x))
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * h)
    return g


@dataclass(frozen=True)
class GuideFunction:
    """Scalar trajectory objective ``J`` with an optional analytic gradient.

    ``value_fn`` and ``grad_fn`` map ``(..., T, W)`` arrays to ``(...)`` values
    and ``(..., T, W)`` gradients. Without ``grad_fn`` the gradient falls back to
    central finite differences (slow; meant for tests and small problems).
    """

    name: str
    value_fn: ValueFn
    grad_fn: ValueFn | None = None
    # a distinct selection objective exists for this task (e.g. min-distance to gold)
    has_true: bool = False

    @property
    def analytic(self) -> bool:
        return self.grad_fn is not None

    def value(self, traj: np.ndarray):
        return self.value_fn(np.asarray(traj, dtype=float))

    def gradient(self, traj: np.ndarray) -> np.ndarray:
        traj = np.asarray(traj, dtype=float)
        if self.grad_fn is not None:
            return self.grad_fn(traj)
        if traj.ndim == 2:
            return fd_gradient(self.value_fn, traj.copy())
        return np.stack([fd_gradient(self.value_fn, t.copy()) for t in traj.reshape(-1, *traj.shape[-2:])]).reshape(
            traj.shape
        )

    def affine_pullback(self, scale: np.ndarray, offset: np.ndarray, name: str | None = None) -> "GuideFunction":
        """``J'(x) = J(scale * x + offset)`` with per-channel ``scale``/``offset``.

        Used to run planners in normalised coordinates while guides stay in
        environment units.
        """
        scale = np.asarray(scale, dtype=float)
        offset = np.asarray(offset, dtype=float)
        value_fn = lambda x: self.value_fn(x * scale + offset)  # noqa: E731
        grad_fn = None
        if self.grad_fn is not None:
            grad_fn = lambda x: self.grad_fn(x * scale + offset) * scale  # noqa: E731
        return GuideFunction(name or self.name, value_fn, grad_fn, self.has_true)


def zero_guide(name: str = "zero") -> GuideFunction:
    return GuideFunction(
        name,
        lambda x: np.zeros(np.shape(x)[:-2]) if np.ndim(x) > 2 else 0.0,
        lambda x: np.zeros(np.shape(x)),
    )


def linear_guide(c: np.ndarray, name: str = "linear") -> GuideFunction:
    """``J(tau) = <c, tau>``."""
    c = np.asarray(c, dtype=float)
    return GuideFunction(
        name,
        lambda x: np.sum(x * c, axis=(-2, -1)),
        lambda x: np.broadcast_to(c, np.shape(x)).copy(),
    )


# --------------------------------------------------------------------------- decomposition


@dataclass(frozen=True)
class StateMask:
    """Per-channel split into control and observation channels."""

    control: tuple[int, ...]
    observation: tuple[int, ...]

    def __post_init__(self):
        if set(self.control) & set(self.observation):
            raise ValueError("control and observation channels overlap")
        chans = sorted(self.control + self.observation)
        if chans != list(range(len(chans))):
            raise ValueError("control and observation channels must cover 0..W-1")

    @property
    def W(self) -> int:
        return len(self.control) + len(self.observation)

    def obs_array(self) -> np.ndarray:
        m = np.zeros(self.W, dtype=bool)
        m[list(self.observation)] = True
        return m

    @classmethod
    def all_observation(cls, W: int) -> "StateMask":
        return cls((), tuple(range(W)))


def decompose_states(J: GuideFunction, probes: Sequence[np.ndarray], eps: float = 1e-8) -> StateMask:
    """Channel ``w`` is observation iff ``max |dJ/dtau[t, w]|`` over probes exceeds ``eps``."""
    if len(probes) < 1:
        raise ValueError("need at least one probe trajectory")
    if eps <= 0:
        raise ValueError("eps must be positive")
    W = np.shape(probes[0])[-1]
    peak = np.zeros(W)
    for p in probes:
        g = np.abs(np.asarray(J.gradient(np.asarray(p, dtype=float))))
        peak = np.maximum(peak, g.reshape(-1, W).max(axis=0))
    obs = tuple(int(w) for w in np.flatnonzero(peak > eps))
    ctrl = tuple(int(w) for w in range(W) if peak[w] <= eps)
    return StateMask(ctrl, obs)


# --------------------------------------------------------------------------- particle term


def median_bandwidth(X: np.ndarray) -> float:
    """Median pairwise distance divided by sqrt(2); 1.0 when undefined or zero."""
    if len(X) < 2:
        return 1.0
    med = float(np.median(pdist(X)))
    return med / np.sqrt(2.0) if med > 0 else 1.0


def rbf_potential(X: np.ndarray, bandwidth: float) -> np.ndarray:
    """``Phi(x_k) = -sum_{j != k} exp(-|x_k - x_j|^2 / (2 h^2))`` for each row."""
    d2 = np.sum((X[:, None, :] - X[None, :, :]) ** 2, axis=2)
    K = np.exp(-d2 / (2.0 * bandwidth**2))
    np.fill_diagonal(K, 0.0)
    return -K.sum(axis=1)


def rbf_potential_grad(X: np.ndarray, bandwidth: float | str = "auto") -> np.ndarray:
    """Gradient of :func:`rbf_potential` w.r.t. each row; ascending it repels."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or len(X) < 1:
        raise ValueError("expected a (B, D) batch with B >= 1")
    h = median_bandwidth(X) if bandwidth == "auto" else float(bandwidth)
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth!r}")
    diff = X[:, None, :] - X[None, :, :]
    K = np.exp(-np.sum(diff**2, axis=2) / (2.0 * h**2))
    np.fill_diagonal(K, 0.0)
    return np.einsum("kj,kjd->kd", K, diff) / h**2


# --------------------------------------------------------------------------- shifts


def gradient_guidance_shift(mu: np.ndarray, mask: StateMask | None, alpha_g: float, J: GuideFunction) -> np.ndarray:
    """``alpha_g * grad J(mu)`` kept on observation channels only.

    ``mask=None`` applies the gradient to every channel.
    """
    if alpha_g == 0:
        return np.zeros_like(mu)
    g = alpha_g * np.asarray(J.gradient(mu))
    if mask is None:
        return g
    return np.where(mask.obs_array(), g, 0.0)


def particle_shift(mu: np.ndarray, mask: StateMask, alpha_p: float, bandwidth: float | str = "auto") -> np.ndarray:
    """``alpha_p * grad Phi`` over the control channels of a ``(B, T, W)`` batch."""
    out = np.zeros_like(mu)
    if alpha_p == 0 or not mask.control or len(mu) < 2:
        return out
    ctrl = list(mask.control)
    X = mu[:, :, ctrl].reshape(len(mu), -1)
    g = rbf_potential_grad(X, bandwidth).reshape(len(mu), mu.shape[1], len(ctrl))
    out[:, :, ctrl] = alpha_p * g
    return out


def integrated_shift(
    mu: np.ndarray,
    mask: StateMask,
    alpha_p: float,
    alpha_g: float,
    J: GuideFunction,
    bandwidth: float | str = "auto",
) -> np.ndarray:
    """Particle shift on control channels plus gradient shift on observation channels."""
    return particle_shift(mu, mask, alpha_p, bandwidth) + gradient_guidance_shift(mu, mask, alpha_g, J)
