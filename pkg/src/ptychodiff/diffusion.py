"""DDPM machinery: noise schedules, forward jumps, ancestral steps and Tweedie estimates.

Schedules are indexed ``t = 1..N``; index 0 of every array is a sentinel for
the clean state (``beta = 0``, ``alpha_bar = 1``, ``sigma_tilde = 0``).
Score models use the epsilon parameterization, ``score = -eps / sqrt(1 - alpha_bar)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

__all__ = [
    "NoiseSchedule",
    "ScoreModel",
    "GaussianMixtureScore",
    "make_schedule",
    "noising_step",
    "denoising_step",
    "tweedie_x0",
    "gm_predict_eps",
    "write_schedule_csv",
]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma_tilde: np.ndarray

    @property
    def N(self) -> int:
        return len(self.beta) - 1


def make_schedule(N: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with the posterior-variance choice of sigma."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    beta = np.concatenate([[0.0], np.linspace(beta_min, beta_max, N)])
    alpha_bar = np.cumprod(1.0 - beta)
    sigma2 = np.zeros(N + 1)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(beta, alpha_bar, np.sqrt(sigma2))


def write_schedule_csv(path, schedule: NoiseSchedule) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "beta", "alpha_bar", "sigma_tilde"])
        for t in range(1, schedule.N + 1):
            w.writerow([t, repr(float(schedule.beta[t])), repr(float(schedule.alpha_bar[t])), repr(float(schedule.sigma_tilde[t]))])


class ScoreModel(Protocol):
    def predict_eps(self, x: np.ndarray, t: int) -> np.ndarray: ...

    def eps_with_vjp(self, x: np.ndarray, t: int) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
        """Return ``eps`` and a function mapping ``g`` to ``(d eps / d x)^T g``."""
        ...


def noising_step(x: np.ndarray, t: int, j: int, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Jump from level ``t`` to ``t + j`` in one draw of the forward kernel."""
    if j < 0 or t < 0 or t + j > schedule.N:
        raise ValueError(f"noising from level {t} by {j} leaves the schedule range [0, {schedule.N}]")
    if j == 0:
        return x
    ratio = schedule.alpha_bar[t + j] / schedule.alpha_bar[t]
    return np.sqrt(ratio) * x + np.sqrt(1.0 - ratio) * rng.standard_normal(np.shape(x))


def denoising_step(
    x: np.ndarray,
    t: int,
    model: ScoreModel | None,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """Ancestral DDPM step ``x_t -> x_{t-1}``; the final step (``t == 1``) adds no noise.

    ``eps`` may be passed to reuse a prediction already made at ``(x, t)``.
    """
    if not 1 <= t <= schedule.N:
        raise ValueError(f"step {t} outside [1, {schedule.N}]")
    if eps is None:
        eps = model.predict_eps(x, t)
    beta, ab = schedule.beta[t], schedule.alpha_bar[t]
    mean = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - beta)
    if t == 1:
        return mean
    return mean + schedule.sigma_tilde[t] * rng.standard_normal(np.shape(x))


def tweedie_x0(
    x: np.ndarray, t: int, model: ScoreModel | None, schedule: NoiseSchedule, eps: np.ndarray | None = None
) -> np.ndarray:
    """Posterior-mean estimate of the clean state, ``(x - sqrt(1-ab) eps) / sqrt(ab)``."""
    if eps is None:
        eps = model.predict_eps(x, t)
    ab = schedule.alpha_bar[t]
    return (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)


class GaussianMixtureScore:
    """Exact epsilon predictor for an isotropic Gaussian-mixture prior.

    Component ``k`` is ``N(means[k], var * I)`` with weight ``weights[k]``.  The
    mixture is pushed through the forward kernel, so at level ``t`` each
    component has mean ``sqrt(ab) * means[k]`` and variance ``ab * var + 1 - ab``.
    Inputs may carry leading batch axes in front of the event shape.
    """

    def __init__(self, means, var: float, schedule: NoiseSchedule, weights=None):
        self.means = np.asarray(means, dtype=np.float64)
        if self.means.ndim < 2:
            raise ValueError("means must have shape (K, *event_shape)")
        k = len(self.means)
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if var <= 0 or np.any(self.weights <= 0) or not np.isclose(self.weights.sum(), 1.0):
            raise ValueError("need var > 0 and positive weights summing to one")
        self.var = float(var)
        self.schedule = schedule
        self.event_shape = self.means.shape[1:]

    def _parts(self, x, t):
        ab = self.schedule.alpha_bar[t]
        s2 = ab * self.var + 1.0 - ab
        d = int(np.prod(self.event_shape))
        xf = np.asarray(x, dtype=np.float64).reshape(-1, d)
        m = np.sqrt(ab) * self.means.reshape(len(self.means), d)
        diff = xf[:, None, :] - m[None]  # (B, K, D)
        logits = np.log(self.weights)[None] - 0.5 * np.sum(diff**2, axis=-1) / s2
        logits -= logits.max(axis=1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=1, keepdims=True)
        mbar = r @ m  # (B, D)
        return ab, s2, xf, m, r, mbar

    def log_density(self, x, t) -> np.ndarray:
        ab = self.schedule.alpha_bar[t]
        s2 = ab * self.var + 1.0 - ab
        d = int(np.prod(self.event_shape))
        xf = np.asarray(x, dtype=np.float64).reshape(-1, d)
        m = np.sqrt(ab) * self.means.reshape(len(self.means), d)
        q = -0.5 * np.sum((xf[:, None, :] - m[None]) ** 2, axis=-1) / s2
        q += np.log(self.weights)[None] - 0.5 * d * np.log(2 * np.pi * s2)
        top = q.max(axis=1)
        return top + np.log(np.exp(q - top[:, None]).sum(axis=1))

    def predict_eps(self, x, t) -> np.ndarray:
        ab, s2, xf, m, r, mbar = self._parts(x, t)
        return (np.sqrt(1.0 - ab) / s2 * (xf - mbar)).reshape(np.shape(x))

    def eps_with_vjp(self, x, t):
        ab, s2, xf, m, r, mbar = self._parts(x, t)
        scale = np.sqrt(1.0 - ab) / s2
        eps = (scale * (xf - mbar)).reshape(np.shape(x))
        centered = m[None] - mbar[:, None, :]  # (B, K, D)

        def vjp(g):
            gf = np.asarray(g, dtype=np.float64).reshape(xf.shape)
            proj = np.einsum("bkd,bd->bk", centered, gf) * r
            cov_g = np.einsum("bk,bkd->bd", proj, centered)
            return (scale * (gf - cov_g / s2)).reshape(np.shape(x))

        return eps, vjp


def gm_predict_eps(x, t, mixture: GaussianMixtureScore, schedule: NoiseSchedule | None = None) -> np.ndarray:
    if schedule is not None and schedule is not mixture.schedule:
        mixture = GaussianMixtureScore(mixture.means, mixture.var, schedule, mixture.weights)
    return mixture.predict_eps(x, t)
