"""DDPM noise schedule, forward noising and the ancestral reverse step.

Everything here is a pure function over an immutable schedule. Defaults
(T=100, beta linear 1e-4 -> 0.02) are a scaled-down version of the usual
linear schedule; the forward process is near-fully noised at T.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha_bar tables, indexed by timestep 0..T-1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def linear_schedule(T: int = DEFAULT_T,
                    beta_start: float = DEFAULT_BETA_START,
                    beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly spaced betas, inclusive of both endpoints."""
    if T < 2:
        raise ValueError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(schedule: NoiseSchedule, t: int):
    if not 0 <= t < schedule.T:
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")


def q_sample(schedule: NoiseSchedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Forward-noise a clean latent to level t: sqrt(ab_t) z0 + sqrt(1-ab_t) eps."""
    _check_t(schedule, t)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ValueError(f"q_sample: eps shape {eps.shape} != z0 shape {z0.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def reverse_step(schedule: NoiseSchedule, z_t: np.ndarray, eps_hat: np.ndarray,
                 t: int, noise: np.ndarray) -> np.ndarray:
    """One ancestral DDPM step from level t to t-1.

    mean = (z_t - beta_t/sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t), plus
    sigma_t * noise with sigma_t^2 = beta_t (1-ab_{t-1})/(1-ab_t) for t>0.
    The last step (t=0) is deterministic; passing noise there is an error.
    """
    _check_t(schedule, t)
    z_t = np.asarray(z_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z_t.shape and noise.shape != ():
        raise ValueError(f"reverse_step: noise shape {noise.shape} != z shape {z_t.shape}")
    ab_t = schedule.alpha_bar[t]
    mean = (z_t - schedule.beta[t] / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(schedule.alpha[t])
    if t == 0:
        if np.any(noise != 0.0):
            raise ValueError("reverse_step: noise must be zero at t=0")
        return mean
    sigma = np.sqrt(schedule.beta[t] * (1.0 - schedule.alpha_bar[t - 1]) / (1.0 - ab_t))
    return mean + sigma * noise
