"""Forward-noising schedule for denoising diffusion training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import StepOutOfRange


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step variances and their running signal-retention products.

    alpha_bar[t] = prod_{s<=t} (1 - beta_s), with alpha_bar[0] = 1 so step
    indices are 1-based.
    """

    betas: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        if not ((self.betas > 0) & (self.betas < 1)).all():
            raise ValueError("all step variances must lie in (0, 1)")
        if self.alpha_bar[0] != 1.0 or len(self.alpha_bar) != len(self.betas) + 1:
            raise ValueError("alpha_bar must start at 1 with one entry per step")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise ValueError("alpha_bar must be strictly decreasing")

    @property
    def steps(self) -> int:
        return len(self.betas)


def linear_schedule(steps=1000, beta_start=1e-4, beta_end=0.02) -> DiffusionSchedule:
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - betas)))
    return DiffusionSchedule(betas=betas, alpha_bar=alpha_bar)


def ddpm_noise(x0, t, schedule: DiffusionSchedule, eps):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    t is a 1-based step index, scalar or per-sample array of shape (n,).
    """
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t_arr = np.asarray(t)
    if ((t_arr < 1) | (t_arr > schedule.steps)).any():
        raise StepOutOfRange(f"step {t!r} outside 1..{schedule.steps}")
    ab = schedule.alpha_bar[t_arr]
    if t_arr.ndim == 1:
        ab = ab[:, None, None, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
