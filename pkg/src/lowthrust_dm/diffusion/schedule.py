"""Noise schedule and closed-form forward process.

Arrays are indexed by timestep with index 0 standing for clean data, so
``alpha_bar[0] == 1`` and ``beta[0] == 0`` is padding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    N: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    beta_tilde: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar", "beta_tilde"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.N + 1,):
                raise ValueError(f"{name} must have N + 1 entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def schedule_from_betas(beta) -> NoiseSchedule:
    b = np.concatenate([[0.0], np.asarray(beta, dtype=np.float64)])
    N = b.size - 1
    alpha = 1.0 - b
    alpha_bar = np.cumprod(alpha)
    beta_tilde = np.zeros(N + 1)
    beta_tilde[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * b[1:]
    return NoiseSchedule(N=N, beta=b, alpha=alpha, alpha_bar=alpha_bar, beta_tilde=beta_tilde)


def cosine_schedule(N: int, s: float = COSINE_OFFSET, max_beta: float = MAX_BETA) -> NoiseSchedule:
    """Cosine schedule; alpha_bar is re-accumulated from the clipped betas."""
    if N < 2:
        raise ValueError("need at least two timesteps")
    n = np.arange(N + 1, dtype=np.float64)
    f = np.cos(((n / N + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    ab = f / f[0]
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    return schedule_from_betas(beta)


def q_sample(z0, n, schedule: NoiseSchedule, eps):
    """z_n = sqrt(alpha_bar_n) z0 + sqrt(1 - alpha_bar_n) eps (numpy or torch inputs)."""
    n_arr = np.asarray(n)
    if np.any(n_arr < 1) or np.any(n_arr > schedule.N):
        raise ValueError(f"timestep must lie in [1, {schedule.N}]")
    ab = schedule.alpha_bar[n_arr]
    a = np.sqrt(ab)
    b = np.sqrt(1.0 - ab)
    if np.ndim(a):
        a = a.reshape(-1, 1)
        b = b.reshape(-1, 1)
    try:
        import torch
        if isinstance(z0, torch.Tensor):
            a = torch.as_tensor(a, dtype=z0.dtype)
            b = torch.as_tensor(b, dtype=z0.dtype)
    except ImportError:  # pragma: no cover
        pass
    return a * z0 + b * eps


def forward_step(z_prev, n, schedule: NoiseSchedule, eps):
    """One forward step z_n = sqrt(1 - beta_n) z_{n-1} + sqrt(beta_n) eps."""
    return math.sqrt(schedule.alpha[n]) * z_prev + math.sqrt(schedule.beta[n]) * eps
