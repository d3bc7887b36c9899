"""Linear-beta noise schedule and the V-prediction identities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @property
    def alpha_bar(self) -> np.ndarray:
        """``alpha_bar[t - 1]`` is the cumulative product at timestep ``t``."""
        return np.cumprod(1.0 - self.betas)

    def _check(self, t):
        t_arr = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t)
        if np.any(t_arr < 1) or np.any(t_arr > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return t_arr.astype(np.int64)

    def coefficients(self, t, like):
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`` broadcastable against ``like``.

        ``t`` is an int or a per-batch vector matching ``like``'s first axis.
        """
        t_arr = self._check(t)
        ab = self.alpha_bar[t_arr - 1]
        a, s = np.sqrt(ab), np.sqrt(1.0 - ab)
        if t_arr.ndim:
            shape = (-1,) + (1,) * (like.ndim - 1)
            a, s = a.reshape(shape), s.reshape(shape)
        if isinstance(like, torch.Tensor):
            return (torch.as_tensor(a, dtype=like.dtype, device=like.device),
                    torch.as_tensor(s, dtype=like.dtype, device=like.device))
        return a, s


def add_noise(z0, eps, t, schedule: NoiseSchedule):
    """``z_t = sqrt(ab) z0 + sqrt(1 - ab) eps``."""
    a, s = schedule.coefficients(t, z0)
    return a * z0 + s * eps


def v_target(z0, eps, t, schedule: NoiseSchedule):
    """``v_t = sqrt(ab) eps - sqrt(1 - ab) z0``."""
    a, s = schedule.coefficients(t, z0)
    return a * eps - s * z0


def predict_z0(z_t, v, t, schedule: NoiseSchedule):
    a, s = schedule.coefficients(t, z_t)
    return a * z_t - s * v


def predict_eps(z_t, v, t, schedule: NoiseSchedule):
    a, s = schedule.coefficients(t, z_t)
    return s * z_t + a * v
