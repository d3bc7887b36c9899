"""Classifier-free guidance and deterministic DDIM sampling for V-prediction."""

from __future__ import annotations

import numpy as np
import torch

from .schedule import NoiseSchedule


def denoise_step(model, z_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor,
                 labels: torch.Tensor, cfg_scale: float = 1.0) -> torch.Tensor:
    """``v_uncond + s (v_cond - v_uncond)``; the unconditional pass zeroes ``cond``.

    With ``s == 1`` only the conditional pass runs.
    """
    if cfg_scale < 1.0:
        raise ValueError(f"cfg_scale must be >= 1, got {cfg_scale}")
    v_cond = model(z_t, cond, t, labels)
    if cfg_scale == 1.0:
        return v_cond
    v_uncond = model(z_t, torch.zeros_like(cond), t, labels)
    return v_uncond + cfg_scale * (v_cond - v_uncond)


def ddim_timesteps(steps: int, T: int) -> list:
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    ts = np.unique(np.round(np.linspace(1, T, min(steps, T))).astype(int))[::-1]
    return [int(t) for t in ts]


@torch.no_grad()
def ddim_sample(model, cond: torch.Tensor, labels: torch.Tensor, schedule: NoiseSchedule,
                steps: int = 20, cfg_scale: float = 1.0, seed: int = 42,
                latent_shape=None) -> torch.Tensor:
    """Eta-zero DDIM from pure noise; returns the final ``z_0`` ``(B, S, C, h, w)``."""
    b, s = cond.shape[:2]
    c = model.cfg.latent_channels
    shape = latent_shape or (b, s, c) + tuple(cond.shape[-2:])
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=gen, dtype=cond.dtype)
    ts = ddim_timesteps(steps, schedule.T)
    ab = schedule.alpha_bar
    z0 = z
    for i, t in enumerate(ts):
        tt = torch.full((b,), t, dtype=torch.long)
        v = denoise_step(model, z, cond, tt, labels, cfg_scale)
        a, sg = float(np.sqrt(ab[t - 1])), float(np.sqrt(1.0 - ab[t - 1]))
        z0 = a * z - sg * v
        eps = sg * z + a * v
        if i + 1 < len(ts):
            t_next = ts[i + 1]
            a_n, s_n = float(np.sqrt(ab[t_next - 1])), float(np.sqrt(1.0 - ab[t_next - 1]))
            z = a_n * z0 + s_n * eps
    return z0
