"""Toy convolutional autoencoder with exactly 8x spatial downsampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from ..imagecore import psnr

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
FACTOR = 8


@dataclass
class AutoencoderConfig:
    width: int = 32
    latent_channels: int = LATENT_CHANNELS
    steps: int = 3000
    batch: int = 16
    lr: float = 1e-3
    seed: int = 42


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.SiLU())


def _up(cin, cout):
    return nn.Sequential(nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1), nn.SiLU())


class ToyAutoencoder(nn.Module):
    """Encoder/decoder pair on images in ``[-1, 1]``.

    Latents are divided by ``latent_scale`` (a buffer fixed after
    pretraining) so that diffusion sees roughly unit-variance inputs.
    """

    def __init__(self, width: int = 32, latent_channels: int = LATENT_CHANNELS):
        super().__init__()
        w = width
        self.width = width
        self.latent_channels = latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, w // 2, 3, padding=1), nn.SiLU(),
            _down(w // 2, w), _down(w, 2 * w), _down(2 * w, 2 * w),
            nn.Conv2d(2 * w, latent_channels, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * w, 3, padding=1), nn.SiLU(),
            _up(2 * w, 2 * w), _up(2 * w, w), _up(w, w // 2),
            nn.Conv2d(w // 2, 3, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % FACTOR or x.shape[-2] % FACTOR:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by {FACTOR}")
        return self.encoder(x) / self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.decoder(z * self.latent_scale)

    def forward(self, x):
        return self.decode(self.encode(x))


def to_model(x) -> torch.Tensor:
    """``[0, 1]`` pixels (clipped) to the ``[-1, 1]`` autoencoder domain, batch-first float32."""
    x = torch.as_tensor(np.asarray(x, dtype=np.float32))
    return x.clamp(0.0, 1.0) * 2.0 - 1.0


def from_model(y: torch.Tensor) -> torch.Tensor:
    return (y + 1.0) * 0.5


def pretrain_autoencoder(images: np.ndarray, cfg: AutoencoderConfig = AutoencoderConfig(),
                         callback=None) -> ToyAutoencoder:
    """Fit on ``(N, 3, H, W)`` images in ``[0, 1]`` with an L2 + L1 loss, then fix the latent scale."""
    if len(images) == 0:
        raise ValueError("no images to pretrain on")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = ToyAutoencoder(cfg.width, cfg.latent_channels)
    data = to_model(images)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps, eta_min=cfg.lr * 0.05)
    for step in range(cfg.steps):
        idx = torch.randint(0, len(data), (cfg.batch,), generator=gen)
        x = data[idx]
        y = model(x)
        loss = ((y - x) ** 2).mean() + 0.1 * (y - x).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if callback is not None:
            callback(step, loss.item())
        if step % 500 == 0:
            log.info("autoencoder step %d loss %.5f", step, loss.item())
    model.eval()
    with torch.no_grad():
        z = torch.cat([model.encoder(data[i:i + 256]) for i in range(0, len(data), 256)])
        model.latent_scale.fill_(float(z.std()))
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def reconstruction_psnr(model: ToyAutoencoder, images: Sequence[np.ndarray]) -> float:
    """Mean PSNR of ``decode(encode(x))`` against ``x`` in ``[0, 1]``."""
    x = to_model(np.asarray(images))
    with torch.no_grad():
        y = from_model(model(x)).clamp(0, 1).numpy()
    ref = from_model(x).numpy()
    return float(np.mean([min(psnr(a, b), 100.0) for a, b in zip(y, ref)]))


def autoencoder_config_dict(model: ToyAutoencoder) -> dict:
    return {"width": model.width, "latent_channels": model.latent_channels}


def build_autoencoder(config: dict) -> ToyAutoencoder:
    model = ToyAutoencoder(config["width"], config["latent_channels"])
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


__all__ = ["AutoencoderConfig", "ToyAutoencoder", "pretrain_autoencoder", "reconstruction_psnr",
           "to_model", "from_model", "build_autoencoder", "autoencoder_config_dict"]
