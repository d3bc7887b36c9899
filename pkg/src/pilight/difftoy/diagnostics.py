"""Latent-masking diagnostic: how far zeroed latents leak into kept pixels."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from ..imagecore import downsample_area
from .autoencoder import FACTOR, ToyAutoencoder, from_model, to_model


@dataclass(frozen=True)
class MaskDiagnostic:
    degenerate: bool
    band_width: int
    kept_pixels: int
    kept_error: float
    boundary_error: float
    interior_error: float
    plain_interior_error: float

    @property
    def misaligned(self) -> bool:
        return (not self.degenerate) and self.interior_error > 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["misaligned"] = self.misaligned
        return d


def decoder_receptive_radius(ae: ToyAutoencoder, latent_hw=(8, 8)) -> int:
    """Chebyshev radius, in latent cells, of the latents one central output pixel depends on."""
    h, w = latent_hw
    z = torch.zeros((1, ae.latent_channels, h, w), requires_grad=True)
    y = ae.decode(z)
    y[0, :, y.shape[2] // 2, y.shape[3] // 2].sum().backward()
    nz = np.argwhere(z.grad[0].abs().sum(0).numpy() > 0)
    centre = np.array([(y.shape[2] // 2) // FACTOR, (y.shape[3] // 2) // FACTOR])
    return int(np.abs(nz - centre).max()) if len(nz) else 0


def _dilate(mask: np.ndarray, r: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(r):
        p = np.pad(out, 1)
        out = np.max([p[i:i + out.shape[0], j:j + out.shape[1]]
                      for i in range(3) for j in range(3)], axis=0)
    return out


def latent_mask_diagnostic(ae: ToyAutoencoder, image: np.ndarray, mask: np.ndarray) -> MaskDiagnostic:
    """Zero latents outside the downsampled mask, decode, and score kept pixels.

    ``image`` is ``(3, H, W)`` in ``[0, 1]`` and ``mask`` ``(1, H, W)``.  Errors
    are mean absolute differences to ``image``; the boundary band is the
    kept region within one decoder receptive field of a removed pixel.
    """
    image = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    mz = (downsample_area(np.asarray(mask, dtype=np.float64), FACTOR) >= 0.5).astype(np.float32)
    kept = np.repeat(np.repeat(mz[0], FACTOR, axis=0), FACTOR, axis=1) > 0
    band = decoder_receptive_radius(ae, mz.shape[1:]) * FACTOR
    if not kept.any():
        return MaskDiagnostic(True, band, 0, 0.0, 0.0, 0.0, 0.0)
    with torch.no_grad():
        z = ae.encode(to_model(image[None]))
        plain = from_model(ae.decode(z))[0].clamp(0, 1).numpy()
        masked = from_model(ae.decode(z * torch.from_numpy(mz)[None]))[0].clamp(0, 1).numpy()
    err = np.abs(masked - image).mean(axis=0)
    plain_err = np.abs(plain - image).mean(axis=0)
    near = _dilate(~kept, band) & kept
    interior = kept & ~near

    def mean(e, m):
        return float(e[m].mean()) if m.any() else 0.0

    return MaskDiagnostic(False, band, int(kept.sum()), mean(err, kept), mean(err, near),
                          mean(err, interior), mean(plain_err, interior))
