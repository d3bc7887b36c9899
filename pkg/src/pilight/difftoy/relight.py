"""Inference: stage-1 intrinsic prediction and stage-2 relighting by DDIM."""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np
import torch

from ..imagecore import decode_normals, encode_normals
from ..shading import IntrinsicSet, ShadingResult
from .autoencoder import ToyAutoencoder, from_model
from .data import DIFFUSE_RANGE, STAGE1_SLOTS, encode_images
from .denoiser import CrossBatchDenoiser, one_hot_labels
from .sampling import ddim_sample
from .schedule import NoiseSchedule
from .train import stage1_slots, stage2_cond

STAGE1_CFG = 1.0
STAGE2_CFG = 1.5


def record_input(rec) -> np.ndarray:
    """A record's input image clipped to the ``[0, 1]`` pixel domain."""
    return np.clip(np.asarray(rec.input_image, dtype=np.float32), 0.0, 1.0)


def _decode(ae: ToyAutoencoder, z: torch.Tensor) -> np.ndarray:
    """``(B, S, C, h, w)`` latents to ``(B, S, 3, H, W)`` pixels in ``[0, 1]``."""
    with torch.no_grad():
        y = from_model(ae.decode(z.reshape((-1,) + z.shape[2:]))).clamp(0.0, 1.0)
    return y.reshape(z.shape[:2] + y.shape[1:]).double().numpy()


def sample_stage1(model: CrossBatchDenoiser, ae: ToyAutoencoder, images: np.ndarray,
                  cfg_scale: float = STAGE1_CFG, steps: int = 20, seed: int = 42) -> np.ndarray:
    """Intrinsic slots ``(B, 4, 3, H, W)`` for input images ``(B, 3, H, W)`` in ``[0, 1]``."""
    lat = [encode_images(ae, {"input": img}) for img in images]
    cond = torch.stack([stage1_slots(l)[1] for l in lat])
    z0 = ddim_sample(model, cond, one_hot_labels(4), NoiseSchedule(), steps, cfg_scale, seed)
    return _decode(ae, z0)


def input_mask(image: np.ndarray) -> np.ndarray:
    """Coverage ``(1, H, W)``: pixels where the input is not background black."""
    return (np.asarray(image).max(axis=0) > 0.5 / 255.0)[None].astype(np.float32)


def slots_to_intrinsics(pix: np.ndarray, mask: np.ndarray) -> IntrinsicSet:
    """Convert one sample's decoded stage-1 slots to an :class:`IntrinsicSet`."""
    out = dict(zip(STAGE1_SLOTS, pix))
    normals = decode_normals(out["normal"], renormalize=True)
    mask = np.asarray(mask, dtype=np.float32)
    return IntrinsicSet(
        albedo=(out["albedo"] * mask).astype(np.float32),
        normals=(normals * mask).astype(np.float32),
        roughness=out["roughness"].mean(axis=0, keepdims=True).astype(np.float32),
        metallic=out["metallic"].mean(axis=0, keepdims=True).astype(np.float32),
        mask=mask,
    )


def predict_intrinsics(model, ae, image: np.ndarray, cfg_scale: float = STAGE1_CFG,
                       steps: int = 20, seed: int = 42) -> IntrinsicSet:
    image = np.asarray(image)
    return slots_to_intrinsics(sample_stage1(model, ae, image[None], cfg_scale, steps, seed)[0],
                               input_mask(image))


def condition_images(image: np.ndarray, intr: IntrinsicSet, ball: np.ndarray) -> Dict[str, np.ndarray]:
    rgb = lambda x: np.repeat(np.asarray(x, dtype=np.float32), 3, axis=0)  # noqa: E731
    imgs = {
        "input": image, "albedo": intr.albedo,
        "normal": encode_normals(intr.normals) * intr.mask,
        "roughness": rgb(intr.roughness), "metallic": rgb(intr.metallic), "mask": rgb(intr.mask),
        "ball": ball,
    }
    return {k: np.clip(np.asarray(v, dtype=np.float32), 0.0, 1.0) for k, v in imgs.items()}


def sample_stage2(model: CrossBatchDenoiser, ae: ToyAutoencoder,
                  conditions: Sequence[Dict[str, np.ndarray]], cfg_scale: float = STAGE2_CFG,
                  steps: int = 20, seed: int = 42) -> np.ndarray:
    """Decoded slots ``(B, S, 3, H, W)``; slot 0 is the relit image."""
    decomposed = model.cfg.n_slots > 1
    cond = torch.stack([stage2_cond(encode_images(ae, c), decomposed) for c in conditions])
    z0 = ddim_sample(model, cond, one_hot_labels(model.cfg.n_slots), NoiseSchedule(), steps,
                     cfg_scale, seed)
    return _decode(ae, z0)


def slots_to_shading(pix: np.ndarray) -> ShadingResult:
    relit = pix[0].astype(np.float32)
    if len(pix) == 1:
        zeros = np.zeros_like(relit)
        return ShadingResult(zeros, zeros, relit)
    return ShadingResult((DIFFUSE_RANGE * pix[1]).astype(np.float32), pix[2].astype(np.float32), relit)


def relight(model: CrossBatchDenoiser, ae: ToyAutoencoder, image: np.ndarray, intrinsics: IntrinsicSet,
            ball: np.ndarray, cfg_scale: float = STAGE2_CFG, steps: int = 20,
            seed: int = 42) -> ShadingResult:
    """Relit image (``composed``) with predicted diffuse and specular shading.

    A single-slot baseline model returns zero diffuse and specular maps.
    """
    if model is None or ae is None:
        raise ValueError("relight needs trained denoiser and autoencoder checkpoints")
    pix = sample_stage2(model, ae, [condition_images(image, intrinsics, ball)], cfg_scale, steps, seed)
    return slots_to_shading(pix[0])
