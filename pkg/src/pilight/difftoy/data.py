"""Maps dataset records to autoencoder-domain images and cached latents."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from ..imagecore import encode_normals
from ..lighting import GRAY_ALBEDO
from ..losses import diffuse_target
from ..scenegen import DatasetRecord
from .autoencoder import ToyAutoencoder, to_model

# Diffuse shading exceeds 1 under strong lights; it is stored halved.
DIFFUSE_RANGE = 2.0

STAGE1_SLOTS = ("albedo", "normal", "roughness", "metallic")
STAGE2_SLOTS = ("relit", "diffuse", "specular")
STAGE2_CONDITIONS = {
    "relit": ("input", "albedo"),
    "diffuse": ("normal", "ball", "mask"),
    "specular": ("normal", "ball", "metallic", "roughness", "mask"),
}
NO_DECOMP_CONDITIONS = ("input", "albedo", "normal", "ball", "metallic", "roughness", "mask")


def _rgb(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return np.repeat(x, 3, axis=0) if x.shape[0] == 1 else x


def record_images(rec: DatasetRecord) -> Dict[str, np.ndarray]:
    """Every image of a record as ``(3, H, W)`` float32 in ``[0, 1]`` (AE pixel domain)."""
    intr = rec.intrinsics
    imgs = {
        "input": rec.input_image,
        "albedo": intr.albedo,
        "normal": encode_normals(intr.normals) * intr.mask,
        "roughness": _rgb(intr.roughness),
        "metallic": _rgb(intr.metallic),
        "mask": _rgb(intr.mask),
        "ball": rec.light_condition,
        "diffuse": rec.diffuse_gt / DIFFUSE_RANGE,
        "specular": rec.specular_gt,
    }
    return {k: np.clip(np.asarray(v, dtype=np.float32), 0.0, 1.0) for k, v in imgs.items()}


def autoencoder_corpus(records: Sequence[DatasetRecord]) -> np.ndarray:
    return np.stack([img for r in records for img in record_images(r).values()])


@dataclass
class RecordTensors:
    """Cached latents plus the float64 pixel arrays the analytic losses need."""

    latents: Dict[str, torch.Tensor]
    images: Dict[str, np.ndarray]
    normals: np.ndarray
    mask: np.ndarray
    d_calc: np.ndarray = field(repr=False)


def encode_images(ae: ToyAutoencoder, images: Dict[str, np.ndarray]) -> Dict[str, torch.Tensor]:
    names = list(images)
    with torch.no_grad():
        z = ae.encode(to_model(np.stack([images[n] for n in names])))
    return {n: z[i] for i, n in enumerate(names)}


def build_bank(records: Sequence[DatasetRecord], ae: ToyAutoencoder) -> List[RecordTensors]:
    bank = []
    for rec in records:
        imgs = record_images(rec)
        normals = np.asarray(rec.intrinsics.normals, dtype=np.float64)
        mask = np.asarray(rec.intrinsics.mask, dtype=np.float64)
        d_calc = diffuse_target(normals, rec.light_condition, albedo_scale=GRAY_ALBEDO)
        bank.append(RecordTensors(encode_images(ae, imgs), imgs, normals, mask, d_calc))
    return bank


def relight_pairs(records: Sequence[DatasetRecord]) -> List[Tuple[int, int]]:
    """All ordered (source, target) index pairs sharing scene and view, differing in light."""
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[(r.scene_id, r.view)].append(i)
    pairs = []
    for key in sorted(groups):
        idx = groups[key]
        pairs.extend((a, b) for a in idx for b in idx if a != b)
    return pairs


def stack_conditions(latents: Sequence[torch.Tensor], n_max: int) -> torch.Tensor:
    """Concatenate per-image latents channel-wise, zero-padded to ``n_max`` images."""
    c, h, w = latents[0].shape
    out = torch.zeros(n_max * c, h, w)
    if latents:
        out[: len(latents) * c] = torch.cat(list(latents))
    return out
