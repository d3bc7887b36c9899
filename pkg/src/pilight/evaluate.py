"""Metric tables and the evaluation routines behind ``pilight eval`` / ``ablate``."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .geometry import BrdfParams, Camera, SceneSpec, Sphere
from .imagecore import PSNR_INF, psnr, ssim
from .lighting import LightSample, point_light_envmap, render_gray_ball
from .scenegen import EXPOSURE, DatasetRecord
from .shading import render_scene

THRESHOLDS = (11.25, 22.5, 30.0)
METRIC_KEYS = ("psnr", "ssim", "mae_11.25", "mae_22.5", "mae_30")


def angular_error_deg(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-pixel ``arccos(clamp(n_hat . n, -1, 1))`` in degrees over ``mask``.

    Both normal maps are renormalised; zero predictions count as 90 degrees.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    m = np.asarray(mask).reshape(pred.shape[1:]) > 0.5
    pn = np.linalg.norm(pred, axis=0)
    gn = np.linalg.norm(gt, axis=0)
    cos = np.sum(pred * gt, axis=0) / np.maximum(pn * gn, 1e-12)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))[m]


def percent_within(errors: np.ndarray, thresholds=THRESHOLDS) -> Dict[str, float]:
    errors = np.asarray(errors)
    if errors.size == 0:
        return {f"mae_{t:g}": float("nan") for t in thresholds}
    return {f"mae_{t:g}": float(100.0 * np.mean(errors <= t)) for t in thresholds}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        if math.isnan(v):
            return "nan"
        return f"{v:.4f}"
    return str(v)


def _json_value(v):
    if isinstance(v, float) and (math.isinf(v) or math.isnan(v)):
        return "inf" if math.isinf(v) else "nan"
    return v


@dataclass
class MetricTable:
    rows: List[dict] = field(default_factory=list)

    def add(self, method: str, split: str, **metrics):
        row = {"method": method, "split": split}
        for k in METRIC_KEYS:
            v = metrics.get(k)
            row[k] = None if v is None else float(v)
        self.rows.append(row)
        return row

    def check_monotone(self) -> bool:
        """Percent-within must not decrease with a looser threshold."""
        for r in self.rows:
            vals = [r[f"mae_{t:g}"] for t in THRESHOLDS]
            if any(v is None for v in vals) or any(math.isnan(v) for v in vals):
                continue
            if not (vals[0] <= vals[1] <= vals[2]):
                return False
        return True

    def to_json(self) -> str:
        rows = [{k: _json_value(v) for k, v in r.items()} for r in self.rows]
        return json.dumps({"rows": rows}, indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        cols = ("method", "split") + METRIC_KEYS
        cells = [list(cols)] + [[_fmt(r[c]) for c in cols] for r in self.rows]
        widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
        return "\n".join(lines) + "\n"


def mean_image_metrics(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> Dict[str, float]:
    """Mean PSNR and SSIM; PSNR stays at the infinite sentinel only if every pair is exact."""
    ps = [psnr(p, g) for p, g in zip(preds, gts)]
    ss = [ssim(p, g) for p, g in zip(preds, gts)]
    finite = [p for p in ps if not math.isinf(p)]
    mean_psnr = PSNR_INF if not finite and ps else float(np.mean(finite)) if finite else float("nan")
    return {"psnr": mean_psnr, "ssim": float(np.mean(ss)) if ss else float("nan")}


def _masked_albedo(preds, records):
    return ([p.albedo * r.intrinsics.mask for p, r in zip(preds, records)],
            [np.clip(r.intrinsics.albedo, 0, 1) * r.intrinsics.mask for r in records])


def albedo_psnr(preds: Sequence, records: Sequence[DatasetRecord]) -> List[float]:
    """Per-record albedo PSNR inside the ground-truth mask."""
    return [psnr(p, g) for p, g in zip(*_masked_albedo(preds, records))]


def score_intrinsics(preds: Sequence, records: Sequence[DatasetRecord]) -> Dict[str, float]:
    """Albedo PSNR/SSIM and normal percent-within over masked pixels.

    ``preds`` are :class:`IntrinsicSet` instances aligned with ``records``.
    Both albedo maps are multiplied by the ground-truth mask first so the
    unsupervised background does not enter the score.
    """
    metrics = mean_image_metrics(*_masked_albedo(preds, records))
    errs = np.concatenate([angular_error_deg(p.normals, r.intrinsics.normals, r.intrinsics.mask)
                           for p, r in zip(preds, records)])
    metrics.update(percent_within(errs))
    return metrics


def constant_albedo_baseline(train: Sequence[DatasetRecord], test: Sequence[DatasetRecord]) -> Dict[str, float]:
    """Predict the per-channel mean training albedo (over masked pixels) everywhere inside the mask."""
    num = sum((r.intrinsics.albedo * r.intrinsics.mask).sum(axis=(1, 2)) for r in train)
    den = sum(float(r.intrinsics.mask.sum()) for r in train)
    mean = num / max(den, 1.0)
    preds = [(mean[:, None, None] * r.intrinsics.mask).astype(np.float32) for r in test]
    return mean_image_metrics(preds, [np.clip(r.intrinsics.albedo, 0, 1) for r in test])


def random_normal_baseline(records: Sequence[DatasetRecord], seed: int = 42) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    errs = []
    for r in records:
        rand = rng.normal(size=r.intrinsics.normals.shape)
        errs.append(angular_error_deg(rand, r.intrinsics.normals, r.intrinsics.mask))
    return percent_within(np.concatenate(errs))


# ---------------------------------------------------------------------------
# light-direction probe

def matte_sphere_scene(resolution: int = 64) -> SceneSpec:
    """A single diffuse sphere framed at the image centre."""
    sphere = Sphere((0.0, 0.35, 0.0), 0.35, BrdfParams((0.7, 0.7, 0.7), 1.0, 0.0))
    camera = Camera(0.0, 0.0, half_extent=1.25 * 0.35, target=(0.0, 0.35, 0.0))
    return SceneSpec((sphere,), camera, seed=0)


def side_light(azimuth_deg: float = 70.0, strength: float = 12.0) -> np.ndarray:
    sample = LightSample(azimuth_deg, 80.0, strength, "point_only")
    return (point_light_envmap(sample, ambient=0.3) * EXPOSURE).astype(np.float32)


def left_right_means(img: np.ndarray, mask: np.ndarray) -> tuple:
    """Mean intensity of the masked left and right image halves."""
    lum = np.asarray(img).mean(axis=0)
    m = np.asarray(mask).reshape(lum.shape) > 0.5
    half = lum.shape[1] // 2
    left = lum[:, :half][m[:, :half]].mean()
    right = lum[:, half:][m[:, half:]].mean()
    return float(left), float(right)


@dataclass
class MirrorProbe:
    normal: tuple
    mirrored: tuple
    gt_normal: tuple
    gt_mirrored: tuple

    @property
    def flipped(self) -> bool:
        a = self.normal[0] - self.normal[1]
        b = self.mirrored[0] - self.mirrored[1]
        return a * b < 0

    def to_dict(self) -> dict:
        return {"pred": list(self.normal), "pred_mirrored": list(self.mirrored),
                "gt": list(self.gt_normal), "gt_mirrored": list(self.gt_mirrored),
                "flipped": self.flipped}


def light_direction_probe(relight_fn, resolution: int = 64, azimuth_deg: float = 70.0) -> MirrorProbe:
    """Relight a centred matte sphere with a side-lit ball and its mirror image.

    ``relight_fn(image, intrinsics, ball)`` returns a :class:`ShadingResult`.
    The source image is lit frontally so only the ball carries the side.
    """
    scene = matte_sphere_scene(resolution)
    src_shade, intr = render_scene(scene, side_light(0.0), resolution, shadows=False)
    env = side_light(azimuth_deg)
    ball = render_gray_ball(env, 0.5, size=resolution)
    mirrored = ball[:, :, ::-1].copy()
    gt, _ = render_scene(scene, env, resolution, shadows=False)
    gt_m, _ = render_scene(scene, env[:, :, ::-1].copy(), resolution, shadows=False)
    image = np.clip(src_shade.composed, 0, 1)
    d1 = relight_fn(image, intr, ball).diffuse
    d2 = relight_fn(image, intr, mirrored).diffuse
    return MirrorProbe(left_right_means(d1, intr.mask), left_right_means(d2, intr.mask),
                       left_right_means(gt.diffuse, intr.mask), left_right_means(gt_m.diffuse, intr.mask))


def paired_summary(a: Sequence[float], b: Sequence[float]) -> Dict[str, float]:
    """Mean of ``a - b`` with its standard error (paired samples)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("inf")
    return {"mean_diff": float(d.mean()), "stderr": se}
