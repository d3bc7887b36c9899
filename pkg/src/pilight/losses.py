"""Physics-inspired loss terms with closed-form gradients.

Every function returns the loss value together with the gradient(s) with
respect to its prediction inputs, so training code can inject them into any
autodiff graph (``tensor.backward(grad)``) or use them directly.  All math is
float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol

import numpy as np

from .imagecore import downsample_area
from .lighting import DIFFUSE_ENV_SIZE, unfold_ball_to_envmap
from .shading import diffuse_lookup


def _f64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _same_shape(*arrays):
    s = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != s:
            raise ValueError(f"shape mismatch: {s} vs {a.shape}")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # diffuse shading
    lambda2: float = 1.0  # physical shading
    lambda3: float = 0.1  # reconstruction

    def __post_init__(self):
        for v in (self.lambda1, self.lambda2, self.lambda3):
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weights must be finite and >= 0, got {v}")


def latent_mask(mask, factor: int = 8, threshold: float = 0.5) -> np.ndarray:
    """Area-downsample a pixel mask to latent resolution and binarise it."""
    mask = _f64(mask)
    lead = mask.shape[:-3]
    flat = mask.reshape((-1,) + mask.shape[-3:])
    small = np.stack([downsample_area(m, factor) for m in flat])
    return (small >= threshold).astype(np.float64).reshape(lead + small.shape[1:])


def masked_vpred_loss(v_pred, v_target, mask, factor: int = 8):
    """``mean((m_z * (v_pred - v_target))**2)`` with ``m_z`` from :func:`latent_mask`.

    ``mask`` is at pixel resolution, ``factor`` times larger than the latents.
    Leading batch axes are allowed; the mean runs over every latent element.
    """
    v_pred, v_target = _f64(v_pred), _f64(v_target)
    _same_shape(v_pred, v_target)
    mz = latent_mask(mask, factor)
    if mz.shape[-2:] != v_pred.shape[-2:]:
        raise ValueError(f"mask {np.shape(mask)} does not match latents {v_pred.shape} at factor {factor}")
    r = mz * (v_pred - v_target)
    n = r.size
    loss = float(np.sum(r * r) / n)
    grad = 2.0 * mz * r / n
    return loss, grad


def diffuse_target(normals, ball, albedo_scale: float = 1.0) -> np.ndarray:
    """``D_calculated``: unfold the ball to a 32x16 map and look it up by normal.

    ``albedo_scale`` divides out the gray ball's albedo when the target must be
    comparable with unit-albedo diffuse shading.
    """
    e_diff = unfold_ball_to_envmap(ball, *DIFFUSE_ENV_SIZE)
    return diffuse_lookup(e_diff, normals) / albedo_scale


def diffuse_shading_loss(d_pred, normals, ball, albedo_scale: float = 1.0,
                         mask=None, d_calc=None):
    """``MSE(D_calculated, d_pred)``; the target is constant (no gradient into it).

    With ``mask`` the squared error is restricted to covered pixels but still
    averaged over all elements.  A precomputed ``d_calc`` may be passed.
    """
    d_pred = _f64(d_pred)
    if d_calc is None:
        d_calc = diffuse_target(normals, ball, albedo_scale)
    d_calc = _f64(d_calc)
    _same_shape(d_pred, d_calc)
    r = d_pred - d_calc
    if mask is not None:
        r = r * _f64(mask)
    n = r.size
    return float(np.sum(r * r) / n), 2.0 * r / n


def physical_shading_loss(i_relit, albedo, d_pred, s_pred):
    """``MSE(i_relit, albedo * d_pred + s_pred)`` and its four gradients."""
    i_relit, albedo, d_pred, s_pred = map(_f64, (i_relit, albedo, d_pred, s_pred))
    _same_shape(i_relit, albedo, d_pred, s_pred)
    r = i_relit - (albedo * d_pred + s_pred)
    n = r.size
    loss = float(np.sum(r * r) / n)
    g = 2.0 * r / n
    grads = {
        "i_relit": g,
        "albedo": -g * d_pred,
        "d_pred": -g * albedo,
        "s_pred": -g,
    }
    return loss, grads


class FeatureExtractor(Protocol):
    def features(self, image: np.ndarray) -> np.ndarray: ...

    def vjp(self, image: np.ndarray, grad_features: np.ndarray) -> np.ndarray: ...


class EdgeStructureExtractor:
    """Multi-scale gradient-magnitude descriptor.

    Per channel and at each dyadic scale the forward-difference gradient
    magnitude of ``log(x + offset)`` is mean-pooled onto a ``cells x cells``
    grid; all pooled maps are concatenated and L2-normalised.  The log makes
    smooth multiplicative shading cancel, so the descriptor follows albedo
    edges and silhouettes more than lighting.
    """

    def __init__(self, scales=(1, 2, 4), cells: int = 4, eps: float = 1e-6,
                 offset: float = 0.05):
        self.scales = tuple(scales)
        self.cells = cells
        self.eps = eps
        self.offset = offset

    def _log(self, img):
        return np.log(np.maximum(img, 0.0) + self.offset)

    def _scale_forward(self, img, s):
        x = downsample_area(img, s) if s > 1 else img
        gx = np.zeros_like(x)
        gy = np.zeros_like(x)
        gx[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
        gy[:, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
        mag = np.sqrt(gx * gx + gy * gy + self.eps)
        c, h, w = mag.shape
        k = min(self.cells, h, w)
        bh, bw = h // k, w // k
        pooled = mag[:, : k * bh, : k * bw].reshape(c, k, bh, k, bw).mean(axis=(2, 4))
        return x, gx, gy, mag, pooled, k

    def _raw(self, img):
        img = self._log(img)
        parts = [self._scale_forward(img, s)[4].ravel() for s in self.scales]
        return np.concatenate(parts)

    def features(self, image) -> np.ndarray:
        v = self._raw(_f64(image))
        return v / np.linalg.norm(v)

    def vjp(self, image, grad_features) -> np.ndarray:
        raw_img = _f64(image)
        img = self._log(raw_img)
        v = self._raw(raw_img)
        norm = np.linalg.norm(v)
        f = v / norm
        gv = (grad_features - f * np.dot(f, grad_features)) / norm
        out = np.zeros_like(img)
        offset = 0
        for s in self.scales:
            x, gx, gy, mag, pooled, k = self._scale_forward(img, s)
            size = pooled.size
            gp = gv[offset:offset + size].reshape(pooled.shape)
            offset += size
            _, h, w = mag.shape
            bh, bw = h // k, w // k
            gmag = np.zeros_like(mag)
            gmag[:, : k * bh, : k * bw] = np.repeat(np.repeat(gp, bh, axis=1), bw, axis=2) / (bh * bw)
            ggx = gmag * gx / mag
            ggy = gmag * gy / mag
            gxs = np.zeros_like(x)
            gxs[:, :, 1:] += ggx[:, :, :-1]
            gxs[:, :, :-1] -= ggx[:, :, :-1]
            gxs[:, 1:, :] += ggy[:, :-1, :]
            gxs[:, :-1, :] -= ggy[:, :-1, :]
            if s > 1:
                gxs = np.repeat(np.repeat(gxs, s, axis=1), s, axis=2) / (s * s)
            out += gxs
        dlog = np.where(raw_img > 0.0, 1.0 / (raw_img + self.offset), 0.0)
        return out * dlog


def reconstruction_loss(i_relit, i_input, extractor: Optional[FeatureExtractor] = None):
    """``||phi(i_relit) - phi(i_input)||^2`` and its gradient w.r.t. ``i_relit``."""
    extractor = extractor or EdgeStructureExtractor()
    i_relit, i_input = _f64(i_relit), _f64(i_input)
    _same_shape(i_relit, i_input)
    try:
        diff = extractor.features(i_relit) - extractor.features(i_input)
        grad = extractor.vjp(i_relit, 2.0 * diff)
    except Exception as exc:
        raise RuntimeError(f"feature extractor failed: {exc}") from exc
    return float(np.dot(diff, diff)), grad


def feature_similarity(a, b, extractor: Optional[FeatureExtractor] = None) -> float:
    extractor = extractor or EdgeStructureExtractor()
    return float(np.dot(extractor.features(a), extractor.features(b)))


@dataclass
class LossReport:
    l_vpred: float
    l_ds: float
    l_ps: float
    l_rec: float
    total: float
    t: int
    gradients: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def to_log(self, step: int) -> dict:
        return {"step": step, "t": self.t, "l_vpred": self.l_vpred, "l_ds": self.l_ds,
                "l_ps": self.l_ps, "l_rec": self.l_rec, "total": self.total}


def stage2_total(l_vpred: float, l_ds: float, l_ps: float, l_rec: float,
                 weights: LossWeights, t: int, gradients: Optional[Dict[str, np.ndarray]] = None,
                 ) -> LossReport:
    """``l_vpred + (1/t)(lambda1 l_ds + lambda2 l_ps + lambda3 l_rec)``.

    ``gradients`` maps names to per-term gradients; keys starting with
    ``ds:``, ``ps:`` or ``rec:`` are scaled by the matching ``lambda / t`` and
    ``vpred:`` keys pass through, giving gradients of ``total``.
    """
    if t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    inv_t = 1.0 / t
    physics = weights.lambda1 * l_ds + weights.lambda2 * l_ps + weights.lambda3 * l_rec
    total = l_vpred + inv_t * physics
    scale = {"vpred": 1.0, "ds": weights.lambda1 * inv_t, "ps": weights.lambda2 * inv_t,
             "rec": weights.lambda3 * inv_t}
    scaled = {}
    for k, g in (gradients or {}).items():
        term = k.split(":", 1)[0]
        if term not in scale:
            raise KeyError(f"gradient key {k!r} has no loss-term prefix")
        scaled[k] = scale[term] * g
    return LossReport(l_vpred, l_ds, l_ps, l_rec, total, t, scaled)
