"""Environment maps, the gray-ball lighting condition and light sampling.

Conventions (camera space, +x right, +y up, +z toward the viewer):

* env maps are ``(3, H, W)`` linear radiance with ``W == 2 * H``.  Row ``v``
  has polar angle ``theta = pi (v + 0.5) / H`` from +y, column ``u`` has
  azimuth ``phi = 2 pi (u + 0.5) / W - pi`` with ``phi = 0`` facing the viewer,
  so a direction is ``(sin t sin p, cos t, sin t cos p)``.
* a gray ball is a ``(3, S, S)`` image of a unit sphere seen orthographically
  along -z and tangent to all four image edges.  Pixels outside the disk are 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .imagecore import Rng

#: Albedo of the gray ball.  Unstated upstream; fixed so ball <-> env is invertible.
GRAY_ALBEDO = 0.5
#: Normal-incidence Fresnel reflectance of the ball's dielectric coat.
BALL_F0 = 0.04
#: Coat weight; kept low so the unfolded ball stays close to pure diffuse.
BALL_COAT = 0.2
DEFAULT_ENV_SIZE = (64, 32)
DIFFUSE_ENV_SIZE = (32, 16)

ELEVATION_MEAN = 60.0
ELEVATION_STD = 40.0
ELEVATION_RANGE = (20.0, 160.0)
STRENGTH_RANGE = (5.0, 20.0)
POINT_ONLY_PROB = 0.8
LOBE_SIGMA_DEG = 10.0


def direction(theta, phi) -> np.ndarray:
    """Unit vectors for polar angle ``theta`` (from +y) and azimuth ``phi``."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    theta, phi = np.broadcast_arrays(theta, phi)
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), st * np.cos(phi)], axis=-1)


def envmap_grid(width: int, height: int):
    """Texel-centre directions and solid-angle weights.

    Returns ``dirs`` (H, W, 3), ``theta`` (H,), ``phi`` (W,) and
    ``weights`` (H, W) where ``weights = sin(theta) dtheta dphi``.
    """
    if width < 1 or height < 1:
        raise ValueError(f"degenerate env map size {width}x{height}")
    theta = np.pi * (np.arange(height) + 0.5) / height
    phi = 2.0 * np.pi * (np.arange(width) + 0.5) / width - np.pi
    dirs = direction(theta[:, None], phi[None, :])
    weights = np.sin(theta)[:, None] * (np.pi / height) * (2.0 * np.pi / width)
    weights = np.broadcast_to(weights, (height, width)).copy()
    return dirs, theta, phi, weights


def check_envmap(env: np.ndarray) -> np.ndarray:
    env = np.asarray(env)
    if env.ndim != 3 or env.shape[0] != 3:
        raise ValueError(f"env map must be (3, H, W), got {env.shape}")
    if env.shape[2] != 2 * env.shape[1]:
        raise ValueError(f"env map must be 2:1 equirectangular, got {env.shape[2]}x{env.shape[1]}")
    if not np.all(np.isfinite(env)) or np.any(env < 0):
        raise ValueError("env map radiance must be finite and non-negative")
    return env


def flatten_envmap(env: np.ndarray):
    """(dirs (T, 3), weights (T,), radiance (T, 3)) for kernel calls."""
    env = check_envmap(env)
    _, h, w = env.shape
    dirs, _, _, weights = envmap_grid(w, h)
    return dirs.reshape(-1, 3), weights.reshape(-1), env.reshape(3, -1).T.astype(np.float64)


def ball_geometry(size: int):
    """Per-pixel normals ``(3, S, S)`` and boolean coverage mask ``(S, S)``."""
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    x = np.broadcast_to(c[None, :], (size, size))
    y = np.broadcast_to(-c[:, None], (size, size))
    r2 = x * x + y * y
    mask = r2 < 1.0
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack([x, y, z]) * mask
    return n, mask


def render_gray_ball(env: np.ndarray, roughness: float = 0.5, size: int = 128,
                     albedo: float = GRAY_ALBEDO, specular: bool = True) -> np.ndarray:
    """Shade an orthographic gray sphere under ``env``.

    Lambertian diffuse (albedo ``albedo``) plus a GGX coat of weight
    ``BALL_COAT`` with ``alpha = roughness**2`` and ``F0 = 0.04``, viewed from
    +z.  Integration is a Riemann sum over env texels.
    """
    if not roughness > 0:
        raise ValueError("roughness must be positive")
    dirs, weights, radiance = flatten_envmap(env)
    normals, mask = ball_geometry(size)
    pix = normals[:, mask].T
    shade = albedo * kernels.diffuse_integrate(pix, dirs, weights, radiance)
    if specular:
        alpha = np.full(pix.shape[0], float(roughness) ** 2)
        base, edge = kernels.specular_integrate(
            pix, np.array([0.0, 0.0, 1.0]), alpha, dirs, weights, radiance)
        shade = shade + BALL_COAT * (BALL_F0 * base + edge)
    out = np.zeros((3, size, size), dtype=np.float64)
    out[:, mask] = shade.T
    return out.astype(np.float32)


def _masked_bilinear(img: np.ndarray, mask: np.ndarray, i: np.ndarray, j: np.ndarray):
    # bilinear lookup that ignores uncovered pixels, both axes clamped
    h, w = mask.shape
    i = np.clip(i, 0.0, h - 1.0)
    j = np.clip(j, 0.0, w - 1.0)
    i0 = np.floor(i).astype(np.int64)
    j0 = np.floor(j).astype(np.int64)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fi, fj = i - i0, j - j0
    m = mask.astype(np.float64)
    acc = np.zeros((img.shape[0],) + i.shape)
    wsum = np.zeros(i.shape)
    for ii, jj, wt in ((i0, j0, (1 - fi) * (1 - fj)), (i0, j1, (1 - fi) * fj),
                       (i1, j0, fi * (1 - fj)), (i1, j1, fi * fj)):
        wm = wt * m[ii, jj]
        acc += img[:, ii, jj] * wm
        wsum += wm
    return acc / np.maximum(wsum, 1e-12)


def unfold_ball_to_envmap(ball: np.ndarray, out_width: int = DIFFUSE_ENV_SIZE[0],
                          out_height: int = DIFFUSE_ENV_SIZE[1]) -> np.ndarray:
    """Resample a gray ball into an equirectangular diffuse map.

    Front-hemisphere texels read the ball pixel whose normal equals the texel
    direction; back-hemisphere texels use the silhouette point (``d_z`` clamped
    to 0).  Returns ``(3, out_height, out_width)`` float32.
    """
    ball = np.asarray(ball, dtype=np.float64)
    if ball.ndim != 3 or ball.shape[1] != ball.shape[2]:
        raise ValueError(f"gray ball must be square (C, S, S), got {ball.shape}")
    if out_width < 2 or out_height < 1:
        raise ValueError(f"degenerate output size {out_width}x{out_height}")
    size = ball.shape[1]
    dirs, _, _, _ = envmap_grid(out_width, out_height)
    dx, dy, dz = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    back = dz < 0
    rim = np.hypot(dx, dy)
    scale = np.where(back & (rim > 0), 1.0 / np.maximum(rim, 1e-12), 1.0)
    dx, dy = dx * scale, dy * scale
    j = (dx + 1.0) * 0.5 * size - 0.5
    i = (1.0 - dy) * 0.5 * size - 0.5
    _, mask = ball_geometry(size)
    return _masked_bilinear(ball, mask, i, j).astype(np.float32)


@dataclass(frozen=True)
class LightSample:
    azimuth_deg: float
    elevation_deg: float
    strength: float
    kind: str  # "point_only" | "point_plus_hdri"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LightSample":
        return cls(**json.loads(text))

    @property
    def direction(self) -> np.ndarray:
        theta = math.radians(self.elevation_deg)
        phi = math.radians(((self.azimuth_deg + 180.0) % 360.0) - 180.0)
        return direction(theta, phi)


def sample_light_condition(rng: Rng) -> LightSample:
    azimuth = float(rng.uniform(0.0, 360.0))
    lo, hi = ELEVATION_RANGE
    while True:
        elevation = float(rng.normal(ELEVATION_MEAN, ELEVATION_STD))
        if lo <= elevation <= hi:
            break
    strength = float(rng.uniform(*STRENGTH_RANGE))
    kind = "point_only" if rng.random() < POINT_ONLY_PROB else "point_plus_hdri"
    return LightSample(azimuth, elevation, strength, kind)


def point_light_envmap(sample: LightSample, width: int = DEFAULT_ENV_SIZE[0],
                       height: int = DEFAULT_ENV_SIZE[1], ambient: float = 0.0,
                       sigma_deg: float = LOBE_SIGMA_DEG) -> np.ndarray:
    """Ambient floor plus a Gaussian lobe of peak ``strength`` at the light."""
    dirs, _, _, _ = envmap_grid(width, height)
    cosang = np.clip(dirs @ sample.direction, -1.0, 1.0)
    ang = np.arccos(cosang)
    sigma = math.radians(sigma_deg)
    lobe = sample.strength * np.exp(-0.5 * (ang / sigma) ** 2)
    env = ambient + lobe
    return np.broadcast_to(env, (3, height, width)).astype(np.float32)


def smooth_random_envmap(rng: Rng, width: int = DEFAULT_ENV_SIZE[0],
                         height: int = DEFAULT_ENV_SIZE[1], n_lobes: int = 4,
                         level: float = 1.0) -> np.ndarray:
    """A procedural HDRI stand-in: sky gradient plus a few broad coloured lobes."""
    dirs, _, _, _ = envmap_grid(width, height)
    up = dirs[..., 1]
    tint = rng.uniform(0.6, 1.0, size=3)
    env = np.empty((3, height, width))
    for c in range(3):
        env[c] = level * tint[c] * (0.35 + 0.25 * up)
    for _ in range(n_lobes):
        theta = rng.uniform(0.2, 0.8) * np.pi
        phi = rng.uniform(-np.pi, np.pi)
        d = direction(theta, phi)
        width_rad = rng.uniform(0.35, 0.9)
        amp = level * rng.uniform(0.3, 1.2)
        colour = rng.uniform(0.5, 1.0, size=3)
        ang = np.arccos(np.clip(dirs @ d, -1.0, 1.0))
        lobe = np.exp(-0.5 * (ang / width_rad) ** 2)
        env += amp * colour[:, None, None] * lobe[None]
    return env.astype(np.float32)
