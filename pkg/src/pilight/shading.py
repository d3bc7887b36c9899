"""Lambertian diffuse (brute force and lookup), GGX specular, and A*D + S.

Normals passed to these functions are decoded camera-space unit vectors,
``(3, H, W)``; zero vectors mark background and shade to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Camera, SceneSpec, rasterize, spheres_in_camera
from .imagecore import grid_sample
from .lighting import ball_geometry, flatten_envmap

DIELECTRIC_F0 = 0.04
VIEW = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ShadingResult:
    diffuse: np.ndarray
    specular: np.ndarray
    composed: np.ndarray


@dataclass(frozen=True)
class IntrinsicSet:
    albedo: np.ndarray  # (3, H, W)
    normals: np.ndarray  # (3, H, W) decoded unit vectors
    roughness: np.ndarray  # (1, H, W)
    metallic: np.ndarray  # (1, H, W)
    mask: np.ndarray  # (1, H, W) in {0, 1}

    def __eq__(self, other):
        if not isinstance(other, IntrinsicSet):
            return NotImplemented
        return all(np.array_equal(getattr(self, k), getattr(other, k))
                   for k in ("albedo", "normals", "roughness", "metallic", "mask"))


def _pixels(normals: np.ndarray) -> np.ndarray:
    normals = np.asarray(normals, dtype=np.float64)
    if normals.ndim != 3 or normals.shape[0] != 3:
        raise ValueError(f"normals must be (3, H, W), got {normals.shape}")
    return normals.reshape(3, -1).T


def diffuse_bruteforce(env: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Riemann sum of L(w) max(0, n.w) sin(theta) dtheta dphi over all texels."""
    dirs, weights, radiance = flatten_envmap(env)
    pix = _pixels(normals)
    d = kernels.diffuse_integrate(pix, dirs, weights, radiance)
    return d.T.reshape((3,) + normals.shape[1:])


def diffuse_bruteforce_shadowed(env: np.ndarray, normals: np.ndarray, points: np.ndarray,
                                owner: np.ndarray, spheres: np.ndarray) -> np.ndarray:
    """As :func:`diffuse_bruteforce`, with texels blocked by analytic spheres removed."""
    dirs, weights, radiance = flatten_envmap(env)
    pix = _pixels(normals)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = kernels.diffuse_integrate_shadowed(pts, pix, np.asarray(owner).reshape(-1),
                                           spheres, dirs, weights, radiance)
    return d.T.reshape((3,) + normals.shape[1:])


def normal_to_uv(normals: np.ndarray) -> np.ndarray:
    """Equirectangular lookup coordinates for each normal, ``(2, H, W)``.

    ``u = atan2(n_x, n_z) / pi`` and ``v = (2 / pi) acos(n_y) - 1``; atan2 keeps
    grazing normals (n_z = 0) well defined.
    """
    n = np.asarray(normals, dtype=np.float64)
    u = np.arctan2(n[0], n[2]) / np.pi
    v = (2.0 / np.pi) * np.arccos(np.clip(n[1], -1.0, 1.0)) - 1.0
    return np.stack([u, v])


def diffuse_lookup(e_diff: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Cast-shadow-free diffuse shading by sampling a diffuse env map at each normal."""
    return grid_sample(e_diff, normal_to_uv(normals))


def ball_from_diffuse_map(e_diff: np.ndarray, size: int) -> np.ndarray:
    """Re-render a gray ball from an unfolded diffuse map by normal lookup."""
    normals, mask = ball_geometry(size)
    return (diffuse_lookup(e_diff, normals) * mask).astype(np.float32)


def fresnel_f0(albedo: np.ndarray, metallic: np.ndarray) -> np.ndarray:
    return DIELECTRIC_F0 * (1.0 - metallic) + albedo * metallic


def specular_ggx(env: np.ndarray, normals: np.ndarray, params_map: np.ndarray,
                 albedo: np.ndarray = None, view: np.ndarray = VIEW) -> np.ndarray:
    """Cook-Torrance specular (GGX D, separable Smith G, Schlick F) per pixel.

    ``params_map`` is ``(2, H, W)`` roughness and metallic; ``alpha = roughness**2``.
    Back-facing pixels (n.v <= 0) are zero.
    """
    params_map = np.asarray(params_map, dtype=np.float64)
    h, w = params_map.shape[1:]
    rough, metal = params_map[0], params_map[1]
    if np.any(rough <= 0):
        raise ValueError("roughness must be positive")
    if albedo is None:
        albedo = np.ones((3, h, w))
    view = np.asarray(view, dtype=np.float64)
    view = view / np.linalg.norm(view)
    dirs, weights, radiance = flatten_envmap(env)
    pix = _pixels(normals)
    base, edge = kernels.specular_integrate(pix, view, (rough**2).reshape(-1),
                                            dirs, weights, radiance)
    f0 = fresnel_f0(np.asarray(albedo, dtype=np.float64), metal[None])
    return f0 * base.T.reshape(3, h, w) + edge.T.reshape(3, h, w)


def compose(albedo: np.ndarray, diffuse: np.ndarray, specular: np.ndarray) -> np.ndarray:
    """``A * D + S`` element-wise, no clamping."""
    albedo, diffuse, specular = np.asarray(albedo), np.asarray(diffuse), np.asarray(specular)
    if not (albedo.shape == diffuse.shape == specular.shape):
        raise ValueError(f"shape mismatch: {albedo.shape}, {diffuse.shape}, {specular.shape}")
    return albedo * diffuse + specular


def specular_residual(composed: np.ndarray, albedo: np.ndarray, diffuse: np.ndarray) -> np.ndarray:
    return np.asarray(composed) - np.asarray(albedo) * np.asarray(diffuse)


def render_scene(scene: SceneSpec, env: np.ndarray, resolution: int = 64,
                 camera: Camera = None, shadows: bool = True, specular: bool = True):
    """Analytic render of ``scene`` under a camera-space ``env``.

    Returns ``(ShadingResult, IntrinsicSet)``; all arrays float32.
    """
    if not scene.objects:
        raise ValueError("scene has no objects")
    camera = camera or scene.camera
    r = rasterize(scene, resolution, camera)
    mask = r.mask
    spheres = spheres_in_camera(scene, camera)
    if shadows and len(spheres):
        diffuse = diffuse_bruteforce_shadowed(env, r.normals, r.points, r.owner, spheres)
    else:
        diffuse = diffuse_bruteforce(env, r.normals)
    if specular:
        params = np.stack([np.where(mask, r.roughness, 1.0), r.metallic])
        spec = specular_ggx(env, r.normals, params, r.albedo) * mask
    else:
        spec = np.zeros_like(diffuse)
    diffuse = (diffuse * mask).astype(np.float32)
    spec = np.maximum(spec, 0.0).astype(np.float32)
    albedo = r.albedo.astype(np.float32)
    composed = compose(albedo, diffuse, spec)
    intr = IntrinsicSet(
        albedo=albedo,
        normals=r.normals.astype(np.float32),
        roughness=r.roughness[None].astype(np.float32),
        metallic=r.metallic[None].astype(np.float32),
        mask=mask[None].astype(np.float32),
    )
    return ShadingResult(diffuse, spec, composed), intr
