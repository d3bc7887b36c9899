"""Analytic scene description and orthographic rasterisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Tuple, Union

import numpy as np


@dataclass(frozen=True)
class BrdfParams:
    albedo: Tuple[float, float, float]
    roughness: float
    metallic: float

    def __post_init__(self):
        if len(self.albedo) != 3 or not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError(f"albedo must be 3 values in [0, 1], got {self.albedo}")
        if not 0.0 < self.roughness <= 1.0:
            raise ValueError(f"roughness must be in (0, 1], got {self.roughness}")
        if not 0.0 <= self.metallic <= 1.0:
            raise ValueError(f"metallic must be in [0, 1], got {self.metallic}")


@dataclass(frozen=True)
class Sphere:
    center: Tuple[float, float, float]
    radius: float
    material: BrdfParams
    kind: str = "sphere"


@dataclass(frozen=True)
class GroundPlane:
    """Horizontal square ``|x|, |z| <= half_size`` at ``y = height``, facing +y."""

    height: float
    half_size: float
    material: BrdfParams
    kind: str = "ground"


@dataclass(frozen=True)
class BoxFace:
    """Axis-aligned rectangle with normal ``sign * axis`` (axis "x" or "z")."""

    center: Tuple[float, float, float]
    axis: str
    sign: int
    half_extents: Tuple[float, float]  # (along the other horizontal axis, along y)
    material: BrdfParams
    kind: str = "box_face"


Primitive = Union[Sphere, GroundPlane, BoxFace]


@dataclass(frozen=True)
class Camera:
    """Orthographic orbit camera looking at ``target``."""

    azimuth_deg: float = 0.0
    elevation_deg: float = 25.0
    half_extent: float = 1.0
    target: Tuple[float, float, float] = (0.0, 0.35, 0.0)

    def rotation(self) -> np.ndarray:
        """Rows are the camera x, y, z axes in world space."""
        a = math.radians(self.azimuth_deg)
        e = math.radians(self.elevation_deg)
        back = np.array([math.cos(e) * math.sin(a), math.sin(e), math.cos(e) * math.cos(a)])
        right = np.cross([0.0, 1.0, 0.0], back)
        right /= np.linalg.norm(right)
        up = np.cross(back, right)
        return np.stack([right, up, back])

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return (np.asarray(points_world) - np.asarray(self.target)) @ self.rotation().T

    def orbit(self, view: int, n_views: int) -> "Camera":
        return replace(self, azimuth_deg=(self.azimuth_deg + 360.0 * view / n_views) % 360.0)


@dataclass(frozen=True)
class SceneSpec:
    objects: Tuple[Primitive, ...]
    camera: Camera = field(default_factory=Camera)
    seed: int = 0

    def __post_init__(self):
        if not self.objects:
            raise ValueError("scene has no objects")

    @property
    def spheres(self) -> Tuple[Sphere, ...]:
        return tuple(o for o in self.objects if isinstance(o, Sphere))


@dataclass
class Raster:
    """Per-pixel surface attributes in camera space."""

    mask: np.ndarray  # (H, W) bool
    points: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (3, H, W), zero off-surface
    albedo: np.ndarray  # (3, H, W)
    roughness: np.ndarray  # (H, W)
    metallic: np.ndarray  # (H, W)
    owner: np.ndarray  # (H, W) sphere index, -1 for planes / background


def _plane_hits(x, y, p0, n):
    # orthographic rays along -z against the plane n . (p - p0) = 0
    if n[2] <= 1e-6:
        return None
    z = p0[2] - (n[0] * (x - p0[0]) + n[1] * (y - p0[1])) / n[2]
    return z


def rasterize(scene: SceneSpec, resolution: int, camera: Camera = None) -> Raster:
    camera = camera or scene.camera
    rot = camera.rotation()
    h = w = resolution
    c = ((np.arange(w) + 0.5) / w * 2.0 - 1.0) * camera.half_extent
    x = np.broadcast_to(c[None, :], (h, w))
    y = np.broadcast_to(-c[:, None], (h, w))
    depth = np.full((h, w), -np.inf)
    normals = np.zeros((3, h, w))
    albedo = np.zeros((3, h, w))
    rough = np.zeros((h, w))
    metal = np.zeros((h, w))
    owner = np.full((h, w), -1, dtype=np.int64)
    sphere_index = 0
    for obj in scene.objects:
        m = obj.material
        if isinstance(obj, Sphere):
            cc = camera.to_camera(obj.center)
            dx, dy = x - cc[0], y - cc[1]
            d2 = dx * dx + dy * dy
            r2 = obj.radius**2
            inside = d2 < r2
            z = cc[2] + np.sqrt(np.where(inside, r2 - d2, 0.0))
            nrm = np.stack([dx, dy, z - cc[2]]) / obj.radius
            own = sphere_index
            sphere_index += 1
        else:
            if isinstance(obj, GroundPlane):
                nw = np.array([0.0, 1.0, 0.0])
                p0w = np.array([0.0, obj.height, 0.0])
            else:
                nw = np.zeros(3)
                nw[0 if obj.axis == "x" else 2] = float(obj.sign)
                p0w = np.asarray(obj.center, dtype=np.float64)
            nc = rot @ nw
            p0c = camera.to_camera(p0w)
            z = _plane_hits(x, y, p0c, nc)
            if z is None:
                continue
            pts = np.stack([x, y, z], axis=-1)
            pw = pts @ rot + np.asarray(camera.target)
            if isinstance(obj, GroundPlane):
                inside = (np.abs(pw[..., 0]) <= obj.half_size) & (np.abs(pw[..., 2]) <= obj.half_size)
            else:
                other = 2 if obj.axis == "x" else 0
                inside = ((np.abs(pw[..., other] - obj.center[other]) <= obj.half_extents[0])
                          & (np.abs(pw[..., 1] - obj.center[1]) <= obj.half_extents[1]))
            nrm = np.broadcast_to(nc[:, None, None], (3, h, w))
            own = -1
        closer = inside & (z > depth)
        depth = np.where(closer, z, depth)
        normals = np.where(closer[None], nrm, normals)
        albedo = np.where(closer[None], np.asarray(m.albedo)[:, None, None], albedo)
        rough = np.where(closer, m.roughness, rough)
        metal = np.where(closer, m.metallic, metal)
        owner = np.where(closer, own, owner)
    mask = np.isfinite(depth)
    points = np.stack([x, y, np.where(mask, depth, 0.0)], axis=-1)
    return Raster(mask, points, normals, albedo, rough, metal, owner)


def spheres_in_camera(scene: SceneSpec, camera: Camera = None) -> np.ndarray:
    """(K, 4) array of camera-space sphere centres and radii."""
    camera = camera or scene.camera
    rows = [list(camera.to_camera(s.center)) + [s.radius] for s in scene.spheres]
    return np.array(rows, dtype=np.float64).reshape(-1, 4)
