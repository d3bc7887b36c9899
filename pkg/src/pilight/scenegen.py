"""Procedural dataset generation: scenes, lighting per view, records on disk."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import imagecore as ic
from .geometry import BoxFace, BrdfParams, Camera, GroundPlane, SceneSpec, Sphere
from .imagecore import Rng
from .lighting import (
    LightSample,
    point_light_envmap,
    render_gray_ball,
    sample_light_condition,
    smooth_random_envmap,
)
from .shading import IntrinsicSet, render_scene

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "object_test", "scene_test")
INTRINSIC_NAMES = ("albedo", "normal", "roughness", "metallic")
METALLIC_ZERO_PROB = 0.7
#: Global radiance scale so that rendered images sit mostly inside [0, 1].
EXPOSURE = 0.25
#: Point-light strength multiplier when an HDRI is also present.
HDRI_POINT_SCALE = 0.5
AMBIENT_RANGE = (0.2, 0.6)
MAX_TRIES = 1000


class SceneGenerationError(RuntimeError):
    pass


class DatasetError(RuntimeError):
    pass


def _material(rng: Rng) -> BrdfParams:
    albedo = tuple(float(a) for a in rng.uniform(0.1, 0.95, size=3))
    roughness = float(rng.uniform(0.15, 1.0))
    metallic = 0.0 if rng.random() < METALLIC_ZERO_PROB else float(rng.uniform(0.5, 1.0))
    return BrdfParams(albedo, roughness, metallic)


def _sphere_ok(center, radius, objects) -> bool:
    for o in objects:
        if isinstance(o, Sphere):
            if np.linalg.norm(np.subtract(center, o.center)) <= radius + o.radius + 0.02:
                return False
        elif isinstance(o, BoxFace):
            k = 0 if o.axis == "x" else 2
            if abs(center[k] - o.center[k]) <= radius + 0.02:
                return False
    return True


def generate_scene(rng: Rng, complexity: int) -> SceneSpec:
    """Rejection-sample ``complexity`` non-intersecting primitives.

    The first primitive is always a sphere; later ones are a ground plane (at
    most one), an axis-aligned wall, or further spheres.
    """
    if not 1 <= complexity <= 8:
        raise ValueError(f"complexity must be in [1, 8], got {complexity}")
    seed = rng.seed
    objects: List = []
    has_ground = False
    tries = 0
    while len(objects) < complexity:
        tries += 1
        if tries > MAX_TRIES:
            raise SceneGenerationError(f"could not place {complexity} primitives in {MAX_TRIES} tries")
        roll = rng.random() if objects else 1.0
        material = _material(rng)
        if roll < 0.3 and not has_ground:
            objects.append(GroundPlane(0.0, float(rng.uniform(1.2, 2.0)), material))
            has_ground = True
        elif roll < 0.45:
            axis = "z" if rng.random() < 0.6 else "x"
            pos = float(rng.uniform(0.75, 0.95))
            sign = 1 if (axis == "z" or rng.random() < 0.5) else -1
            hx, hy = float(rng.uniform(0.5, 0.9)), float(rng.uniform(0.4, 0.8))
            center = [0.0, hy, 0.0]
            center[0 if axis == "x" else 2] = -sign * pos
            face = BoxFace(tuple(center), axis, sign, (hx, hy), material)
            if all(_sphere_ok(s.center, s.radius, [face]) for s in objects if isinstance(s, Sphere)):
                objects.append(face)
        else:
            radius = float(rng.uniform(0.18, 0.4))
            r = 0.55 * np.sqrt(rng.random())
            a = rng.uniform(0.0, 2.0 * np.pi)
            center = (float(r * np.cos(a)), radius + float(rng.uniform(0.0, 0.1)), float(r * np.sin(a)))
            if _sphere_ok(center, radius, objects):
                objects.append(Sphere(center, radius, material))
    if complexity == 1:
        # object-centric framing: the lone sphere fills most of the frame
        s = objects[0]
        camera = Camera(target=s.center, half_extent=1.25 * s.radius)
    else:
        camera = Camera()
    return SceneSpec(tuple(objects), camera, seed)


@dataclass
class DatasetRecord:
    scene_id: int
    view: int
    light: int
    split: str
    input_image: np.ndarray
    light_condition: np.ndarray
    intrinsics: IntrinsicSet
    diffuse_gt: np.ndarray
    specular_gt: np.ndarray
    env: np.ndarray
    light_sample: LightSample
    one_hot_label: np.ndarray
    seed: int = 0
    relit_targets: List = field(default_factory=list, repr=False)

    @property
    def key(self) -> str:
        return f"scene_{self.scene_id:04d}/view_{self.view:02d}_light_{self.light:02d}"


def build_envmap(sample: LightSample, rng: Rng, width: int = 64, height: int = 32) -> np.ndarray:
    ambient = float(rng.uniform(*AMBIENT_RANGE))
    if sample.kind == "point_plus_hdri":
        dim = LightSample(sample.azimuth_deg, sample.elevation_deg,
                          sample.strength * HDRI_POINT_SCALE, sample.kind)
        env = point_light_envmap(dim, width, height, ambient)
        env = env + smooth_random_envmap(rng, width, height, level=1.0)
    else:
        env = point_light_envmap(sample, width, height, ambient)
    return (env * EXPOSURE).astype(np.float32)


def one_hot(index: int, n: int = 4) -> np.ndarray:
    v = np.zeros(n, dtype=np.int64)
    v[index % n] = 1
    return v


def generate_record(scene: SceneSpec, n_views: int, n_lights: int, rng: Rng,
                    resolution: int = 64, scene_id: int = 0, split: str = "train",
                    shadows: bool = True) -> List[DatasetRecord]:
    """Render every (view, light) pair of ``scene``; siblings become relit targets."""
    if n_views < 1 or n_lights < 1:
        raise ValueError("n_views and n_lights must be >= 1")
    records = []
    counter = 0
    for v in range(n_views):
        camera = scene.camera.orbit(v, n_views)
        group = []
        for li in range(n_lights):
            sample = sample_light_condition(rng)
            env = build_envmap(sample, rng)
            shade, intr = render_scene(scene, env, resolution, camera, shadows=shadows)
            ball = render_gray_ball(env, 0.5, size=resolution)
            group.append(DatasetRecord(
                scene_id=scene_id, view=v, light=li, split=split,
                input_image=shade.composed, light_condition=ball, intrinsics=intr,
                diffuse_gt=shade.diffuse, specular_gt=shade.specular, env=env,
                light_sample=sample, one_hot_label=one_hot(counter), seed=scene.seed))
            counter += 1
        link_relit_targets(group)
        records.extend(group)
    return records


def link_relit_targets(group: Sequence[DatasetRecord]):
    for rec in group:
        rec.relit_targets = [(o.light_condition, o.input_image) for o in group if o is not rec]


@dataclass
class DatasetConfig:
    n_scenes: int = 64
    n_views: int = 4
    n_lights: int = 4
    resolution: int = 64
    seed: int = 42
    max_complexity: int = 4
    object_test: int = 4
    scene_test: int = 4
    shadows: bool = True


def scene_split(index: int, cfg: DatasetConfig) -> str:
    n_train = cfg.n_scenes - cfg.object_test - cfg.scene_test
    if n_train < 0:
        raise ValueError("more test scenes than scenes")
    if index < n_train:
        return "train"
    return "object_test" if index < n_train + cfg.object_test else "scene_test"


def _scene_records(job) -> List[DatasetRecord]:
    i, seed, cfg = job
    split = scene_split(i, cfg)
    rng = Rng(seed)
    complexity = 1 if split == "object_test" else int(rng.integers(1, cfg.max_complexity + 1))
    scene = generate_scene(rng, complexity)
    return generate_record(scene, cfg.n_views, cfg.n_lights, rng, cfg.resolution,
                           scene_id=i, split=split, shadows=cfg.shadows)


def generate_dataset(cfg: DatasetConfig, workers: int = 1) -> List[DatasetRecord]:
    """Render every scene; ``workers > 1`` uses processes, results stay in scene order."""
    master = Rng(cfg.seed)
    jobs = [(i, master.spawn_seed(), cfg) for i in range(cfg.n_scenes)]
    records: List[DatasetRecord] = []
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for group in pool.map(_scene_records, jobs):
                records.extend(group)
    else:
        for job in jobs:
            records.extend(_scene_records(job))
            log.info("scene %d/%d rendered", job[0] + 1, cfg.n_scenes)
    return records


# ---------------------------------------------------------------------------
# disk layout

_LDR = {"input.png": "input_image", "albedo.png": "albedo", "roughness.png": "roughness",
        "metallic.png": "metallic", "mask.png": "mask"}
_HDR = ("ball.pfm", "normal.pfm", "diffuse.pfm", "specular.pfm", "env.pfm")


def write_dataset(records: Sequence[DatasetRecord], root) -> dict:
    """Write records under ``root``; ``manifest.json`` is written last."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        d = root / rec.key
        d.mkdir(parents=True, exist_ok=True)
        intr = rec.intrinsics
        ic.write_png(d / "input.png", rec.input_image)
        ic.write_png(d / "albedo.png", intr.albedo)
        ic.write_png(d / "roughness.png", intr.roughness)
        ic.write_png(d / "metallic.png", intr.metallic)
        ic.write_png(d / "mask.png", intr.mask)
        ic.write_pfm(d / "ball.pfm", rec.light_condition)
        ic.write_pfm(d / "normal.pfm", ic.encode_normals(intr.normals))
        ic.write_pfm(d / "diffuse.pfm", rec.diffuse_gt)
        ic.write_pfm(d / "specular.pfm", rec.specular_gt)
        ic.write_pfm(d / "env.pfm", rec.env)
        entries.append({
            "key": rec.key, "scene_id": rec.scene_id, "view": rec.view, "light": rec.light,
            "split": rec.split, "seed": rec.seed,
            "light_sample": asdict(rec.light_sample),
            "one_hot_label": [int(x) for x in rec.one_hot_label],
            "files": sorted(list(_LDR) + list(_HDR)),
        })
    manifest = {"schema": SCHEMA_VERSION, "count": len(entries), "records": entries}
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def _need(path: Path) -> Path:
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    return path


def read_dataset(root, splits: Optional[Sequence[str]] = None) -> List[DatasetRecord]:
    root = Path(root)
    manifest_path = _need(root / "manifest.json")
    with open(manifest_path) as f:
        manifest = json.load(f)
    if manifest.get("schema") != SCHEMA_VERSION:
        raise DatasetError(f"{manifest_path}: unsupported schema {manifest.get('schema')!r}")
    if manifest.get("count") != len(manifest["records"]):
        raise DatasetError(f"{manifest_path}: count does not match record list")
    records = []
    for e in manifest["records"]:
        if splits is not None and e["split"] not in splits:
            continue
        d = root / e["key"]
        if not d.is_dir():
            raise DatasetError(f"manifest lists {d} but it is not on disk")
        intr = IntrinsicSet(
            albedo=ic.read_png(_need(d / "albedo.png")),
            normals=ic.decode_normals(ic.read_pfm(_need(d / "normal.pfm"))).astype(np.float32),
            roughness=ic.read_png(_need(d / "roughness.png")),
            metallic=ic.read_png(_need(d / "metallic.png")),
            mask=ic.read_png(_need(d / "mask.png")),
        )
        records.append(DatasetRecord(
            scene_id=e["scene_id"], view=e["view"], light=e["light"], split=e["split"],
            input_image=ic.read_png(_need(d / "input.png")),
            light_condition=ic.read_pfm(_need(d / "ball.pfm")),
            intrinsics=intr,
            diffuse_gt=ic.read_pfm(_need(d / "diffuse.pfm")),
            specular_gt=ic.read_pfm(_need(d / "specular.pfm")),
            env=ic.read_pfm(_need(d / "env.pfm")),
            light_sample=LightSample(**e["light_sample"]),
            one_hot_label=np.asarray(e["one_hot_label"], dtype=np.int64),
            seed=e["seed"]))
    groups: Dict[tuple, list] = {}
    for r in records:
        groups.setdefault((r.scene_id, r.view), []).append(r)
    for g in groups.values():
        link_relit_targets(g)
    return records
