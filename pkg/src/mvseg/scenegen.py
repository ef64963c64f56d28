"""Procedural multi-view scene generator.

Renders simple primitive scenes (spheres, boxes, plane patches) with analytic
ray casting, producing per-view images, world-coordinate pointmaps with strict
pixel-point correspondence, confidence maps, and ground-truth object masks.
Everything is deterministic in (config, seed).
"""

from __future__ import annotations

import copy
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from PIL import Image


class ConfigurationError(ValueError):
    """Raised for invalid generator configuration."""


class BundleIOError(RuntimeError):
    """Raised when a scene bundle directory is missing or corrupt."""


PRIMITIVES = ("sphere", "box", "plane_patch")


@dataclass(eq=False)
class ObjectSpec:
    object_id: str
    primitive: str
    center: np.ndarray  # (3,)
    size: np.ndarray    # (3,) full extents; sphere uses size[0] as diameter
    albedo: np.ndarray  # (3,) in [0, 1]

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        self.albedo = np.asarray(self.albedo, dtype=np.float64)
        if self.primitive not in PRIMITIVES:
            raise ConfigurationError(f"unknown primitive {self.primitive!r}")
        if not np.all(self.size > 0):
            raise ConfigurationError("object size components must be > 0")


@dataclass(eq=False)
class CameraPose:
    position: np.ndarray   # (3,)
    rotation: np.ndarray   # (3, 3) world-from-camera; columns = right, down, forward
    fov_y_deg: float
    far: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)


@dataclass(eq=False)
class View:
    image: np.ndarray       # (H, W, 3) float32 in [0, 1]
    pointmap: np.ndarray    # (H, W, 3) float32 world coordinates
    confidence: np.ndarray  # (H, W) float32 in [0, 1]
    masks: dict             # object_id -> (H, W) uint8 in {0, 1}

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(eq=False)
class SceneBundle:
    scene_id: str
    views: list  # list[View]
    objects: list  # list[ObjectSpec]
    rng_seed: int
    cameras: list = field(default_factory=list)  # list[CameraPose], one per view

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def height(self) -> int:
        return self.views[0].height

    @property
    def width(self) -> int:
        return self.views[0].width

    def object_ids(self) -> list:
        return [o.object_id for o in self.objects]


@dataclass
class SceneGenConfig:
    n_views: int = 8
    height: int = 64
    width: int = 64
    n_objects: int = 3
    camera_mode: str = "orbit"          # "orbit" | "hemisphere"
    orbit_radius: float = 3.5
    orbit_elevation_deg: float = 25.0
    orbit_span_deg: float = 360.0       # arc covered by the views; small = video-like baseline
    orbit_start_deg: float = None       # fixed first-view azimuth; None = random per scene
    fov_y_deg: float = 45.0
    far: float = 8.0
    placement_radius: float = 1.0
    size_range: tuple = (0.5, 1.3)
    primitives: tuple = ("sphere", "box")
    albedo_range: tuple = (0.15, 0.95)  # degenerate range = look-alike objects
    scene_id: str = "scene"


# ---------------------------------------------------------------------------
# Camera and ray helpers

def look_at_camera(position, target, fov_y_deg, far) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    world_up = np.array([0.0, 0.0, 1.0])
    if abs(np.dot(forward, world_up)) > 0.999:
        world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)  # image rows grow downward
    rotation = np.stack([right, down, forward], axis=1)
    return CameraPose(position=position, rotation=rotation, fov_y_deg=fov_y_deg, far=far)


def camera_ray_directions(camera: CameraPose, height: int, width: int) -> np.ndarray:
    """Unit world-space ray direction through the center of every pixel, (H, W, 3)."""
    f = (height / 2.0) / math.tan(math.radians(camera.fov_y_deg) / 2.0)
    rows = np.arange(height, dtype=np.float64) + 0.5 - height / 2.0
    cols = np.arange(width, dtype=np.float64) + 0.5 - width / 2.0
    cc, rr = np.meshgrid(cols, rows)
    dirs_cam = np.stack([cc / f, rr / f, np.ones_like(rr)], axis=-1)
    dirs_world = dirs_cam @ camera.rotation.T
    norms = np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    return dirs_world / norms


# ---------------------------------------------------------------------------
# Analytic intersections

def _intersect_sphere(origin, dirs, center, radius):
    oc = origin - center
    b = dirs @ oc
    c = float(oc @ oc) - radius * radius
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = -b - sq
    t_far = -b + sq
    t = np.where(t > 1e-9, t, t_far)  # camera inside: take exit point
    t = np.where(hit & (t > 1e-9), t, np.inf)
    pts = origin + t[..., None] * dirs
    normals = (pts - center) / radius
    return t, normals


def _intersect_box(origin, dirs, center, half):
    # Slab method, axis-aligned.
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    lo = (center - half - origin) * inv
    hi = (center + half - origin) * inv
    tmin = np.nanmax(np.minimum(lo, hi), axis=-1)
    tmax = np.nanmin(np.maximum(lo, hi), axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(tmin > 1e-9, tmin, tmax)
    t = np.where(hit, t, np.inf)
    pts = origin + t[..., None] * dirs
    rel = (pts - center) / half
    axis = np.argmax(np.abs(rel), axis=-1)
    normals = np.zeros_like(pts)
    idx = np.indices(axis.shape)
    normals[idx[0], idx[1], axis] = np.sign(rel[idx[0], idx[1], axis])
    return t, normals


def _intersect_plane_patch(origin, dirs, center, size):
    # Axis-aligned rectangle with normal +z spanning size[0] x size[1].
    dz = dirs[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (center[2] - origin[2]) / dz
    pts = origin + t[..., None] * dirs
    inside = (
        (np.abs(pts[..., 0] - center[0]) <= size[0] / 2.0)
        & (np.abs(pts[..., 1] - center[1]) <= size[1] / 2.0)
        & (t > 1e-9)
        & np.isfinite(t)
    )
    t = np.where(inside, t, np.inf)
    normals = np.zeros_like(pts)
    normals[..., 2] = -np.sign(dz)
    return t, normals


def _intersect_object(obj: ObjectSpec, origin, dirs):
    if obj.primitive == "sphere":
        return _intersect_sphere(origin, dirs, obj.center, obj.size[0] / 2.0)
    if obj.primitive == "box":
        return _intersect_box(origin, dirs, obj.center, obj.size / 2.0)
    return _intersect_plane_patch(origin, dirs, obj.center, obj.size)


def surface_distance(obj: ObjectSpec, points: np.ndarray) -> np.ndarray:
    """Distance from each point (…, 3) to the object's analytic surface."""
    points = np.asarray(points, dtype=np.float64)
    rel = points - obj.center
    if obj.primitive == "sphere":
        return np.abs(np.linalg.norm(rel, axis=-1) - obj.size[0] / 2.0)
    if obj.primitive == "box":
        q = np.abs(rel) - obj.size / 2.0
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.abs(np.minimum(np.max(q, axis=-1), 0.0))
        return outside + inside
    dz = np.abs(rel[..., 2])
    qx = np.maximum(np.abs(rel[..., 0]) - obj.size[0] / 2.0, 0.0)
    qy = np.maximum(np.abs(rel[..., 1]) - obj.size[1] / 2.0, 0.0)
    return np.sqrt(qx * qx + qy * qy + dz * dz)


# ---------------------------------------------------------------------------
# Scene generation

_LIGHT_DIR = np.array([0.45, -0.35, -0.82])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)


def _render_view(camera: CameraPose, objects, height, width):
    origin = camera.position
    dirs = camera_ray_directions(camera, height, width)

    t_best = np.full((height, width), np.inf)
    hit_idx = np.full((height, width), -1, dtype=np.int64)
    normals = np.zeros((height, width, 3))
    for i, obj in enumerate(objects):
        t, n = _intersect_object(obj, origin, dirs)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        hit_idx = np.where(closer, i, hit_idx)
        normals = np.where(closer[..., None], n, normals)

    # Background pixels land on the per-view far plane so every pixel stays embeddable.
    t_final = np.where(np.isfinite(t_best), t_best, camera.far)
    pointmap = origin + t_final[..., None] * dirs

    shade = 0.35 + 0.65 * np.clip(-(normals @ _LIGHT_DIR), 0.0, 1.0)
    image = np.empty((height, width, 3))
    sky = 0.12 + 0.25 * (dirs[..., 2] * 0.5 + 0.5)
    image[...] = np.stack([sky * 0.7, sky * 0.8, sky], axis=-1)
    for i, obj in enumerate(objects):
        sel = hit_idx == i
        image[sel] = obj.albedo * shade[sel, None]

    # Quantize to 8-bit levels at render time so PNG round-trips are bit-exact.
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    masks = {}
    for i, obj in enumerate(objects):
        masks[obj.object_id] = (hit_idx == i).astype(np.uint8)

    view = View(
        image=image.astype(np.float32),
        pointmap=pointmap.astype(np.float32),
        confidence=np.ones((height, width), dtype=np.float32),
        masks=masks,
    )
    return view


def _sample_objects(config: SceneGenConfig, rng: np.random.Generator):
    objects = []
    lo, hi = config.size_range
    for i in range(config.n_objects):
        primitive = config.primitives[int(rng.integers(len(config.primitives)))]
        size = rng.uniform(lo, hi, 3)
        if primitive == "plane_patch":
            size[:2] *= 1.5
        # Objects may occlude each other from any viewpoint but must not
        # interpenetrate: a merged compound shape has no well-defined
        # per-object mask boundary. Bounding-sphere rejection, shrinking the
        # newcomer when the scene is too crowded to place it.
        for attempt in range(64):
            center = rng.uniform(-config.placement_radius, config.placement_radius, 3)
            center[2] *= 0.5  # keep the scene fairly flat so orbit views see everything
            clear = all(
                np.linalg.norm(center - prev.center)
                >= 0.55 * (size.max() + prev.size.max()) + 0.05
                for prev in objects
            )
            if clear:
                break
            if attempt % 16 == 15:
                size = size * 0.85
        albedo = rng.uniform(*config.albedo_range, 3)
        objects.append(
            ObjectSpec(
                object_id=f"obj{i}",
                primitive=primitive,
                center=center,
                size=size,
                albedo=albedo,
            )
        )
    return objects


def _sample_cameras(config: SceneGenConfig, rng: np.random.Generator):
    cameras = []
    if config.camera_mode == "orbit":
        start = rng.uniform(0.0, 360.0)
        # the draw happens either way so a fixed-start scene keeps the same
        # object layout as its random-start sibling
        if config.orbit_start_deg is not None:
            start = config.orbit_start_deg
        elev = math.radians(config.orbit_elevation_deg)
        for i in range(config.n_views):
            az = math.radians(start + config.orbit_span_deg * i / config.n_views)
            pos = config.orbit_radius * np.array(
                [math.cos(az) * math.cos(elev), math.sin(az) * math.cos(elev), math.sin(elev)]
            )
            cameras.append(look_at_camera(pos, [0, 0, 0], config.fov_y_deg, config.far))
    elif config.camera_mode == "hemisphere":
        for _ in range(config.n_views):
            az = math.radians(rng.uniform(0.0, 360.0))
            elev = math.radians(rng.uniform(10.0, 70.0))
            pos = config.orbit_radius * np.array(
                [math.cos(az) * math.cos(elev), math.sin(az) * math.cos(elev), math.sin(elev)]
            )
            cameras.append(look_at_camera(pos, [0, 0, 0], config.fov_y_deg, config.far))
    else:
        raise ConfigurationError(f"unknown camera_mode {config.camera_mode!r}")
    return cameras


def generate_scene(config: SceneGenConfig, seed: int) -> SceneBundle:
    """Render a deterministic multi-view scene bundle for (config, seed)."""
    if config.n_views < 1:
        raise ConfigurationError("n_views must be >= 1")
    if config.height < 16 or config.width < 16:
        raise ConfigurationError("height and width must be >= 16")
    if not 1 <= config.n_objects <= 8:
        raise ConfigurationError("n_objects must be in [1, 8]")

    rng = np.random.default_rng(seed)
    cameras = _sample_cameras(config, rng)

    # Resample placements until every object is visible somewhere (occlusion can
    # bury an object completely; rare but must not leak into the bundle).
    for _ in range(32):
        objects = _sample_objects(config, rng)
        views = [_render_view(cam, objects, config.height, config.width) for cam in cameras]
        visible = {
            obj.object_id: any(int(v.masks[obj.object_id].sum()) > 0 for v in views)
            for obj in objects
        }
        if all(visible.values()):
            break
    else:
        raise ConfigurationError("could not place all objects visibly; relax the config")

    return SceneBundle(
        scene_id=config.scene_id,
        views=views,
        objects=objects,
        rng_seed=seed,
        cameras=cameras,
    )


def corrupt_pointmap(
    bundle: SceneBundle,
    noise_scale: float,
    low_conf_fraction: float,
    seed: int,
) -> SceneBundle:
    """Inject Gaussian pointmap noise and mark a fraction of pixels low-confidence.

    Base noise has per-axis std = noise_scale x the per-axis std of all pointmap
    coordinates. A randomly chosen ``low_conf_fraction`` of pixels (across all
    views) receives extra noise at 3x that magnitude and confidence drawn from
    U[0, 0.3); everything else keeps confidence >= 0.7. Images and masks are
    never touched.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be non-negative")
    if not 0.0 <= low_conf_fraction <= 1.0:
        raise ValueError("low_conf_fraction must be in [0, 1]")

    out = copy.deepcopy(bundle)
    if noise_scale == 0.0 and low_conf_fraction == 0.0:
        return out

    rng = np.random.default_rng(seed)
    all_points = np.concatenate([v.pointmap.reshape(-1, 3) for v in bundle.views], axis=0)
    axis_std = all_points.astype(np.float64).std(axis=0)

    h, w = bundle.height, bundle.width
    total = bundle.n_views * h * w
    k = int(math.floor(low_conf_fraction * total + 0.5))
    low_flat = rng.choice(total, size=k, replace=False) if k > 0 else np.empty(0, dtype=np.int64)
    low_mask = np.zeros(total, dtype=bool)
    low_mask[low_flat] = True
    low_mask = low_mask.reshape(bundle.n_views, h, w)

    for i, view in enumerate(out.views):
        noise = rng.normal(0.0, 1.0, size=(h, w, 3)) * (noise_scale * axis_std)
        extra = rng.normal(0.0, 1.0, size=(h, w, 3)) * (3.0 * noise_scale * axis_std)
        noise = noise + np.where(low_mask[i][..., None], extra, 0.0)
        view.pointmap = (view.pointmap.astype(np.float64) + noise).astype(np.float32)

        conf = np.clip(view.confidence.astype(np.float64), 0.7, 1.0)
        low_values = rng.uniform(0.0, 0.3, size=(h, w))
        view.confidence = np.where(low_mask[i], low_values, conf).astype(np.float32)

    return out


# ---------------------------------------------------------------------------
# Serialization
#
# Layout: scene.json, views/v{i}.png (8-bit RGB), pointmaps/v{i}.f32 and
# confidence/v{i}.f32 (header-less little-endian float32, row-major,
# channel-last), masks/{object_id}/v{i}.png (0 or 255).

def _write_f32(path, array):
    array.astype("<f4").tofile(path)


def _read_f32(directory, rel, shape):
    path = os.path.join(directory, rel)
    if not os.path.exists(path):
        raise BundleIOError(f"missing file {rel}")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise BundleIOError(f"corrupt file {rel}: expected {expected} floats, got {data.size}")
    return data.reshape(shape)


def save_bundle(bundle: SceneBundle, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    os.makedirs(os.path.join(directory, "views"), exist_ok=True)
    os.makedirs(os.path.join(directory, "pointmaps"), exist_ok=True)
    os.makedirs(os.path.join(directory, "confidence"), exist_ok=True)

    meta = {
        "scene_id": bundle.scene_id,
        "n_views": bundle.n_views,
        "height": bundle.height,
        "width": bundle.width,
        "rng_seed": bundle.rng_seed,
        "objects": [
            {
                "object_id": o.object_id,
                "primitive": o.primitive,
                "center": o.center.tolist(),
                "size": o.size.tolist(),
                "albedo": o.albedo.tolist(),
            }
            for o in bundle.objects
        ],
        "cameras": [
            {
                "position": c.position.tolist(),
                "rotation": c.rotation.tolist(),
                "fov_y_deg": c.fov_y_deg,
                "far": c.far,
            }
            for c in bundle.cameras
        ],
    }
    with open(os.path.join(directory, "scene.json"), "w") as f:
        json.dump(meta, f, indent=2)

    for i, view in enumerate(bundle.views):
        img8 = np.round(view.image * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(os.path.join(directory, "views", f"v{i}.png"))
        _write_f32(os.path.join(directory, "pointmaps", f"v{i}.f32"), view.pointmap)
        _write_f32(os.path.join(directory, "confidence", f"v{i}.f32"), view.confidence)
        for object_id, mask in view.masks.items():
            mask_dir = os.path.join(directory, "masks", object_id)
            os.makedirs(mask_dir, exist_ok=True)
            Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(
                os.path.join(mask_dir, f"v{i}.png")
            )


def load_bundle(directory: str) -> SceneBundle:
    meta_path = os.path.join(directory, "scene.json")
    if not os.path.exists(meta_path):
        raise BundleIOError("missing file scene.json")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise BundleIOError(f"corrupt file scene.json: {e}") from e

    h, w = meta["height"], meta["width"]
    objects = [
        ObjectSpec(
            object_id=o["object_id"],
            primitive=o["primitive"],
            center=np.array(o["center"]),
            size=np.array(o["size"]),
            albedo=np.array(o["albedo"]),
        )
        for o in meta["objects"]
    ]
    cameras = [
        CameraPose(
            position=np.array(c["position"]),
            rotation=np.array(c["rotation"]),
            fov_y_deg=c["fov_y_deg"],
            far=c["far"],
        )
        for c in meta.get("cameras", [])
    ]

    views = []
    for i in range(meta["n_views"]):
        img_rel = os.path.join("views", f"v{i}.png")
        img_path = os.path.join(directory, img_rel)
        if not os.path.exists(img_path):
            raise BundleIOError(f"missing file {img_rel}")
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0

        pointmap = _read_f32(directory, os.path.join("pointmaps", f"v{i}.f32"), (h, w, 3))
        confidence = _read_f32(directory, os.path.join("confidence", f"v{i}.f32"), (h, w))

        masks = {}
        for obj in objects:
            mask_rel = os.path.join("masks", obj.object_id, f"v{i}.png")
            mask_path = os.path.join(directory, mask_rel)
            if not os.path.exists(mask_path):
                raise BundleIOError(f"missing file {mask_rel}")
            masks[obj.object_id] = (
                np.asarray(Image.open(mask_path).convert("L")) > 127
            ).astype(np.uint8)
        views.append(View(image=image, pointmap=pointmap, confidence=confidence, masks=masks))

    return SceneBundle(
        scene_id=meta["scene_id"],
        views=views,
        objects=objects,
        rng_seed=meta["rng_seed"],
        cameras=cameras,
    )
