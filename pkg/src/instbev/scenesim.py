"""Procedural multi-UAV scenes: camera ring, ground objects, exact 2D boxes, Gaussian-bump features."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError
from .featmap import FeatureMap
from .geometry import EPS_DEPTH, BevGridSpec, CameraModel, project_points
from .ibcl import Box3D
from .maskgen import Box2D, ForegroundMask
from .pipeline import Scene


@dataclass(frozen=True)
class SimSpec:
    n_uavs: int = 4
    altitude: float = 50.0
    area_side: float = 100.0
    n_objects: int = 3
    object_size_range: tuple = (3.0, 5.0)
    camera_pitch: Optional[float] = None  # radians below horizontal; None aims at the area center
    rng_seed: int = 0
    image_width: int = 800
    image_height: int = 450
    focal: float = 400.0
    channels: int = 32
    stride: float = 8.0
    background_level: float = 0.2
    bump_amplitude: float = 2.0

    def __post_init__(self):
        if self.n_uavs < 1:
            raise ConfigError("n_uavs must be >= 1")
        if self.altitude <= 0 or self.area_side <= 0:
            raise ConfigError("altitude and area_side must be positive")
        if self.n_objects < 0:
            raise ConfigError("n_objects must be >= 0")
        lo, hi = self.object_size_range
        if not 0 < lo <= hi or hi * math.sqrt(2) >= self.area_side:
            raise ConfigError("object_size_range must be positive and fit inside the area")

    @classmethod
    def load(cls, path) -> "SimSpec":
        d = json.loads(Path(path).read_text())
        if "object_size_range" in d:
            d["object_size_range"] = tuple(d["object_size_range"])
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


def look_rotation(position, heading: float, pitch: float) -> np.ndarray:
    """World->camera rotation for a camera facing ``heading`` (rad, from +x) tilted ``pitch`` below horizontal."""
    ch, sh = math.cos(heading), math.sin(heading)
    cp, sp = math.cos(pitch), math.sin(pitch)
    forward = np.array([cp * ch, cp * sh, -sp])
    right = np.array([sh, -ch, 0.0])
    down = np.cross(forward, right)
    return np.vstack([right, down, forward])


def make_camera(position, heading: float, pitch: float, view_id: int, width: int, height: int,
                focal: float) -> CameraModel:
    R = look_rotation(position, heading, pitch)
    K = np.array([[focal, 0.0, width / 2], [0.0, focal, height / 2], [0.0, 0.0, 1.0]])
    return CameraModel(K, R, -R @ np.asarray(position, dtype=np.float64), width, height, view_id)


def camera_ring(spec: SimSpec) -> list[CameraModel]:
    """UAVs at the area corners (n=4) or on the circle through them, all aimed at the center.

    The world origin sits at UAV height; the ground plane is ``z = -altitude``.
    """
    radius = spec.area_side / math.sqrt(2)
    cams = []
    for k in range(spec.n_uavs):
        theta = math.pi / 4 + 2 * math.pi * k / spec.n_uavs
        pos = np.array([radius * math.cos(theta), radius * math.sin(theta), 0.0])
        heading = theta + math.pi
        pitch = spec.camera_pitch if spec.camera_pitch is not None else math.atan2(spec.altitude, radius)
        cams.append(make_camera(pos, heading, pitch, k, spec.image_width, spec.image_height, spec.focal))
    return cams


def project_box(cam: CameraModel, box: Box3D, label: Optional[int] = None) -> Optional[Box2D]:
    """Pixel AABB of the box corners in front of the camera, clipped to the image; None if invisible."""
    uv, depth, _ = project_points(cam, box.corners())
    front = depth > EPS_DEPTH
    if not front.any():
        return None
    pts = uv[front]
    x0 = max(pts[:, 0].min(), 0.0)
    y0 = max(pts[:, 1].min(), 0.0)
    x1 = min(pts[:, 0].max(), float(cam.image_width))
    y1 = min(pts[:, 1].max(), float(cam.image_height))
    if x1 <= x0 or y1 <= y0:
        return None
    return Box2D(cam.view_id, float(x0), float(y0), float(x1), float(y1), label)


def sample_objects(spec: SimSpec, rng: np.random.Generator) -> list[Box3D]:
    lo, hi = spec.object_size_range
    ground = -spec.altitude
    boxes = []
    for k in range(spec.n_objects):
        length = rng.uniform(lo, hi)
        width = rng.uniform(0.4, 0.6) * length
        height = rng.uniform(1.4, 2.0)
        margin = math.hypot(length, width) / 2
        half = spec.area_side / 2 - margin
        cx, cy = rng.uniform(-half, half, size=2)
        yaw = rng.uniform(-math.pi, math.pi)
        if yaw == -math.pi:
            yaw = math.pi
        boxes.append(Box3D((cx, cy, ground + height / 2), (length, width, height), yaw, label=k % 3))
    return boxes


def object_signatures(spec: SimSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per-object channel signature; its peak amplitude grows with the object index."""
    dirs = np.abs(rng.normal(size=(n, spec.channels)))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = spec.bump_amplitude * (1.0 + 0.25 * np.arange(n))
    return dirs * amps[:, None]


def feature_shape(spec: SimSpec) -> tuple[int, int]:
    """Feature grid large enough that every in-image pixel maps inside it."""
    return (math.ceil(spec.image_height / spec.stride) + 1, math.ceil(spec.image_width / spec.stride) + 1)


def synthesize_features(spec: SimSpec, cam: CameraModel, boxes: list[Box3D], boxes2d: list[Optional[Box2D]],
                        signatures: np.ndarray) -> FeatureMap:
    hf, wf = feature_shape(spec)
    data = np.full((spec.channels, hf, wf), spec.background_level)
    yy, xx = np.mgrid[0:hf, 0:wf]
    for box, b2, sig in zip(boxes, boxes2d, signatures):
        if b2 is None:
            continue
        uv, depth, _ = project_points(cam, np.array(box.center))
        if not depth > EPS_DEPTH:
            continue
        fx, fy = uv[0] / spec.stride, uv[1] / spec.stride
        sigma = max(0.75, 0.3 * max(b2.x_max - b2.x_min, b2.y_max - b2.y_min) / spec.stride)
        bump = np.exp(-((xx - fx) ** 2 + (yy - fy) ** 2) / (2 * sigma ** 2))
        data += sig[:, None, None] * bump[None]
    # round to f32 so that a saved and reloaded scene is identical to the in-memory one
    return FeatureMap(cam.view_id, data.astype(np.float32).astype(np.float64), spec.stride)


def generate_scene(spec: SimSpec, frame_id: int = 0) -> Scene:
    rng = np.random.default_rng(spec.rng_seed)
    cams = camera_ring(spec)
    objects = sample_objects(spec, rng)
    signatures = object_signatures(spec, len(objects), rng)
    boxes_2d: list[Box2D] = []
    fms = []
    for cam in cams:
        per_view = [project_box(cam, b, b.label) for b in objects]
        boxes_2d.extend(b for b in per_view if b is not None)
        fms.append(synthesize_features(spec, cam, objects, per_view, signatures))
    return Scene(cams, fms, boxes_2d, objects, frame_id)


def expected_foreground(spec: Optional[SimSpec], scene: Scene, grid: BevGridSpec) -> ForegroundMask:
    """Brute-force foreground oracle: scalar loops over (cell, view, reference height).

    Written without the vectorised projection helpers on purpose.
    """
    h, w = grid.h, grid.w
    cx = (grid.range_max_x - grid.range_min_x) / w
    cy = (grid.range_max_y - grid.range_min_y) / h
    dz = (grid.z_max - grid.z_min) / grid.n_ref
    heights = [grid.z_min + (j + 0.5) * dz for j in range(grid.n_ref)]
    views = []
    for cam in scene.cams:
        K = cam.intrinsics.tolist()
        R = cam.rotation.tolist()
        t = cam.translation.tolist()
        boxes = [(b.x_min, b.y_min, b.x_max, b.y_max) for b in scene.boxes_2d if b.view_id == cam.view_id]
        views.append((K, R, t, cam.image_width, cam.image_height, boxes))
    hits = np.zeros((h, w), dtype=np.int64)
    for gy in range(h):
        y = grid.range_min_y + (gy + 0.5) * cy
        for gx in range(w):
            x = grid.range_min_x + (gx + 0.5) * cx
            count = 0
            for K, R, t, width, height, boxes in views:
                if not boxes:
                    continue
                for z in heights:
                    c0 = R[0][0] * x + R[0][1] * y + R[0][2] * z + t[0]
                    c1 = R[1][0] * x + R[1][1] * y + R[1][2] * z + t[1]
                    c2 = R[2][0] * x + R[2][1] * y + R[2][2] * z + t[2]
                    if c2 <= EPS_DEPTH:
                        continue
                    u = (K[0][0] * c0 + K[0][1] * c1 + K[0][2] * c2) / c2
                    v = (K[1][0] * c0 + K[1][1] * c1 + K[1][2] * c2) / c2
                    if not (0 <= u < width and 0 <= v < height):
                        continue
                    for x0, y0, x1, y1 in boxes:
                        if x0 <= u <= x1 and y0 <= v <= y1:
                            count += 1
                            break
            hits[gy, gx] = count
    return ForegroundMask.from_hits(hits)


def random_mask_case(rng: np.random.Generator) -> tuple[Scene, BevGridSpec]:
    """Random scene + grid for oracle sweeps: 10..50 cells per side, 1..4 cameras, at most 20 boxes."""
    side = int(rng.integers(10, 51))
    n_uavs = int(rng.integers(1, 5))
    n_objects = int(rng.integers(0, 21 // n_uavs + 1))
    spec = SimSpec(n_uavs=n_uavs, n_objects=n_objects, channels=4, rng_seed=int(rng.integers(2**31)))
    scene = generate_scene(spec)
    if len(scene.boxes_2d) > 20:
        scene.boxes_2d = scene.boxes_2d[:20]
    return scene, BevGridSpec(h=side, w=side)
