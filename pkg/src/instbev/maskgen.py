"""Foreground mask over the BEV grid from per-view 2D boxes."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError
from .geometry import BevGridSpec, CameraModel, ImagePoint, grid_to_world, lift, pillar_heights, project_points


@dataclass(frozen=True)
class Box2D:
    view_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: Optional[int] = None

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ConfigError(f"degenerate box {self}")

    def to_json(self) -> dict:
        return {"view_id": self.view_id, "x_min": self.x_min, "y_min": self.y_min,
                "x_max": self.x_max, "y_max": self.y_max, "label": self.label}

    @classmethod
    def from_json(cls, d: dict) -> "Box2D":
        return cls(int(d["view_id"]), float(d["x_min"]), float(d["y_min"]),
                   float(d["x_max"]), float(d["y_max"]), d.get("label"))


@dataclass
class ForegroundMask:
    values: np.ndarray      # (h, w) uint8 in {0, 1}
    hit_counts: np.ndarray  # (h, w) int64

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def count(self) -> int:
        return int(self.values.sum())

    @classmethod
    def empty(cls, spec: BevGridSpec) -> "ForegroundMask":
        return cls(np.zeros((spec.h, spec.w), np.uint8), np.zeros((spec.h, spec.w), np.int64))

    @classmethod
    def from_hits(cls, hits: np.ndarray) -> "ForegroundMask":
        hits = np.asarray(hits, dtype=np.int64)
        return cls((hits >= 1).astype(np.uint8), hits)

    def to_json(self) -> dict:
        return {"h": self.h, "w": self.w, "values": self.values.tolist(),
                "hit_counts": self.hit_counts.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "ForegroundMask":
        return cls(np.array(d["values"], dtype=np.uint8), np.array(d["hit_counts"], dtype=np.int64))

    def to_pgm(self) -> bytes:
        """Binary PGM (P5), foreground 255, row 0 = lowest gy."""
        header = f"P5\n{self.w} {self.h}\n255\n".encode()
        return header + (self.values * 255).astype(np.uint8).tobytes()

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix == ".pgm":
            path.write_bytes(self.to_pgm())
        else:
            path.write_text(json.dumps(self.to_json()))


def point_in_box(pt: ImagePoint, box: Box2D) -> bool:
    """Closed-box membership; invalid points and other views never match."""
    if not pt.valid or pt.view_id != box.view_id:
        return False
    return box.x_min <= pt.u <= box.x_max and box.y_min <= pt.v <= box.y_max


def boxes_by_view(cams: Sequence[CameraModel], boxes: Sequence[Box2D]) -> dict[int, list[Box2D]]:
    grouped: dict[int, list[Box2D]] = {c.view_id: [] for c in cams}
    for b in boxes:
        if b.view_id not in grouped:
            raise ConfigError(f"box references view {b.view_id} with no camera")
        grouped[b.view_id].append(b)
    return grouped


def build_mask(spec: BevGridSpec, cams: Sequence[CameraModel], boxes: Sequence[Box2D],
               z_values: Optional[np.ndarray] = None) -> ForegroundMask:
    """Mark every cell whose pillar projects into a box of the matching view.

    ``hit_counts`` counts (view, reference point) pairs that land in at least
    one box. ``z_values`` overrides the pillar heights (default: midpoint
    partition of the grid's z-range).
    """
    if not cams:
        raise ConfigError("build_mask needs at least one camera")
    grouped = boxes_by_view(cams, boxes)
    if not boxes:
        return ForegroundMask.empty(spec)
    z = pillar_heights(spec) if z_values is None else np.asarray(z_values, dtype=np.float64)
    gy, gx = np.mgrid[0:spec.h, 0:spec.w]
    pts = lift(grid_to_world(spec, gx.ravel(), gy.ravel()), z)  # (h*w, nz, 3)
    hits = np.zeros(pts.shape[:2], dtype=np.int64)
    for cam in cams:
        vboxes = grouped[cam.view_id]
        if not vboxes:
            continue
        uv, _, valid = project_points(cam, pts)
        u, v = uv[..., 0], uv[..., 1]
        inside = np.zeros_like(valid)
        for b in vboxes:
            inside |= (u >= b.x_min) & (u <= b.x_max) & (v >= b.y_min) & (v <= b.y_max)
        hits += (inside & valid)
    return ForegroundMask.from_hits(hits.sum(axis=1).reshape(spec.h, spec.w))


def save_boxes(boxes: Sequence[Box2D], path) -> None:
    Path(path).write_text(json.dumps([b.to_json() for b in boxes], indent=2))


def load_boxes(path) -> list[Box2D]:
    return [Box2D.from_json(d) for d in json.loads(Path(path).read_text())]
