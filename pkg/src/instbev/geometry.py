"""Pinhole projection of BEV pillar points and BEV grid <-> world mapping.

Conventions:
    * World frame is metric, z up. The BEV plane is the x/y plane.
    * BEV cell ``(gx, gy)`` spans ``[range_min + g * cell, range_min + (g + 1) * cell)``
      on each axis. Dense BEV arrays are indexed ``[gy, gx]``.
    * ``rotation``/``translation`` map world points into the camera frame
      (x right, y down, z forward).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

EPS_DEPTH = 1e-6


@dataclass(frozen=True)
class BevGridSpec:
    h: int = 50
    w: int = 50
    range_min_x: float = -51.2
    range_max_x: float = 51.2
    range_min_y: float = -51.2
    range_max_y: float = 51.2
    z_min: float = -53.0
    z_max: float = -47.0
    n_ref: int = 4
    refine_r: int = 4

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ConfigError(f"grid dims must be positive, got {self.h}x{self.w}")
        if not (self.range_max_x > self.range_min_x and self.range_max_y > self.range_min_y):
            raise ConfigError("perception range must have max > min on both axes")
        if not self.z_max > self.z_min:
            raise ConfigError("pillar z-range must have z_max > z_min")
        if self.n_ref < 1:
            raise ConfigError("n_ref must be >= 1")
        if self.refine_r < 1:
            raise ConfigError("refine_r must be >= 1")

    @property
    def cell_x(self) -> float:
        return (self.range_max_x - self.range_min_x) / self.w

    @property
    def cell_y(self) -> float:
        return (self.range_max_y - self.range_min_y) / self.h

    @property
    def cells(self) -> int:
        return self.h * self.w

    def with_(self, **changes) -> "BevGridSpec":
        """Copy with some fields replaced."""
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return BevGridSpec(**kw)


@dataclass(frozen=True)
class CameraModel:
    """One UAV view: ``pixel ~ K (R @ P + t)``."""

    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_width: int
    image_height: int
    view_id: int = 0

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.array_equal(K[2], [0.0, 0.0, 1.0]):
            raise ConfigError(f"intrinsics bottom row must be [0, 0, 1], got {K[2]}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("focal lengths must be positive")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ConfigError("rotation is not orthonormal")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ConfigError("image size must be positive")
        for name, arr in (("intrinsics", K), ("rotation", R), ("translation", t)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_json(self) -> dict:
        return {
            "view_id": int(self.view_id),
            "K": [float(x) for x in self.intrinsics.ravel()],
            "R": [float(x) for x in self.rotation.ravel()],
            "t": [float(x) for x in self.translation],
            "width": int(self.image_width),
            "height": int(self.image_height),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CameraModel":
        return cls(
            intrinsics=np.array(d["K"], dtype=np.float64).reshape(3, 3),
            rotation=np.array(d["R"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["t"], dtype=np.float64),
            image_width=int(d["width"]),
            image_height=int(d["height"]),
            view_id=int(d["view_id"]),
        )


@dataclass(frozen=True)
class PillarPoints:
    grid_x: int
    grid_y: int
    points: np.ndarray = field(repr=False)  # (n_ref, 3)


@dataclass(frozen=True)
class ImagePoint:
    u: float
    v: float
    depth: float
    view_id: int
    valid: bool


def _check_index(spec: BevGridSpec, gx: int, gy: int) -> None:
    if not (0 <= gx < spec.w and 0 <= gy < spec.h):
        raise IndexError(f"cell ({gx}, {gy}) outside {spec.w}x{spec.h} grid")


def grid_to_world(spec: BevGridSpec, gx, gy, frac_x=0.5, frac_y=0.5):
    """Metric position of a point inside BEV cell ``(gx, gy)``.

    ``frac = 0`` is the cell's lower corner, ``0.5`` its center. Scalar
    indices return a length-2 array; array inputs broadcast and return
    ``(..., 2)``.
    """
    if np.ndim(gx) == 0 and np.ndim(gy) == 0:
        _check_index(spec, int(gx), int(gy))
    else:
        gx_a, gy_a = np.asarray(gx), np.asarray(gy)
        if gx_a.size and (gx_a.min() < 0 or gx_a.max() >= spec.w):
            raise IndexError("gx out of range")
        if gy_a.size and (gy_a.min() < 0 or gy_a.max() >= spec.h):
            raise IndexError("gy out of range")
    x = spec.range_min_x + (np.asarray(gx, dtype=np.float64) + frac_x) * spec.cell_x
    y = spec.range_min_y + (np.asarray(gy, dtype=np.float64) + frac_y) * spec.cell_y
    return np.stack(np.broadcast_arrays(x, y), axis=-1)


def pillar_heights(spec: BevGridSpec) -> np.ndarray:
    """Midpoint partition of ``[z_min, z_max]`` into ``n_ref`` heights."""
    j = np.arange(1, spec.n_ref + 1, dtype=np.float64)
    return spec.z_min + (j - 0.5) * (spec.z_max - spec.z_min) / spec.n_ref


def pillar_points(spec: BevGridSpec, gx: int, gy: int) -> PillarPoints:
    xy = grid_to_world(spec, gx, gy)
    z = pillar_heights(spec)
    pts = np.column_stack([np.full(spec.n_ref, xy[0]), np.full(spec.n_ref, xy[1]), z])
    return PillarPoints(gx, gy, pts)


def lift(xy: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Lift ``(P, 2)`` BEV positions to ``(P, len(z), 3)`` pillar points."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    out = np.empty((xy.shape[0], len(z), 3))
    out[:, :, :2] = xy[:, None, :]
    out[:, :, 2] = z[None, :]
    return out


def _affine(m: np.ndarray, b: np.ndarray, p: np.ndarray) -> np.ndarray:
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    return np.stack([m[i, 0] * x + m[i, 1] * y + m[i, 2] * z + b[i] for i in range(3)], axis=-1)


def project_points(cam: CameraModel, pts: np.ndarray):
    """Vectorised projection of ``(..., 3)`` world points.

    Returns:
        uv: ``(..., 2)`` pixel coordinates (NaN where depth <= EPS_DEPTH)
        depth: ``(...)`` camera-frame z
        valid: ``(...)`` bool, in front of the camera and inside the image
    """
    pts = np.asarray(pts, dtype=np.float64)
    # explicit sums rather than matmul: per-point results must not depend on batch size
    c = _affine(cam.rotation, cam.translation, pts)
    depth = c[..., 2]
    front = depth > EPS_DEPTH
    kc = _affine(cam.intrinsics, np.zeros(3), c)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(front, kc[..., 2], 1.0)
        u = np.where(front, kc[..., 0] / safe, np.nan)
        v = np.where(front, kc[..., 1] / safe, np.nan)
    valid = front & (u >= 0) & (u < cam.image_width) & (v >= 0) & (v < cam.image_height)
    return np.stack([u, v], axis=-1), depth, valid


def project(cam: CameraModel, world_point) -> ImagePoint:
    uv, depth, valid = project_points(cam, np.asarray(world_point, dtype=np.float64).reshape(3))
    return ImagePoint(float(uv[0]), float(uv[1]), float(depth), cam.view_id, bool(valid))


def backproject(cam: CameraModel, u: float, v: float, depth: float) -> np.ndarray:
    """World point whose projection is ``(u, v)`` at camera-frame ``depth``."""
    ray = np.linalg.solve(cam.intrinsics, np.array([u, v, 1.0]))
    c = ray * depth
    return cam.rotation.T @ (c - cam.translation)


def save_rig(cams, path) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cams], indent=2))


def load_rig(path) -> list[CameraModel]:
    return [CameraModel.from_json(d) for d in json.loads(Path(path).read_text())]
