"""Spatial cross-attention over BEV queries and its box-guided refined variant.

Sampling offsets/weights are fixed parameters shared by all queries, so the
query only enters through the residual connection ``out = query + attention``.
"""
from __future__ import annotations

import enum
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, InputError
from .featmap import FeatureMap, SamplingParams, deform_sample_many
from .geometry import BevGridSpec, CameraModel, grid_to_world, lift, pillar_heights, project_points
from .maskgen import ForegroundMask

_BEV_HEADER = struct.Struct("<IIII")


class Stage(enum.IntEnum):
    QUERIES = 0
    COARSE = 1
    REFINED = 2
    FINAL = 3


@dataclass
class BevTensor:
    data: np.ndarray  # (h, w, C)
    stage: Stage = Stage.QUERIES

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ConfigError(f"BEV data must be (h, w, C), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise InputError("BEV tensor has non-finite entries")
        self.stage = Stage(self.stage)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def check_spec(self, spec: BevGridSpec) -> None:
        if (self.h, self.w) != (spec.h, spec.w):
            raise ConfigError(f"BEV tensor is {self.h}x{self.w}, grid is {spec.h}x{spec.w}")

    def to_bytes(self) -> bytes:
        head = _BEV_HEADER.pack(int(self.stage), self.channels, self.h, self.w)
        # payload is row-major per channel, like feature maps
        return head + self.data.transpose(2, 0, 1).astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "BevTensor":
        stage, c, h, w = _BEV_HEADER.unpack_from(buf, 0)
        payload = np.frombuffer(buf, dtype="<f4", count=c * h * w, offset=_BEV_HEADER.size)
        return cls(payload.astype(np.float64).reshape(c, h, w).transpose(1, 2, 0).copy(), Stage(stage))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "BevTensor":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SubGridOffset:
    m: int
    n: int
    delta_x: float
    delta_y: float


def subgrid_fractions(r: int) -> np.ndarray:
    """Sub-cell center fractions ``(m - 0.5) / r``, ``m = 1..r``."""
    return (np.arange(1, r + 1, dtype=np.float64) - 0.5) / r


def subgrid_offsets(spec: BevGridSpec) -> list[SubGridOffset]:
    """Metric offsets of the r x r sub-cell centers from the parent cell center."""
    fr = subgrid_fractions(spec.refine_r)
    return [SubGridOffset(m + 1, n + 1, (fr[m] - 0.5) * spec.cell_x, (fr[n] - 0.5) * spec.cell_y)
            for m in range(spec.refine_r) for n in range(spec.refine_r)]


def _align(cams: Sequence[CameraModel], fms: Sequence[FeatureMap]) -> list[tuple[CameraModel, FeatureMap]]:
    if not cams:
        raise ConfigError("spatial cross-attention needs at least one camera")
    by_view = {fm.view_id: fm for fm in fms}
    pairs = []
    for cam in cams:
        if cam.view_id not in by_view:
            raise ConfigError(f"no feature map for view {cam.view_id}")
        pairs.append((cam, by_view[cam.view_id]))
    channels = {fm.channels for _, fm in pairs}
    if len(channels) != 1:
        raise ConfigError(f"feature maps disagree on channel count: {sorted(channels)}")
    return pairs


def _attend(pairs, z: np.ndarray, params: SamplingParams, xy: np.ndarray, normalize: bool):
    """Core SCA at BEV positions ``xy`` (``(P, 2)``); returns values ``(P, C)`` and hit counts ``(P,)``.

    Summation order is fixed (view, then reference height) so every position
    gets the same arithmetic no matter how positions are batched.
    """
    n_pos = xy.shape[0]
    channels = pairs[0][1].channels
    pts = lift(xy, z)
    acc = np.zeros((n_pos, channels))
    hits = np.zeros(n_pos, dtype=np.int64)
    for cam, fm in pairs:
        uv, _, valid = project_points(cam, pts)
        sampled = deform_sample_many(fm, uv.reshape(-1, 2), valid.ravel(), params)
        sampled = sampled.reshape(n_pos, len(z), channels)
        for j in range(len(z)):
            acc += sampled[:, j]
        hits += valid.sum(axis=1)
    if normalize:
        seen = hits > 0
        acc[seen] /= hits[seen, None]
    return acc, hits


def _attend_chunked(pairs, z, params, xy, normalize, workers: int):
    if workers <= 1 or xy.shape[0] < 2 * workers:
        return _attend(pairs, z, params, xy, normalize)
    chunks = np.array_split(xy, workers)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        parts = list(ex.map(lambda c: _attend(pairs, z, params, c, normalize), chunks))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _tally(stats: Optional[dict], key: str, n_pos: int, hits: np.ndarray) -> None:
    if stats is None:
        return
    stats[f"{key}_positions"] = stats.get(f"{key}_positions", 0) + n_pos
    stats[f"{key}_hits"] = stats.get(f"{key}_hits", 0) + int(hits.sum())
    stats[f"{key}_empty"] = stats.get(f"{key}_empty", 0) + int((hits == 0).sum())


def sca_cell(spec: BevGridSpec, cams, fms, params: SamplingParams, query_pos, frac=(0.5, 0.5),
             normalize: bool = True) -> np.ndarray:
    """Attention value (no residual) at one position inside cell ``query_pos = (gx, gy)``."""
    pairs = _align(cams, fms)
    xy = grid_to_world(spec, query_pos[0], query_pos[1], frac[0], frac[1]).reshape(1, 2)
    return _attend(pairs, pillar_heights(spec), params, xy, normalize)[0][0]


def sca_hits(spec: BevGridSpec, cams, query_pos, frac=(0.5, 0.5)) -> int:
    """Number of valid (view, reference point) projections at a position."""
    xy = grid_to_world(spec, query_pos[0], query_pos[1], frac[0], frac[1]).reshape(1, 2)
    pts = lift(xy, pillar_heights(spec))
    return int(sum(project_points(cam, pts)[2].sum() for cam in cams))


def sca(spec: BevGridSpec, cams, fms, params: SamplingParams, queries: BevTensor, normalize: bool = True,
        workers: int = 1, stats: Optional[dict] = None) -> BevTensor:
    """Residual SCA over the whole grid at cell centers."""
    queries.check_spec(spec)
    pairs = _align(cams, fms)
    if pairs[0][1].channels != queries.channels:
        raise ConfigError("query and feature channel counts differ")
    gy, gx = np.mgrid[0:spec.h, 0:spec.w]
    xy = grid_to_world(spec, gx.ravel(), gy.ravel())
    vals, hits = _attend_chunked(pairs, pillar_heights(spec), params, xy, normalize, workers)
    _tally(stats, "sca", xy.shape[0], hits)
    return BevTensor(queries.data + vals.reshape(spec.h, spec.w, -1), Stage.COARSE)


def _refined_values(spec, pairs, params, cells_x, cells_y, normalize, workers):
    """SCA at the r x r sub-cell centers of each listed cell.

    Returns the per-cell mean ``(F, C)``, the sub-cell values ``(F, r*r, C)``
    and their hit counts ``(F, r*r)``.
    """
    r = spec.refine_r
    fr = subgrid_fractions(r)
    fm_, fn_ = np.meshgrid(fr, fr, indexing="ij")  # m indexes x, n indexes y
    gx = np.repeat(cells_x, r * r)
    gy = np.repeat(cells_y, r * r)
    fx = np.tile(fm_.ravel(), len(cells_x))
    fy = np.tile(fn_.ravel(), len(cells_x))
    xy = grid_to_world(spec, gx, gy, fx, fy)
    vals, hits = _attend_chunked(pairs, pillar_heights(spec), params, xy, normalize, workers)
    sub = vals.reshape(len(cells_x), r * r, -1)
    return sub.mean(axis=1), sub, hits.reshape(len(cells_x), r * r)


def refined_sca_cell(spec: BevGridSpec, cams, fms, params: SamplingParams, query_pos,
                     normalize: bool = True, return_subcells: bool = False):
    """Mean of SCA evaluated at the r x r sub-cell centers of one cell."""
    pairs = _align(cams, fms)
    mean, sub, _ = _refined_values(spec, pairs, params, np.array([query_pos[0]]), np.array([query_pos[1]]),
                                   normalize, 1)
    if return_subcells:
        return mean[0], sub[0]
    return mean[0]


def refine_and_fuse(spec: BevGridSpec, cams, fms, params: SamplingParams, coarse: BevTensor,
                    mask: ForegroundMask, queries: BevTensor, normalize: bool = True, workers: int = 1,
                    stats: Optional[dict] = None) -> BevTensor:
    """Replace foreground cells of ``coarse`` with ``queries + SCA_r``; background cells are copied."""
    coarse.check_spec(spec)
    queries.check_spec(spec)
    if mask.values.shape != (spec.h, spec.w):
        raise ConfigError(f"mask is {mask.values.shape}, grid is {spec.h}x{spec.w}")
    out = coarse.data.copy()
    fg_y, fg_x = np.nonzero(mask.values)
    if len(fg_x):
        pairs = _align(cams, fms)
        mean, _, hits = _refined_values(spec, pairs, params, fg_x, fg_y, normalize, workers)
        out[fg_y, fg_x] = queries.data[fg_y, fg_x] + mean
        _tally(stats, "refine", hits.size, hits)
    if stats is not None:
        stats["refine_cells"] = stats.get("refine_cells", 0) + int(len(fg_x))
    return BevTensor(out, Stage.REFINED)
