"""Per-view feature fields with zero-padded bilinear and deformable sampling."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .geometry import ImagePoint

_FM_HEADER = struct.Struct("<IIIIf")


@dataclass(frozen=True)
class FeatureMap:
    """``data`` is ``(C, H_f, W_f)``; pixel ``(u, v)`` maps to ``(u / stride, v / stride)``."""

    view_id: int
    data: np.ndarray
    stride: float = 8.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ConfigError(f"feature data must be (C, H, W), got shape {data.shape}")
        if not self.stride > 0:
            raise ConfigError("stride must be positive")
        if not np.all(np.isfinite(data)):
            raise InputError("feature map has non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def to_bytes(self) -> bytes:
        c, h, w = self.data.shape
        head = _FM_HEADER.pack(self.view_id, c, h, w, self.stride)
        return head + self.data.astype("<f4").tobytes(order="C")

    @classmethod
    def from_bytes(cls, buf: bytes) -> "FeatureMap":
        view_id, c, h, w, stride = _FM_HEADER.unpack_from(buf, 0)
        n = c * h * w
        payload = np.frombuffer(buf, dtype="<f4", count=n, offset=_FM_HEADER.size)
        return cls(view_id, payload.astype(np.float64).reshape(c, h, w), float(stride))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureMap":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class SamplingParams:
    """Fixed deformable-sampling pattern shared by every query.

    offsets are in feature-grid units, one row per sample.
    """

    offsets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.float64).reshape(-1, 2)
        wts = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if off.shape[0] != wts.shape[0] or off.shape[0] < 1:
            raise ConfigError("need one weight per offset and at least one offset")
        if not np.all(np.isfinite(off)):
            raise InputError("offsets must be finite")
        if np.any(wts < 0) or abs(wts.sum() - 1.0) > 1e-6:
            raise ConfigError("weights must be non-negative and sum to 1")
        off.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "weights", wts)

    @property
    def n_offsets(self) -> int:
        return self.offsets.shape[0]

    @classmethod
    def identity(cls) -> "SamplingParams":
        """Single zero offset: pure projective sampling."""
        return cls(np.zeros((1, 2)), np.ones(1))

    @classmethod
    def random(cls, n_offsets: int, rng: np.random.Generator, scale: float = 1.0) -> "SamplingParams":
        offsets = rng.normal(scale=scale, size=(n_offsets, 2))
        logits = rng.normal(size=n_offsets)
        w = np.exp(logits - logits.max())
        return cls(offsets, w / w.sum())


def bilinear_sample_many(data: np.ndarray, fx: np.ndarray, fy: np.ndarray) -> np.ndarray:
    """Sample ``(C, H, W)`` at feature coordinates; returns ``(N, C)``.

    Points outside ``[0, W-1] x [0, H-1]`` (or NaN) yield zeros.
    """
    c, h, w = data.shape
    fx = np.asarray(fx, dtype=np.float64).ravel()
    fy = np.asarray(fy, dtype=np.float64).ravel()
    inside = (fx >= 0) & (fx <= w - 1) & (fy >= 0) & (fy <= h - 1)
    out = np.zeros((fx.size, c))
    if not inside.any():
        return out
    x, y = fx[inside], fy[inside]
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    ax = x - x0
    ay = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    hwc = data.transpose(1, 2, 0)
    out[inside] = (
        ((1 - ax) * (1 - ay))[:, None] * hwc[y0, x0]
        + (ax * (1 - ay))[:, None] * hwc[y0, x1]
        + ((1 - ax) * ay)[:, None] * hwc[y1, x0]
        + (ax * ay)[:, None] * hwc[y1, x1]
    )
    return out


def bilinear_sample(fm: FeatureMap, u: float, v: float) -> np.ndarray:
    if not (np.isfinite(u) and np.isfinite(v)):
        raise InputError(f"non-finite sample location ({u}, {v})")
    return bilinear_sample_many(fm.data, np.array([u / fm.stride]), np.array([v / fm.stride]))[0]


def deform_sample_many(fm: FeatureMap, uv: np.ndarray, valid: np.ndarray, params: SamplingParams) -> np.ndarray:
    """Weighted sum of bilinear samples around each pixel in ``uv`` (``(N, 2)``).

    Rows with ``valid == False`` are zero.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    valid = np.asarray(valid, dtype=bool).ravel()
    out = np.zeros((uv.shape[0], fm.channels))
    if not valid.any():
        return out
    base = uv[valid] / fm.stride
    acc = np.zeros((base.shape[0], fm.channels))
    for (ox, oy), wt in zip(params.offsets, params.weights):
        acc += wt * bilinear_sample_many(fm.data, base[:, 0] + ox, base[:, 1] + oy)
    out[valid] = acc
    return out


def deform_sample(fm: FeatureMap, pt: ImagePoint, params: SamplingParams) -> np.ndarray:
    if pt.view_id != fm.view_id:
        raise ConfigError(f"point from view {pt.view_id} sampled on feature map of view {fm.view_id}")
    if not pt.valid:
        return np.zeros(fm.channels)
    return deform_sample_many(fm, np.array([[pt.u, pt.v]]), np.array([True]), params)[0]
