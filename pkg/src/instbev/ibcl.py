"""Instance-background contrastive learning in BEV space.

Instance embeddings come from ground-truth box crops (attention-weighted
pooling), background embeddings from distance-constrained random patches,
and the loss pulls instances together while pushing them away from
backgrounds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage, special

from .attention import BevTensor
from .errors import ConfigError, DegenerateSceneError, InputError, OutOfRangeError
from .geometry import BevGridSpec, grid_to_world


class GridRect(NamedTuple):
    """Cell rectangle ``[x0, x1) x [y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0


@dataclass(frozen=True)
class Box3D:
    center: tuple
    size: tuple  # (l, w, h); l runs along the yaw direction
    yaw: float = 0.0
    label: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ConfigError("Box3D center and size must be 3-vectors")
        if min(self.size) <= 0:
            raise ConfigError(f"box size must be positive, got {self.size}")
        if not -math.pi < self.yaw <= math.pi:
            raise ConfigError(f"yaw must lie in (-pi, pi], got {self.yaw}")

    def footprint(self) -> np.ndarray:
        """BEV corners, ``(4, 2)``."""
        cx, cy, _ = self.center
        hl, hw = self.size[0] / 2, self.size[1] / 2
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + [cx, cy]

    def corners(self) -> np.ndarray:
        """All 8 corners, ``(8, 3)``."""
        fp = self.footprint()
        zc, hh = self.center[2], self.size[2] / 2
        return np.vstack([np.column_stack([fp, np.full(4, zc - hh)]),
                          np.column_stack([fp, np.full(4, zc + hh)])])

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": list(self.size), "yaw": self.yaw, "label": self.label}

    @classmethod
    def from_json(cls, d: dict) -> "Box3D":
        return cls(tuple(d["center"]), tuple(d["size"]), float(d["yaw"]), int(d.get("label", 0)))


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.1
    n_background: int = 200
    d_min: float = 4.0
    pool_s: int = 7
    patch_b: int = 3
    embed_dim: int = 128
    rng_seed: int = 0
    class_conditional: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.n_background < 1:
            raise ConfigError("n_background must be >= 1")
        if self.pool_s < 1 or self.patch_b < 1 or self.embed_dim < 1:
            raise ConfigError("pool_s, patch_b and embed_dim must be positive")


@dataclass(frozen=True)
class ExtractorParams:
    """Attention perceptron (C -> C -> 1, ReLU) and the shared C -> d_e projection."""

    w1: np.ndarray   # (C, C)
    b1: np.ndarray   # (C,)
    w2: np.ndarray   # (C,)
    b2: float
    proj: np.ndarray  # (d_e, C)

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "proj"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"extractor parameter {name} is not finite")
        if not math.isfinite(self.b2):
            raise InputError("extractor parameter b2 is not finite")

    @property
    def channels(self) -> int:
        return self.w1.shape[0]

    @classmethod
    def random(cls, channels: int, embed_dim: int, rng: np.random.Generator) -> "ExtractorParams":
        scale = 1.0 / math.sqrt(channels)
        return cls(
            w1=rng.normal(scale=scale, size=(channels, channels)),
            b1=np.zeros(channels),
            w2=rng.normal(scale=scale, size=channels),
            b2=0.0,
            proj=rng.normal(scale=scale, size=(embed_dim, channels)),
        )

    @classmethod
    def uniform_attention(cls, channels: int, embed_dim: int, rng: np.random.Generator) -> "ExtractorParams":
        """Zero perceptron weights, so the attention map is uniform."""
        base = cls.random(channels, embed_dim, rng)
        return cls(np.zeros((channels, channels)), np.zeros(channels), np.zeros(channels), 0.0, base.proj)


@dataclass
class InstanceFeature:
    source_box: Optional[Box3D]
    embedding: np.ndarray
    attention_weights: np.ndarray  # (s, s)
    crop_rect: GridRect
    pooled: np.ndarray = field(repr=False, default=None)  # C-vector before projection

    def to_json(self) -> dict:
        return {"embedding": [float(x) for x in self.embedding],
                "source": {"box": self.source_box.to_json() if self.source_box else None,
                           "crop_rect": list(self.crop_rect)}}


@dataclass
class BackgroundFeature:
    sample_point: np.ndarray  # world (x, y)
    embedding: np.ndarray
    patch_rect: GridRect
    cell: tuple = (0, 0)
    with_replacement: bool = False
    pooled: np.ndarray = field(repr=False, default=None)

    def to_json(self) -> dict:
        return {"embedding": [float(x) for x in self.embedding],
                "source": {"sample_point": [float(x) for x in self.sample_point],
                           "cell": list(self.cell), "patch_rect": list(self.patch_rect),
                           "with_replacement": self.with_replacement}}


def l2_normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise InputError("cannot normalise a zero-norm embedding")
    return x / n


# ---------------------------------------------------------------- extraction


def box_to_bev_rect(spec: BevGridSpec, box: Box3D) -> GridRect:
    """Cells whose centers fall in the footprint's AABB (half-open), clipped, at least 1x1."""
    fp = box.footprint()
    fx = (fp[:, 0] - spec.range_min_x) / spec.cell_x
    fy = (fp[:, 1] - spec.range_min_y) / spec.cell_y
    if fx.max() <= 0 or fx.min() >= spec.w or fy.max() <= 0 or fy.min() >= spec.h:
        raise OutOfRangeError(f"box footprint at {box.center[:2]} lies outside the BEV range")

    def span(lo, hi, n):
        # cell g is in iff lo <= g + 0.5 < hi; tolerance absorbs rounding of lo/hi
        a = max(0, math.ceil(lo - 0.5 - 1e-9))
        b = min(n, math.ceil(hi - 0.5 - 1e-9))
        if b <= a:
            c = min(max(math.floor((lo + hi) / 2), 0), n - 1)
            a, b = c, c + 1
        return a, b

    x0, x1 = span(fx.min(), fx.max(), spec.w)
    y0, y1 = span(fy.min(), fy.max(), spec.h)
    return GridRect(x0, y0, x1, y1)


def adaptive_avg_pool(x: np.ndarray, s: int) -> np.ndarray:
    """Adaptive average pooling of ``(h, w, C)`` to ``(s, s, C)``.

    Bin ``i`` covers ``[floor(i*n/s), ceil((i+1)*n/s))``; bins overlap when
    ``n`` is not a multiple of ``s`` and repeat when ``n < s``.
    """
    h, w, _ = x.shape
    ys = [(i * h // s, -(-(i + 1) * h // s)) for i in range(s)]
    xs = [(j * w // s, -(-(j + 1) * w // s)) for j in range(s)]
    return np.stack([np.stack([x[y0:y1, x0:x1].mean(axis=(0, 1)) for x0, x1 in xs]) for y0, y1 in ys])


def crop(bev: BevTensor, rect: GridRect) -> np.ndarray:
    if not (0 <= rect.x0 < rect.x1 <= bev.w and 0 <= rect.y0 < rect.y1 <= bev.h):
        raise ConfigError(f"crop {rect} outside {bev.w}x{bev.h} grid")
    return bev.data[rect.y0:rect.y1, rect.x0:rect.x1]


def attention_map(pooled: np.ndarray, params: ExtractorParams) -> np.ndarray:
    """Softmax over the s*s locations of the perceptron's scalar logits."""
    hidden = np.maximum(pooled @ params.w1.T + params.b1, 0.0)
    logits = hidden @ params.w2 + params.b2
    e = np.exp(logits - logits.max())
    return e / e.sum()


def extract_instance(bev: BevTensor, rect: GridRect, params: ExtractorParams, pool_s: int = 7,
                     box: Optional[Box3D] = None) -> InstanceFeature:
    pooled = adaptive_avg_pool(crop(bev, rect), pool_s)
    w = attention_map(pooled, params)
    f = np.einsum("ij,ijc->c", w, pooled)
    return InstanceFeature(box, l2_normalize(params.proj @ f), w, rect, f)


def foreground_region(spec: BevGridSpec, boxes: Sequence[Box3D]) -> np.ndarray:
    """Boolean ``(h, w)`` union of box footprint rectangles; out-of-range boxes are skipped."""
    region = np.zeros((spec.h, spec.w), dtype=bool)
    for b in boxes:
        try:
            r = box_to_bev_rect(spec, b)
        except OutOfRangeError:
            continue
        region[r.y0:r.y1, r.x0:r.x1] = True
    return region


def background_distance(spec: BevGridSpec, fg_region: np.ndarray) -> np.ndarray:
    """Metric distance from each cell center to the nearest foreground cell center (inf if none)."""
    fg_region = np.asarray(fg_region, dtype=bool)
    if not fg_region.any():
        return np.full(fg_region.shape, np.inf)
    return ndimage.distance_transform_edt(~fg_region, sampling=(spec.cell_y, spec.cell_x))


def sample_background(spec: BevGridSpec, bev: BevTensor, fg_region: np.ndarray, cfg: ContrastConfig,
                      params: ExtractorParams, rng: Optional[np.random.Generator] = None) -> list[BackgroundFeature]:
    """Draw ``cfg.n_background`` patches from cells farther than ``d_min`` from the foreground.

    Sampling is without replacement while enough cells are eligible, with
    replacement otherwise (each feature then carries ``with_replacement``).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.rng_seed)
    dist = background_distance(spec, fg_region)
    ey, ex = np.nonzero(dist > cfg.d_min)
    if len(ex) == 0:
        raise DegenerateSceneError(f"no cell lies farther than {cfg.d_min} m from the foreground")
    replace = cfg.n_background > len(ex)
    picks = rng.choice(len(ex), size=cfg.n_background, replace=replace)
    half = cfg.patch_b // 2
    feats = []
    for p in picks:
        gx, gy = int(ex[p]), int(ey[p])
        rect = GridRect(max(0, gx - half), max(0, gy - half),
                        min(spec.w, gx - half + cfg.patch_b), min(spec.h, gy - half + cfg.patch_b))
        f = adaptive_avg_pool(crop(bev, rect), cfg.pool_s).mean(axis=(0, 1))
        feats.append(BackgroundFeature(grid_to_world(spec, gx, gy), l2_normalize(params.proj @ f),
                                       rect, (gx, gy), replace, f))
    return feats


# ---------------------------------------------------------------------- loss


def positive_mask(n: int, labels: Optional[Sequence[int]] = None) -> np.ndarray:
    """Ordered pairs ``(i, j)``, ``i != j``; restricted to equal labels when given."""
    mask = ~np.eye(n, dtype=bool)
    if labels is not None:
        lab = np.asarray(labels)
        mask &= lab[:, None] == lab[None, :]
    return mask


def loss_from_similarities(s_pos: np.ndarray, s_neg: np.ndarray, pos_mask: np.ndarray):
    """Contrastive loss given scaled similarities.

    Each positive pair ``(i, j)`` contributes
    ``-log(exp(s_ij) / (exp(s_ij) + sum_k exp(s_ik)))``; the result is the mean
    over positive pairs.

    Args:
        s_pos: ``(n, n)`` instance-instance similarities (already divided by tau)
        s_neg: ``(n, K)`` instance-background similarities
        pos_mask: ``(n, n)`` bool, which ordered pairs are positives

    Returns:
        ``(loss, d_pos, d_neg)`` where ``d_*`` are gradients w.r.t. ``s_pos``, ``s_neg``.
    """
    n_pairs = int(pos_mask.sum())
    d_pos = np.zeros_like(s_pos, dtype=np.float64)
    d_neg = np.zeros_like(s_neg, dtype=np.float64)
    if n_pairs == 0:
        return 0.0, d_pos, d_neg
    if s_neg.shape[1] == 0:
        lse = np.full(s_pos.shape[0], -np.inf)
        soft = d_neg
    else:
        m = s_neg.max(axis=1, keepdims=True)
        ex = np.exp(s_neg - m)
        lse = m[:, 0] + np.log(ex.sum(axis=1))
        soft = ex / ex.sum(axis=1, keepdims=True)
    gap = lse[:, None] - s_pos                      # log(sum_k e^{s_ik}) - s_ij
    terms = np.logaddexp(0.0, gap)                  # -log ratio, >= 0
    sig = np.where(pos_mask, special.expit(gap), 0.0)
    loss = float(np.where(pos_mask, terms, 0.0).sum() / n_pairs)
    d_pos = -sig / n_pairs
    d_neg = sig.sum(axis=1)[:, None] * soft / n_pairs
    return loss, d_pos, d_neg


def contrastive_loss(inst: np.ndarray, bg: np.ndarray, tau: float, labels: Optional[Sequence[int]] = None):
    """Loss and gradients w.r.t. (already normalised) instance and background embeddings.

    Similarity is the plain dot product over ``tau``: inputs are taken to be
    unit vectors and the gradient does not differentiate through normalisation.
    """
    inst = np.asarray(inst, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64).reshape(-1, inst.shape[1])
    for arr in (inst, bg):
        if arr.size and np.any(np.linalg.norm(arr, axis=1) < 1e-12):
            raise InputError("zero-norm embedding")
        if not np.all(np.isfinite(arr)):
            raise InputError("non-finite embedding")
    n = inst.shape[0]
    mask = positive_mask(n, labels)
    s_pos = inst @ inst.T / tau
    s_neg = inst @ bg.T / tau
    loss, d_pos, d_neg = loss_from_similarities(s_pos, s_neg, mask)
    g_inst = ((d_pos + d_pos.T) @ inst + d_neg @ bg) / tau
    g_bg = d_neg.T @ inst / tau
    return loss, g_inst, g_bg


def ibcl_loss(instances: Sequence[InstanceFeature], backgrounds: Sequence[BackgroundFeature], cfg: ContrastConfig):
    """Returns ``(loss, grad_instances (n, d), grad_backgrounds (K, d))``."""
    if len(instances) < 2:
        d = len(instances[0].embedding) if instances else (len(backgrounds[0].embedding) if backgrounds else 0)
        return 0.0, np.zeros((len(instances), d)), np.zeros((len(backgrounds), d))
    inst = np.stack([f.embedding for f in instances])
    bg = np.stack([f.embedding for f in backgrounds]) if backgrounds else np.zeros((0, inst.shape[1]))
    labels = None
    if cfg.class_conditional:
        labels = [f.source_box.label if f.source_box else -1 for f in instances]
    return contrastive_loss(inst, bg, cfg.tau, labels)


# ----------------------------------------------------------- gradient checks


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|)``; 0 when both vanish."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def random_embedding_config(rng: np.random.Generator, n_inst=(2, 10), n_bg=(5, 200), taus=(0.05, 0.1, 1.0),
                            dim: int = 16):
    n = int(rng.integers(n_inst[0], n_inst[1] + 1))
    k = int(rng.integers(n_bg[0], n_bg[1] + 1))
    tau = float(rng.choice(taus))
    inst = l2_normalize(rng.normal(size=(n, dim)))
    bg = l2_normalize(rng.normal(size=(k, dim)))
    return inst, bg, tau


def gradcheck(n_configs: int = 50, seed: int = 0, h: float = 1e-5, dim: int = 16) -> float:
    """Worst relative error between analytic and finite-difference gradients over random configs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_configs):
        inst, bg, tau = random_embedding_config(rng, dim=dim)
        _, g_inst, g_bg = contrastive_loss(inst, bg, tau)
        n_inst = numeric_gradient(lambda e: contrastive_loss(e, bg, tau)[0], inst, h)
        n_bg = numeric_gradient(lambda b: contrastive_loss(inst, b, tau)[0], bg, h)
        err = relative_error(np.concatenate([g_inst.ravel(), g_bg.ravel()]),
                             np.concatenate([n_inst.ravel(), n_bg.ravel()]))
        worst = max(worst, err)
    return worst
