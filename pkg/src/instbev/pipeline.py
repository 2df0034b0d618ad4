"""End-to-end encoder: mask -> n x (SCA -> box-guided refinement) -> contrastive loss."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import BevTensor, Stage, refine_and_fuse, sca
from .errors import ConfigError, InputError, OutOfRangeError
from .featmap import FeatureMap, SamplingParams
from .geometry import BevGridSpec, CameraModel
from .ibcl import (Box3D, ContrastConfig, ExtractorParams, box_to_bev_rect, extract_instance,
                   foreground_region, ibcl_loss, sample_background)
from .maskgen import Box2D, ForegroundMask, build_mask

SCENE_FORMAT = "instbev.scene"
SCENE_VERSION = 1


@dataclass(frozen=True)
class PipelineConfig:
    grid: BevGridSpec = field(default_factory=BevGridSpec)
    n_layers: int = 3
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    lambda_pas: float = 1.0
    lambda_ibcl: float = 2.0
    pas_enabled: bool = True
    refine_enabled: bool = True
    ibcl_enabled: bool = True
    refine_every_layer: bool = True
    sca_normalize: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.lambda_pas < 0 or self.lambda_ibcl < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.refine_enabled and not self.pas_enabled:
            raise ConfigError("refinement needs the 2D boxes from the perspective branch")

    @classmethod
    def ablation(cls, row: int, **kw) -> "PipelineConfig":
        """The four ablation settings: 0 baseline, 1 +boxes, 2 +refinement, 3 +contrastive."""
        flags = [(False, False, False), (True, False, False), (True, True, False), (True, True, True)][row]
        return cls(pas_enabled=flags[0], refine_enabled=flags[1], ibcl_enabled=flags[2], **kw)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        grid = BevGridSpec(**d.pop("grid", {}))
        contrast = ContrastConfig(**d.pop("contrast", {}))
        return cls(grid=grid, contrast=contrast, **d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class Scene:
    cams: list[CameraModel]
    feature_maps: list[FeatureMap]
    boxes_2d: list[Box2D] = field(default_factory=list)
    boxes_3d: list[Box3D] = field(default_factory=list)
    frame_id: int = 0

    def __post_init__(self):
        if not self.cams:
            raise ConfigError("scene has no cameras")
        views = [c.view_id for c in self.cams]
        if len(set(views)) != len(views):
            raise ConfigError("duplicate camera view ids")
        if sorted(fm.view_id for fm in self.feature_maps) != sorted(views):
            raise ConfigError("need exactly one feature map per camera")
        bad = {b.view_id for b in self.boxes_2d} - set(views)
        if bad:
            raise ConfigError(f"boxes reference unknown views {sorted(bad)}")

    @property
    def channels(self) -> int:
        return self.feature_maps[0].channels

    def save(self, out_dir) -> Path:
        """Write ``scene.json`` plus one binary feature file per view; returns the JSON path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fm_refs = []
        for fm in self.feature_maps:
            name = f"features_view{fm.view_id}.bin"
            fm.save(out / name)
            fm_refs.append({"view_id": fm.view_id, "file": name})
        doc = {
            "format": SCENE_FORMAT,
            "version": SCENE_VERSION,
            "frame_id": self.frame_id,
            "cameras": [c.to_json() for c in self.cams],
            "boxes_2d": [b.to_json() for b in self.boxes_2d],
            "boxes_3d": [b.to_json() for b in self.boxes_3d],
            "feature_maps": fm_refs,
        }
        path = out / "scene.json"
        path.write_text(json.dumps(doc, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Scene":
        path = Path(path)
        doc = json.loads(path.read_text())
        if doc.get("format") != SCENE_FORMAT or doc.get("version") != SCENE_VERSION:
            raise ConfigError(f"{path}: unsupported scene format {doc.get('format')!r} v{doc.get('version')}")
        return cls(
            cams=[CameraModel.from_json(c) for c in doc["cameras"]],
            feature_maps=[FeatureMap.load(path.parent / r["file"]) for r in doc["feature_maps"]],
            boxes_2d=[Box2D.from_json(b) for b in doc["boxes_2d"]],
            boxes_3d=[Box3D.from_json(b) for b in doc["boxes_3d"]],
            frame_id=int(doc.get("frame_id", 0)),
        )


@dataclass(frozen=True)
class PipelineParams:
    """Everything the forward pass needs besides the scene: initial queries and fixed weights."""

    queries: BevTensor
    sampling: SamplingParams
    extractor: ExtractorParams

    @classmethod
    def init(cls, cfg: PipelineConfig, channels: int, seed: int = 0, n_offsets: int = 1,
             query_scale: float = 0.1) -> "PipelineParams":
        rng = np.random.default_rng(seed)
        queries = BevTensor(rng.normal(scale=query_scale, size=(cfg.grid.h, cfg.grid.w, channels)))
        sampling = SamplingParams.identity() if n_offsets == 1 else SamplingParams.random(n_offsets, rng)
        extractor = ExtractorParams.random(channels, cfg.contrast.embed_dim, rng)
        return cls(queries, sampling, extractor)


@dataclass
class PipelineResult:
    bev: BevTensor
    mask: ForegroundMask
    loss_ibcl: float
    diagnostics: dict
    instances: list = field(default_factory=list)
    backgrounds: list = field(default_factory=list)
    layers: list = field(default_factory=list)  # (coarse, refined) per layer when requested


def ibcl_pathway(grid: BevGridSpec, bev: BevTensor, boxes: list[Box3D], cfg: ContrastConfig,
                 extractor: ExtractorParams, rng: Optional[np.random.Generator] = None):
    """Instance and background embeddings from ``bev`` and the contrastive loss between them."""
    instances = []
    for b in boxes:
        try:
            rect = box_to_bev_rect(grid, b)
        except OutOfRangeError:
            continue
        instances.append(extract_instance(bev, rect, extractor, cfg.pool_s, box=b))
    region = foreground_region(grid, boxes)
    backgrounds = sample_background(grid, bev, region, cfg, extractor, rng)
    loss, _, _ = ibcl_loss(instances, backgrounds, cfg)
    return loss, instances, backgrounds


def run_pipeline(scene: Scene, cfg: PipelineConfig, params: PipelineParams, keep_layers: bool = False) -> PipelineResult:
    grid = cfg.grid
    if params.queries.channels != scene.channels:
        raise ConfigError("query channels do not match the scene's feature channels")
    diag: dict = {"counters": {"mask_builds": 0, "sca_layers": 0, "refine_layers": 0, "ibcl_evals": 0},
                  "layers": []}
    counters = diag["counters"]

    if cfg.pas_enabled:
        mask = build_mask(grid, scene.cams, scene.boxes_2d)
        counters["mask_builds"] += 1
    else:
        mask = ForegroundMask.empty(grid)
    diag["fg_cells"] = mask.count
    diag["fg_fraction"] = mask.count / grid.cells

    stats: dict = {}
    q = params.queries
    layers = []
    for layer in range(cfg.n_layers):
        t0 = time.perf_counter_ns()
        coarse = sca(grid, scene.cams, scene.feature_maps, params.sampling, q, cfg.sca_normalize, cfg.workers, stats)
        t1 = time.perf_counter_ns()
        counters["sca_layers"] += 1
        refine_here = cfg.refine_enabled and (cfg.refine_every_layer or layer == cfg.n_layers - 1)
        if refine_here:
            out = refine_and_fuse(grid, scene.cams, scene.feature_maps, params.sampling, coarse, mask, q,
                                  cfg.sca_normalize, cfg.workers, stats)
            counters["refine_layers"] += 1
        else:
            out = coarse
        t2 = time.perf_counter_ns()
        diag["layers"].append({"sca_ns": t1 - t0, "refine_ns": t2 - t1})
        if keep_layers:
            layers.append((coarse, out))
        q = out
    bev = BevTensor(q.data, Stage.FINAL)
    diag["hits"] = stats

    loss = 0.0
    instances, backgrounds = [], []
    if cfg.ibcl_enabled:
        rng = np.random.default_rng(cfg.contrast.rng_seed)
        loss, instances, backgrounds = ibcl_pathway(grid, bev, scene.boxes_3d, cfg.contrast, params.extractor, rng)
        counters["ibcl_evals"] += 1
        diag["n_instances"] = len(instances)
        diag["n_backgrounds"] = len(backgrounds)
    return PipelineResult(bev, mask, loss, diag, instances, backgrounds, layers)


def total_loss(l_base: float, l_pas: float, l_ibcl: float, cfg: PipelineConfig) -> float:
    """Detection loss plus weighted perspective and contrastive terms.

    A term whose branch is switched off in ``cfg`` is dropped.
    """
    for x in (l_base, l_pas, l_ibcl):
        if not math.isfinite(x):
            raise InputError(f"non-finite loss term {x}")
    lam_pas = cfg.lambda_pas if cfg.pas_enabled else 0.0
    lam_ibcl = cfg.lambda_ibcl if cfg.ibcl_enabled else 0.0
    return l_base + lam_pas * l_pas + lam_ibcl * l_ibcl


def with_grid(cfg: PipelineConfig, **grid_changes) -> PipelineConfig:
    return replace(cfg, grid=cfg.grid.with_(**grid_changes))
