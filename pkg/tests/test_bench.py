import csv
import json
import statistics
import time
from dataclasses import replace

import numpy as np
import pytest

from instbev.attention import BevTensor, sca
from instbev.bench import (CSV_FIELDS, REPORTED_GFLOPS, CostModel, config_hash, deform_sample_flops,
                           estimate_flops, resolution_scaling, run_bench)
from instbev.featmap import SamplingParams
from instbev.geometry import BevGridSpec
from instbev.pipeline import PipelineConfig, PipelineParams, Scene, with_grid
from instbev.scenesim import SimSpec, generate_scene

from _helpers import constant_map, covering_camera

CFG = PipelineConfig()


def test_no_foreground_no_overhead():
    est = estimate_flops(CFG, 0)
    assert est["refined"] == est["baseline"] and est["ratio"] == 1.0


def test_closed_form_ratio():
    assert estimate_flops(CFG, 10)["ratio"] == pytest.approx(1.064, abs=1e-12)


def test_five_percent_foreground():
    assert estimate_flops(CFG, 125)["ratio"] == pytest.approx(1.8, abs=1e-12)


def test_baseline_count():
    # 3 layers x 2500 cells x 4 views x 4 heights x (8 + 9*32) FLOPs
    assert estimate_flops(CFG, 0)["baseline"] == 3 * 2500 * 4 * 4 * 296
    assert deform_sample_flops(32, 4) == 4 * 296


def test_linear_in_fg():
    f = [estimate_flops(CFG, n)["refined"] for n in range(0, 40, 5)]
    d = np.diff(f)
    assert (d == d[0]).all() and d[0] > 0


def test_quadratic_in_r():
    f = [estimate_flops(with_grid(CFG, refine_r=r), 7)["refined"] for r in range(1, 8)]
    d2 = np.diff(f, n=2)
    assert (d2 == d2[0]).all() and d2[0] > 0
    assert not np.diff(f, n=3).any()


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(10, 5, 6, 4, 4, 4, 3)


def test_resolution_scaling():
    s = resolution_scaling()
    assert s["model_sca_ratio"] == 16.0
    assert s["reported_end_to_end_ratio"] == pytest.approx(364.06 / 141.49)
    assert round(s["reported_end_to_end_ratio"], 2) == 2.57
    assert REPORTED_GFLOPS[("tiny-refined", 50)] == 141.56


def test_config_hash_stable():
    assert config_hash(CFG) == config_hash(PipelineConfig())
    assert config_hash(CFG) != config_hash(replace(CFG, n_layers=2))


def _time_sca(n_c, n_ref, repeat=7):
    grid = BevGridSpec(n_ref=n_ref)
    cams = [covering_camera(k, width=800, height=800, f=200.0) for k in range(n_c)]
    fms = [constant_map(k, 1.0, channels=32, h=101, w=101) for k in range(n_c)]
    q = BevTensor(np.zeros((50, 50, 32)))
    sca(grid, cams, fms, SamplingParams.identity(), q)  # warm-up
    ts = []
    for _ in range(repeat):
        t = time.perf_counter_ns()
        sca(grid, cams, fms, SamplingParams.identity(), q)
        ts.append(time.perf_counter_ns() - t)
    return statistics.median(ts)


@pytest.mark.slow
def test_time_linear_in_samples():
    # 4x sweep of n_ref * n_c (2 -> 8); every reference point is in view of every camera
    sweep = [(1, 2), (2, 2), (2, 4)]
    per_sample = [_time_sca(nc, nr) / (nc * nr) for nc, nr in sweep]
    mean = statistics.mean(per_sample)
    for p in per_sample:
        assert abs(p / mean - 1) <= 0.3, per_sample


@pytest.fixture(scope="module")
def bench_scene():
    return generate_scene(SimSpec())


@pytest.mark.slow
def test_measured_overhead_tracks_model(bench_scene, tmp_path):
    cfg = replace(CFG, n_layers=1)
    params = PipelineParams.init(cfg, bench_scene.channels)
    rep = run_bench(bench_scene, cfg, params, repeat=3)
    assert rep.fg_fraction <= 0.05 and rep.model_ratio <= 1.8
    assert rep.model_fraction / 2 <= rep.measured_fraction <= rep.model_fraction * 2
    rep.write(tmp_path)
    rep.write(tmp_path)
    doc = json.loads((tmp_path / "bench_report.json").read_text())
    assert doc["fg_cells"] == rep.fg_cells and doc["context"]["model_sca_ratio"] == 16.0
    rows = list(csv.DictReader((tmp_path / "bench.csv").open()))
    assert len(rows) == 2 and list(rows[0]) == CSV_FIELDS
    assert int(rows[0]["model_refined"]) == rep.model_refined


@pytest.mark.slow
def test_model_fields_deterministic(bench_scene):
    cfg = replace(CFG, n_layers=1)
    params = PipelineParams.init(cfg, bench_scene.channels)
    a = run_bench(bench_scene, cfg, params, repeat=1).to_json()
    b = run_bench(bench_scene, cfg, params, repeat=1).to_json()
    timing = {"measured_baseline_ns", "measured_refined_ns", "overhead_ratio", "cross_run_ratio"}
    assert {k: v for k, v in a.items() if k not in timing} == {k: v for k, v in b.items() if k not in timing}


@pytest.mark.slow
def test_empty_boxes_no_measured_overhead(bench_scene):
    empty = Scene(bench_scene.cams, bench_scene.feature_maps, [], [])
    cfg = replace(CFG, n_layers=1)
    rep = run_bench(empty, cfg, PipelineParams.init(cfg, empty.channels), repeat=5)
    assert rep.fg_cells == 0 and rep.model_ratio == 1.0
    assert abs(rep.overhead_ratio - 1.0) <= 0.05
