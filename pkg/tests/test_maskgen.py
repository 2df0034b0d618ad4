import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instbev.errors import ConfigError
from instbev.geometry import BevGridSpec, ImagePoint, lift, grid_to_world, pillar_heights, project_points
from instbev.maskgen import Box2D, ForegroundMask, build_mask, load_boxes, point_in_box, save_boxes
from instbev.scenesim import SimSpec, expected_foreground, generate_scene

from _helpers import covering_camera

GRID = BevGridSpec(h=20, w=20, range_min_x=-60, range_max_x=60, range_min_y=-60, range_max_y=60)


def pt(u, v, valid=True, view=0):
    return ImagePoint(u, v, 10.0 if valid else -1.0, view, valid)


class TestPointInBox:
    def test_inside(self):
        assert point_in_box(pt(5, 5), Box2D(0, 0, 0, 10, 10))

    def test_invalid_point(self):
        assert not point_in_box(pt(5, 5, valid=False), Box2D(0, 0, 0, 10, 10))

    def test_closed_boundary(self):
        assert point_in_box(pt(10, 10), Box2D(0, 0, 0, 10, 10))
        assert point_in_box(pt(0, 0), Box2D(0, 0, 0, 10, 10))

    def test_other_view(self):
        assert not point_in_box(pt(5, 5, view=1), Box2D(0, 0, 0, 10, 10))

    def test_degenerate_box_rejected(self):
        with pytest.raises(ConfigError):
            Box2D(0, 5, 0, 5, 10)


def test_empty_boxes_give_empty_mask():
    m = build_mask(GRID, [covering_camera(pos=(0, 0, 50))], [])
    assert m.values.shape == (20, 20) and m.count == 0


def test_unknown_view_is_config_error():
    with pytest.raises(ConfigError):
        build_mask(GRID, [covering_camera()], [Box2D(3, 0, 0, 10, 10)])


def test_no_cameras_is_config_error():
    with pytest.raises(ConfigError):
        build_mask(GRID, [], [])


def test_full_image_box_marks_every_validly_projecting_cell():
    cam = covering_camera(pos=(10, -5, 0), width=300, height=200, f=200.0)
    box = Box2D(0, 0, 0, 300, 200)
    mask = build_mask(GRID, [cam], [box])
    z = pillar_heights(GRID)
    for gy in range(GRID.h):
        for gx in range(GRID.w):
            pts = lift(grid_to_world(GRID, gx, gy).reshape(1, 2), z)
            n_valid = int(project_points(cam, pts)[2].sum())
            assert mask.hit_counts[gy, gx] == n_valid
            assert mask.values[gy, gx] == (n_valid > 0)
    assert 0 < mask.count < GRID.cells


def test_box_only_in_second_view_equals_single_view_run():
    c0 = covering_camera(0, pos=(-20, 0, 0))
    c1 = covering_camera(1, pos=(20, 0, 0))
    box = Box2D(1, 120, 150, 260, 300)
    both = build_mask(GRID, [c0, c1], [box])
    alone = build_mask(GRID, [c1], [box])
    np.testing.assert_array_equal(both.values, alone.values)
    np.testing.assert_array_equal(both.hit_counts, alone.hit_counts)
    assert both.count > 0


def random_boxes(rng, cams, n):
    boxes = []
    for _ in range(n):
        cam = cams[rng.integers(len(cams))]
        x0, x1 = np.sort(rng.uniform(-50, cam.image_width + 50, 2))
        y0, y1 = np.sort(rng.uniform(-50, cam.image_height + 50, 2))
        if x1 > x0 and y1 > y0:
            boxes.append(Box2D(cam.view_id, x0, y0, x1, y1))
    return boxes


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_adding_a_box_never_unmarks(seed):
    rng = np.random.default_rng(seed)
    scene = generate_scene(SimSpec(n_uavs=int(rng.integers(1, 5)), n_objects=0, channels=1))
    boxes = random_boxes(rng, scene.cams, int(rng.integers(0, 6)))
    extra = random_boxes(rng, scene.cams, 1)
    grid = BevGridSpec(h=16, w=16)
    before = build_mask(grid, scene.cams, boxes)
    after = build_mask(grid, scene.cams, boxes + extra)
    assert np.all(after.values >= before.values)
    assert np.all(after.hit_counts >= before.hit_counts)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_union_of_samplings_is_or_of_masks(seed):
    rng = np.random.default_rng(seed)
    scene = generate_scene(SimSpec(n_uavs=4, n_objects=4, channels=1, rng_seed=int(rng.integers(2**31))))
    g2, g4 = BevGridSpec(h=24, w=24, n_ref=2), BevGridSpec(h=24, w=24, n_ref=4)
    m2 = build_mask(g2, scene.cams, scene.boxes_2d)
    m4 = build_mask(g4, scene.cams, scene.boxes_2d)
    union = np.concatenate([pillar_heights(g2), pillar_heights(g4)])
    mu = build_mask(g4, scene.cams, scene.boxes_2d, z_values=union)
    np.testing.assert_array_equal(mu.values, m2.values | m4.values)


@pytest.mark.parametrize("seed", range(10))
def test_matches_bruteforce_oracle(seed):
    scene = generate_scene(SimSpec(n_objects=5, channels=1, rng_seed=seed))
    grid = BevGridSpec(h=30, w=30)
    got = build_mask(grid, scene.cams, scene.boxes_2d)
    want = expected_foreground(None, scene, grid)
    np.testing.assert_array_equal(got.values, want.values)
    np.testing.assert_array_equal(got.hit_counts, want.hit_counts)


def test_mask_exports(tmp_path):
    scene = generate_scene(SimSpec(n_objects=3, channels=1))
    m = build_mask(BevGridSpec(h=12, w=10), scene.cams, scene.boxes_2d)
    m.save(tmp_path / "m.pgm")
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n10 12\n255\n")
    body = np.frombuffer(raw[len(b"P5\n10 12\n255\n"):], dtype=np.uint8).reshape(12, 10)
    np.testing.assert_array_equal(body, m.values * 255)
    m.save(tmp_path / "m.json")
    back = ForegroundMask.from_json(json.loads((tmp_path / "m.json").read_text()))
    np.testing.assert_array_equal(back.values, m.values)
    np.testing.assert_array_equal(back.hit_counts, m.hit_counts)
    assert np.array_equal(m.values == 1, m.hit_counts >= 1)


def test_box_json_round_trip(tmp_path):
    boxes = [Box2D(0, 1.5, 2.5, 3.5, 4.5, 2), Box2D(1, 0, 0, 1, 1)]
    save_boxes(boxes, tmp_path / "b.json")
    doc = json.loads((tmp_path / "b.json").read_text())
    assert set(doc[0]) == {"view_id", "x_min", "y_min", "x_max", "y_max", "label"}
    assert load_boxes(tmp_path / "b.json") == boxes
