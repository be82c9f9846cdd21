import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vln3d.errors import ConfigurationError, ContractViolation, GenerationError
from vln3d.reconstruct import merge_panorama, unproject_view
from vln3d.scene import (
    BACKGROUND,
    FLOOR_CLASS,
    WALL_CLASS,
    Box,
    CameraPose,
    SceneConfig,
    SceneGraph,
    generate_scene,
    panorama_poses,
    points_on_surface,
    render_panorama,
    render_view,
)


def wall_scene(distance=2.0):
    # a huge wall whose near face sits `distance` metres in front of the origin
    wall = Box((distance + 0.5, 0.0, 0.0), (0.5, 50.0, 50.0), WALL_CLASS, (0.5, 0.5, 0.5))
    return SceneGraph([wall], (-60.0, -60.0, -60.0), (60.0, 60.0, 60.0), 4, 0)


def test_same_seed_same_scene():
    assert generate_scene(11).to_dict() == generate_scene(11).to_dict()
    assert generate_scene(11).to_dict() != generate_scene(12).to_dict()


def test_zero_furniture_only_structure():
    s = generate_scene(3, SceneConfig(n_furniture=0))
    assert {b.class_id for b in s.boxes} <= {FLOOR_CLASS, WALL_CLASS}


def test_boxes_within_bounds_many_seeds():
    for seed in range(1000):
        s = generate_scene(seed)
        lo, hi, ids, _ = s.arrays()
        assert np.all(lo >= np.asarray(s.bounds_lo) - 1e-12)
        assert np.all(hi <= np.asarray(s.bounds_hi) + 1e-12)
        assert np.all(hi > lo)
        assert np.all(ids < s.num_classes)


def test_no_object_inside_another():
    for seed in range(50):
        lo, hi, _, _ = generate_scene(seed).arrays()
        for i in range(len(lo)):
            for j in range(len(lo)):
                if i != j:
                    assert not (np.all(lo[i] >= lo[j]) and np.all(hi[i] <= hi[j]))


def test_infeasible_config_raises():
    cfg = SceneConfig(room_size=(2.0, 2.0), n_furniture=40, furniture_half_xy=(0.6, 0.9), max_retries=20)
    with pytest.raises(GenerationError):
        generate_scene(0, cfg)


def test_too_few_classes():
    with pytest.raises(ConfigurationError):
        generate_scene(0, SceneConfig(num_classes=1))


def test_scene_file_round_trip(tmp_path):
    s = generate_scene(5)
    path = tmp_path / "scene.json"
    s.save(path)
    assert SceneGraph.load(path).to_dict() == s.to_dict()
    assert s.to_dict()["format"].startswith("vln3d-scene/")


def test_empty_scene_renders_background():
    s = SceneGraph([], (-5.0, -5.0, -5.0), (5.0, 5.0, 5.0), 3)
    v = render_view(s, CameraPose.with_fov((0.0, 0.0, 0.0)))
    assert np.all(v.depth == 0)
    assert np.all(v.labels == BACKGROUND)


def test_wall_center_depth():
    v = render_view(wall_scene(2.0), CameraPose.with_fov((0.0, 0.0, 0.0)))
    c = v.depth.shape[0] // 2
    assert v.depth[c, c] == pytest.approx(2.0, abs=1e-9)
    # optical-axis depth: every pixel on a fronto-parallel wall has the same depth
    assert np.allclose(v.depth, 2.0, atol=1e-9)


def test_pitch_validation():
    with pytest.raises(ContractViolation):
        CameraPose((0.0, 0.0, 0.0), pitch=math.pi / 2)


def test_hit_points_on_surfaces():
    s = generate_scene(2)
    pose = CameraPose.with_fov((0.5, -0.3, 1.4), yaw=0.7, pitch=-0.3)
    v = render_view(s, pose)
    cloud = unproject_view(v)
    assert len(cloud) > 0
    assert points_on_surface(s, cloud.points, 1e-6).all()
    # sentinel labels exactly where depth is zero
    assert np.array_equal(v.labels == BACKGROUND, v.depth == 0)


def test_occlusion_nearest_wins():
    near = Box((2.5, 0.0, 0.0), (0.5, 0.3, 0.3), 2, (1.0, 0.0, 0.0))
    far = Box((6.5, 0.0, 0.0), (0.5, 9.0, 9.0), 3, (0.0, 1.0, 0.0))
    s = SceneGraph([far, near], (-10.0,) * 3, (10.0,) * 3, 4)
    v = render_view(s, CameraPose.with_fov((0.0, 0.0, 0.0)))
    c = v.depth.shape[0] // 2
    assert v.labels[c, c] == 2 and v.depth[c, c] == pytest.approx(2.0)
    assert v.labels[0, 0] == 3


def test_panorama_layout():
    s = generate_scene(4)
    single = render_panorama(s, (0.0, 0.0, 1.5), headings=1, pitches=[0.0])
    assert len(single) == 1 and single[0].pose.yaw == 0.0
    views = render_panorama(s, (0.0, 0.0, 1.5))
    assert len(views) == 36
    assert [v.pose.pitch for v in views[:12]] == [-0.5] * 12
    yaws = [v.pose.yaw for v in views[12:24]]
    assert np.allclose(np.diff(yaws), 2 * math.pi / 12)


def test_panorama_covers_single_view():
    s = generate_scene(9)
    pos = (0.3, 0.2, 1.5)
    poses = panorama_poses(pos)
    views = [render_view(s, p) for p in poses]
    merged = merge_panorama(views, poses, pos)
    one = unproject_view(views[17]).points - np.asarray(pos)
    have = {tuple(r) for r in np.round(merged.points, 9)}
    assert all(tuple(r) in have for r in np.round(one, 9))


def test_render_deterministic():
    s = generate_scene(6)
    pose = CameraPose.with_fov((0.0, 0.0, 1.2), yaw=1.0)
    a, b = render_view(s, pose), render_view(s, pose)
    assert np.array_equal(a.depth, b.depth) and np.array_equal(a.labels, b.labels)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-math.pi, math.pi), st.floats(-1.0, 1.0))
def test_random_views_land_on_faces(seed, yaw, pitch):
    s = generate_scene(seed)
    v = render_view(s, CameraPose.with_fov((0.1, 0.1, 1.3), yaw=yaw, pitch=pitch, width=16, height=16))
    cloud = unproject_view(v)
    assert points_on_surface(s, cloud.points, 1e-6).all()
