import numpy as np
import pytest

from occuslam.depth_oracle import Primitive, SyntheticScene, render_depth
from occuslam.geometry import PinholeCamera, Pose, quat_from_rotvec
from occuslam.submap import InverseSensorParams, OccupancySubmap
from occuslam.submap_manager import (
    SubmapRegistry,
    overlap_fraction,
    should_spawn,
    visible_landmarks,
)

CAM = PinholeCamera(40.0, 40.0, 31.5, 23.5, 64, 48, near=0.1, far=6.0)


def integrated_map():
    scene = SyntheticScene([Primitive("plane", normal=[0.0, 0.0, -1.0], offset=-3.0)])
    m = OccupancySubmap(resolution=0.1)
    img = render_depth(scene, Pose.identity(), CAM)
    m.integrate_depth_image(Pose.identity(), img, InverseSensorParams())
    return m


def test_overlap_fraction_bounds_and_empty_map():
    m = OccupancySubmap(resolution=0.1)
    assert overlap_fraction(m, Pose.identity(), CAM) == 0.0
    full = integrated_map()
    f = overlap_fraction(full, Pose.identity(), CAM)
    assert 0.0 < f <= 1.0


def test_overlap_fraction_drops_when_looking_away():
    m = integrated_map()
    same = overlap_fraction(m, Pose.identity(), CAM)
    turned = overlap_fraction(
        m, Pose(quat_from_rotvec([0.0, np.pi, 0.0]), np.zeros(3)), CAM
    )
    assert turned < same
    assert turned < 0.05


def test_overlap_fraction_integer_budget():
    m = integrated_map()
    f_grid = overlap_fraction(m, Pose.identity(), CAM, samples=(16, 12, 8))
    f_budget = overlap_fraction(m, Pose.identity(), CAM, samples=1536)
    assert abs(f_grid - f_budget) < 0.2
    with pytest.raises(ValueError):
        overlap_fraction(m, Pose.identity(), CAM, samples=0)


def test_should_spawn_threshold_strict():
    assert should_spawn(0.19, 0.2)
    assert not should_spawn(0.2, 0.2)
    assert not should_spawn(0.9, 0.2)


def test_registry_add_and_latest():
    reg = SubmapRegistry()
    a = reg.add(OccupancySubmap(), anchor_state_index=0, creation_frame_id=0)
    b = reg.add(OccupancySubmap(), anchor_state_index=3, creation_frame_id=10)
    assert (a, b) == (0, 1)
    assert reg.latest == 1
    with pytest.raises(ValueError):
        reg.add(OccupancySubmap(), anchor_state_index=5, creation_frame_id=10)


def test_covisibility_ownership_and_counting():
    reg = SubmapRegistry()
    reg.add(OccupancySubmap(), 0, 0)
    reg.record_covisibility([1, 2, 3])  # first observations: owned by submap 0
    assert reg.landmark_owner == {1: 0, 2: 0, 3: 0}
    assert reg.covisibility[0] == {}

    reg.add(OccupancySubmap(), 1, 5)
    reg.record_covisibility([2, 3, 4])  # 2 and 3 co-observed with submap 0
    assert reg.covisibility[1] == {0: 2}
    assert reg.landmark_owner[4] == 1

    reg.add(OccupancySubmap(), 2, 9)
    reg.record_covisibility([1, 4])
    assert reg.covisibility[2] == {0: 1, 1: 1}


def test_select_target_oldest_above_threshold():
    reg = SubmapRegistry()
    for k in range(4):
        reg.add(OccupancySubmap(), k, k * 3)
    reg.covisibility[3] = {0: 150, 1: 99, 2: 200}
    assert reg.covisible_candidates(m_min=100) == [0, 2]
    assert reg.select_target(m_min=100) == 0
    assert reg.select_target(m_min=250) is None
    assert reg.covisible_candidates(m_min=250) == []


def test_apply_updates_moves_anchors():
    reg = SubmapRegistry()
    reg.add(OccupancySubmap(), 0, 0)
    reg.add(OccupancySubmap(), 1, 4)

    class S:
        poses = [Pose(t=np.array([1.0, 0.0, 0.0])), Pose(t=np.array([0.0, 2.0, 0.0]))]

    reg.apply_updates(S())
    assert np.allclose(reg.entries[0].submap.anchor.t, [1.0, 0.0, 0.0])
    assert np.allclose(reg.entries[1].submap.anchor.t, [0.0, 2.0, 0.0])


def test_registry_summary_shape():
    reg = SubmapRegistry()
    reg.add(OccupancySubmap(), 0, 0)
    reg.add(OccupancySubmap(), 1, 2)
    reg.covisibility[1] = {0: 7}
    s = reg.summary()
    assert s["submap_count"] == 2
    assert s["covisibility_edges"] == [{"from": 1, "to": 0, "count": 7}]


def test_visible_landmarks_frustum():
    lms = np.array(
        [
            [0.0, 0.0, 2.0],  # straight ahead
            [0.0, 0.0, -2.0],  # behind
            [0.0, 0.0, 7.0],  # beyond far
            [5.0, 0.0, 2.0],  # far outside the image
        ]
    )
    vis = visible_landmarks(lms, Pose.identity(), CAM)
    assert list(vis) == [0]


def test_visible_landmarks_occlusion():
    # wall at z = 2 hides a landmark at z = 4 but not one at z = 1.5
    scene = SyntheticScene([Primitive("plane", normal=[0.0, 0.0, -1.0], offset=-2.0)])
    lms = np.array([[0.0, 0.0, 1.5], [0.1, 0.1, 4.0]])
    vis = visible_landmarks(lms, Pose.identity(), CAM, scene=scene)
    assert list(vis) == [0]
    # without the scene both are inside the frustum
    vis_free = visible_landmarks(lms, Pose.identity(), CAM)
    assert list(vis_free) == [0, 1]
