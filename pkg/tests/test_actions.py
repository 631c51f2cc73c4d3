import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from airblow.actions import (CENTER_OFF_CLOTH, EMPTY_MASK, NO_PAIR, TOO_CLOSE, BagBlowAction, BlowAction,
                             GraspLine, GraspPair, Reject, blow_pose, edge_coincident_grasp, heuristic_blow,
                             heuristic_grasp, line_extremes, sample_blow_actions)
from airblow.perception import Mask

MPP = 1.1 / 64


def _mask(data):
    return Mask(np.asarray(data, dtype=bool), MPP)


def _scanline_oracle(data, row):
    cols = np.flatnonzero(data[row])
    return (row, int(cols[0])), (row, int(cols[-1]))


def test_horizontal_line_matches_scanline_oracle():
    data = np.zeros((64, 64), bool)
    data[20:40, 12:50] = True
    data[30, 5:12] = True     # a tail on one row
    for row in (20, 25, 30, 39):
        assert line_extremes(data, GraspLine(row, 30, 0.0)) == _scanline_oracle(data, row)


def test_vertical_line():
    data = np.zeros((64, 64), bool)
    data[10:55, 30:34] = True
    assert line_extremes(data, GraspLine(30, 31, 90.0)) == ((10, 31), (54, 31))


@given(st.floats(0, 180, exclude_max=True))
@settings(max_examples=60, deadline=None)
def test_disc_gives_diameter(angle):
    rr, cc = np.mgrid[:64, :64]
    radius = 20
    data = (rr - 32) ** 2 + (cc - 32) ** 2 <= radius**2
    res = edge_coincident_grasp(_mask(data), GraspLine(32, 32, angle))
    assert isinstance(res, GraspPair)
    d_px = math.dist(res.left_px, res.right_px)
    # both ends are disc pixels, and each sits at most one pixel diagonal
    # inside the continuous circle
    assert 2 * radius - 2 * math.sqrt(2) <= d_px <= 2 * radius
    assert res.separation == pytest.approx(d_px * MPP, rel=1e-9)


def test_left_has_smaller_column():
    data = np.zeros((64, 64), bool)
    data[20:40, 12:50] = True
    res = edge_coincident_grasp(_mask(data), GraspLine(30, 30, 180.0))
    assert res.left_px[1] < res.right_px[1]
    res = edge_coincident_grasp(_mask(data), GraspLine(30, 30, 90.0))
    assert res.left_px[0] < res.right_px[0]   # same column, tie broken by row


def test_grasp_line_angle_wraps():
    assert GraspLine(1, 2, 200.0).angle == pytest.approx(20.0)
    assert GraspLine(1, 2, -30.0).angle == pytest.approx(150.0)


def test_reject_centre_off_cloth():
    data = np.zeros((64, 64), bool)
    data[10:20, 10:50] = True
    res = edge_coincident_grasp(_mask(data), GraspLine(40, 30, 0.0))
    assert isinstance(res, Reject) and res.reason == CENTER_OFF_CLOTH
    assert not res
    res = edge_coincident_grasp(_mask(data), GraspLine(-5, 30, 0.0))
    assert res.reason == CENTER_OFF_CLOTH


def test_reject_below_safety_distance():
    data = np.zeros((64, 64), bool)
    data[30:33, 30:33] = True    # 3 px, about 5 cm
    res = edge_coincident_grasp(_mask(data), GraspLine(31, 31, 0.0))
    assert isinstance(res, Reject) and res.reason == TOO_CLOSE


def test_lifted_points_use_height_map():
    data = np.zeros((64, 64), bool)
    data[30, 10:50] = True
    hm = np.zeros((64, 64))
    hm[30, 10] = 0.07
    res = edge_coincident_grasp(_mask(data), GraspLine(30, 20, 0.0), hm)
    assert res.left[2] == 0.07 and res.right[2] == 0.0
    assert res.left[0] == pytest.approx(-0.55 + 10.5 * MPP)
    assert res.left[1] == pytest.approx(-0.55 + 30.5 * MPP)


def test_blow_pose_centre_action():
    pose = blow_pose(BlowAction(0.0, 0.0), (0.0, -0.42, 0.10))
    assert np.allclose(pose.origin, [0.0, -0.47, 0.03])
    t = math.radians(10)
    assert np.allclose(pose.axis, [0.0, math.cos(t), -math.sin(t)])


def test_blow_pose_offset_and_yaw():
    pose = blow_pose(BlowAction(0.1, 30.0), (0.2, -0.42, 0.10))
    assert np.allclose(pose.origin, [0.3, -0.47, 0.03])
    c = math.cos(math.radians(10))
    assert np.allclose(pose.axis[:2], [-0.5 * c, math.sqrt(3) / 2 * c])
    assert blow_pose((0.0, -30.0), (0, 0, 0)).axis[0] > 0


@pytest.mark.parametrize("px,rz", [(0.11, 0.0), (-0.2, 0.0), (0.0, 31.0), (0.0, -45.0)])
def test_blow_action_range(px, rz):
    with pytest.raises(ValueError):
        BlowAction(px, rz)


def test_blow_action_normalised():
    assert np.allclose(BlowAction(-0.1, 15.0).normalized(), [-1.0, 0.5])
    assert heuristic_blow() == BlowAction(0.0, 0.0)


def test_bag_blow_rectangle():
    BagBlowAction(0.0, 0.1, 5.0)
    with pytest.raises(ValueError):
        BagBlowAction(0.0, 0.2, 0.0)


def test_sampler_bounds_and_determinism():
    a = sample_blow_actions(500, np.random.default_rng(3))
    b = sample_blow_actions(500, np.random.default_rng(3))
    assert a == b
    arr = np.array([x.as_array() for x in a])
    assert arr[:, 0].min() >= -0.1 and arr[:, 0].max() <= 0.1
    assert arr[:, 1].min() >= -30 and arr[:, 1].max() <= 30
    # spread over the whole box
    assert np.ptp(arr[:, 0]) > 0.18 and np.ptp(arr[:, 1]) > 55
    with pytest.raises(ValueError):
        sample_blow_actions(0)


def test_heuristic_picks_far_apart_points_on_strip():
    data = np.zeros((64, 64), bool)
    data[31:33, 4:60] = True
    res = heuristic_grasp(_mask(data), np.random.default_rng(0))
    assert isinstance(res, GraspPair)
    assert abs(res.right_px[1] - res.left_px[1]) >= 0.8 * 55
    assert res.left_px[1] < res.right_px[1]


def test_heuristic_rejects():
    assert heuristic_grasp(_mask(np.zeros((64, 64))), np.random.default_rng(0)).reason == EMPTY_MASK
    dot = np.zeros((64, 64), bool)
    dot[5, 5] = True
    assert heuristic_grasp(_mask(dot), np.random.default_rng(0)).reason == NO_PAIR


def test_records_serialise():
    p = GraspPair((0.0, 1.0, 0.0), (1.0, 1.0, 0.0), (1, 2), (3, 4))
    assert p.to_record()["left_px"] == [1, 2]
    assert Reject("x").to_record() == {"reject": "x"}
    assert BlowAction(0.05, -3.0).to_record() == {"px": 0.05, "rz": -3.0}
