import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseattn.posecodec import (NUM_JOINTS, KeypointFormatError, Keypoints, default_sigma, heatmap_to_keypoints,
                                keypoints_to_heatmap, load_keypoints, save_keypoints)


def single_joint(x, y, k=0):
    xy = np.zeros((NUM_JOINTS, 2))
    vis = np.zeros(NUM_JOINTS, bool)
    xy[k] = (x, y)
    vis[k] = True
    return Keypoints(xy, vis)


def test_peak_at_joint():
    hm = keypoints_to_heatmap(single_joint(10, 20), (64, 32), sigma=3.0)
    assert hm[0, 20, 10] == 1.0
    assert np.unravel_index(hm[0].argmax(), hm[0].shape) == (20, 10)


def test_invisible_channel_is_zero():
    hm = keypoints_to_heatmap(single_joint(10, 20), (64, 32), sigma=3.0)
    assert hm[1:].sum() == 0.0


def test_value_three_rows_below():
    hm = keypoints_to_heatmap(single_joint(10, 20), (64, 32), sigma=3.0)
    assert hm[0, 23, 10] == pytest.approx(math.exp(-9 / 18), abs=1e-6)
    assert hm[0, 23, 10] == pytest.approx(0.6065, abs=1e-4)


def test_matches_formula_everywhere():
    hm = keypoints_to_heatmap(single_joint(7, 30), (40, 20), sigma=2.5)
    for i in range(0, 40, 7):
        for j in range(0, 20, 3):
            expected = math.exp(-((i - 30) ** 2 + (j - 7) ** 2) / (2 * 2.5 ** 2))
            assert hm[0, i, j] == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("sigma", [0.0, -1.0])
def test_bad_sigma(sigma):
    with pytest.raises(ValueError):
        keypoints_to_heatmap(single_joint(1, 1), (32, 16), sigma=sigma)


def test_default_sigma_scales_with_height():
    assert default_sigma((128, 64)) == 3.0
    assert default_sigma((64, 32)) == 1.5


def test_all_zero_heatmap_decodes_invisible():
    kps = heatmap_to_keypoints(np.zeros((NUM_JOINTS, 16, 8)))
    assert not kps.visible.any()


def test_tie_break_row_major():
    hm = np.zeros((NUM_JOINTS, 10, 10))
    hm[0, 6, 2] = 1.0
    hm[0, 3, 8] = 1.0
    hm[0, 3, 9] = 1.0
    kps = heatmap_to_keypoints(hm)
    assert tuple(kps.xy[0]) == (8.0, 3.0)


@pytest.mark.parametrize("threshold", [0.0, 1.0, 1.5])
def test_threshold_range(threshold):
    with pytest.raises(ValueError):
        heatmap_to_keypoints(np.zeros((NUM_JOINTS, 4, 4)), threshold)


@st.composite
def keypoints(draw, h=32, w=16):
    xs = draw(st.lists(st.integers(0, w - 1), min_size=NUM_JOINTS, max_size=NUM_JOINTS))
    ys = draw(st.lists(st.integers(0, h - 1), min_size=NUM_JOINTS, max_size=NUM_JOINTS))
    vis = np.array(draw(st.lists(st.booleans(), min_size=NUM_JOINTS, max_size=NUM_JOINTS)))
    xy = np.stack([xs, ys], 1).astype(float)
    xy[~vis] = 0
    return Keypoints(xy, vis)


@given(keypoints(), st.floats(0.3, 8.0))
def test_round_trip_exact(kps, sigma):
    hm = keypoints_to_heatmap(kps, (32, 16), sigma)
    assert heatmap_to_keypoints(hm) == kps


@given(keypoints(), st.floats(0.3, 8.0))
def test_heatmap_range_and_monotone(kps, sigma):
    hm = keypoints_to_heatmap(kps, (32, 16), sigma)
    assert hm.min() >= 0.0 and hm.max() <= 1.0
    for k in np.flatnonzero(kps.visible):
        x, y = kps.xy[k].astype(int)
        row = hm[k, y]
        # decays moving away from the joint along its row
        assert np.all(np.diff(row[x:]) <= 0) and np.all(np.diff(row[:x + 1]) >= 0)


def test_determinism():
    kps = single_joint(3, 4)
    assert np.array_equal(keypoints_to_heatmap(kps, (32, 16)), keypoints_to_heatmap(kps, (32, 16)))


def _write(path, joints):
    path.write_text(json.dumps({"joints": joints}))
    return path


def test_load_valid(tmp_path):
    kps = single_joint(5, 9, k=3)
    save_keypoints(kps, tmp_path / "k.json")
    assert load_keypoints(tmp_path / "k.json", (32, 16)) == kps


def test_load_wrong_count(tmp_path):
    p = _write(tmp_path / "k.json", [[0, 0, 1]] * 17)
    with pytest.raises(KeypointFormatError, match="expected 18 joints"):
        load_keypoints(p)


def test_load_out_of_range(tmp_path):
    joints = [[0, 0, 0]] * NUM_JOINTS
    joints[2] = [16, 5, 1]  # x == W
    p = _write(tmp_path / "k.json", joints)
    with pytest.raises(KeypointFormatError, match="coordinate out of range"):
        load_keypoints(p, (32, 16))


def test_load_out_of_range_invisible_ok(tmp_path):
    joints = [[0, 0, 0]] * NUM_JOINTS
    joints[2] = [99, 99, 0]
    assert not load_keypoints(_write(tmp_path / "k.json", joints), (32, 16)).visible.any()


def test_load_bad_visibility(tmp_path):
    joints = [[0, 0, 2]] * NUM_JOINTS
    with pytest.raises(KeypointFormatError, match="visibility"):
        load_keypoints(_write(tmp_path / "k.json", joints))


def test_load_garbage(tmp_path):
    p = tmp_path / "k.json"
    p.write_text("{not json")
    with pytest.raises(KeypointFormatError):
        load_keypoints(p)
