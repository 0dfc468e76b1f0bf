import numpy as np
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch import nn

from poseattn.detector import PoseDetector, detect, half_res_heatmap, joint_error, make_training_set
from poseattn.posecodec import NUM_JOINTS, Keypoints

CANVAS = (64, 32)


class Planted(nn.Module):
    """Stands in for a trained detector by returning fixed heatmaps."""

    def __init__(self, hm):
        super().__init__()
        self.hm = torch.from_numpy(hm)

    def forward(self, img):
        return self.hm.expand(len(img), -1, -1, -1)


def test_output_is_half_resolution():
    out = PoseDetector()(torch.zeros(2, 3, *CANVAS))
    assert out.shape == (2, NUM_JOINTS, 32, 16)


@given(st.integers(0, 10 ** 6))
def test_decoding_recovers_planted_joints(seed):
    g = np.random.default_rng(seed)
    xy = np.stack([g.uniform(2, 29, NUM_JOINTS), g.uniform(2, 61, NUM_JOINTS)], axis=1)
    vis = g.random(NUM_JOINTS) < 0.8
    kps = Keypoints(xy, vis)
    pred = detect(Planted(half_res_heatmap(kps, CANVAS)[None]), torch.zeros(1, 3, *CANVAS))[0]
    assert np.array_equal(pred.visible, vis)
    assert joint_error(pred, kps).max(initial=0) < 0.05


def test_joint_error_uses_target_visibility():
    xy = np.zeros((NUM_JOINTS, 2))
    target = Keypoints(xy, np.arange(NUM_JOINTS) < 3)
    pred = Keypoints(xy + [3.0, 4.0], np.ones(NUM_JOINTS, bool))
    assert np.array_equal(joint_error(pred, target), [5.0, 5.0, 5.0])


def test_training_set_shapes():
    imgs, hms = make_training_set(3, CANVAS, seed=0)
    assert imgs.shape == (3, 3, *CANVAS) and hms.shape == (3, NUM_JOINTS, 32, 16)
    assert float(hms.max()) <= 1.0 and float(imgs.abs().max()) <= 1.0
