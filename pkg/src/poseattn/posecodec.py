"""Joint coordinates <-> 18-channel Gaussian heatmaps, plus the keypoint JSON format."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

# OpenPose/COCO 18-joint order.
JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)
NUM_JOINTS = len(JOINT_NAMES)
JOINT_INDEX = {name: i for i, name in enumerate(JOINT_NAMES)}

DEFAULT_THRESHOLD = 0.1


class KeypointFormatError(ValueError):
    """Raised when a keypoint file or array violates the 18-joint schema."""


@dataclass(frozen=True)
class Keypoints:
    """18 joints as (x, y, visible). ``xy`` is (18, 2) float, ``visible`` is (18,) bool."""

    xy: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64)
        vis = np.asarray(self.visible, dtype=bool)
        if xy.shape != (NUM_JOINTS, 2) or vis.shape != (NUM_JOINTS,):
            raise KeypointFormatError(f"expected {NUM_JOINTS} joints, got {xy.shape[0] if xy.ndim else 0}")
        xy.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visible", vis)

    @classmethod
    def from_list(cls, joints: Sequence[Sequence[float]]) -> "Keypoints":
        if len(joints) != NUM_JOINTS:
            raise KeypointFormatError(f"expected {NUM_JOINTS} joints, got {len(joints)}")
        arr = np.asarray(joints, dtype=np.float64)
        if arr.shape != (NUM_JOINTS, 3):
            raise KeypointFormatError("joints: each entry must be [x, y, v]")
        return cls(arr[:, :2], arr[:, 2] > 0.5)

    def to_list(self) -> list[list[float]]:
        out = []
        for (x, y), v in zip(self.xy.tolist(), self.visible.tolist()):
            out.append([_compact(x), _compact(y), int(v)])
        return out

    def check_canvas(self, canvas: tuple[int, int]) -> None:
        h, w = canvas
        for k in np.flatnonzero(self.visible):
            x, y = self.xy[k]
            if not (0 <= x < w and 0 <= y < h):
                raise KeypointFormatError(
                    f"joints[{k}] ({JOINT_NAMES[k]}): coordinate out of range ({x}, {y}) for canvas {h}x{w}"
                )

    def __eq__(self, other):
        if not isinstance(other, Keypoints):
            return NotImplemented
        return np.array_equal(self.xy, other.xy) and np.array_equal(self.visible, other.visible)

    def __hash__(self):
        return hash((self.xy.tobytes(), self.visible.tobytes()))


def _compact(v: float):
    return int(v) if float(v).is_integer() else float(v)


def default_sigma(canvas: tuple[int, int]) -> float:
    """3 px at a height of 128, scaled linearly with canvas height."""
    return 3.0 * canvas[0] / 128.0


def keypoints_to_heatmap(kps: Keypoints, canvas: tuple[int, int], sigma: float | None = None) -> np.ndarray:
    """Render an (18, H, W) float32 heatmap; invisible joints give all-zero channels."""
    if sigma is None:
        sigma = default_sigma(canvas)
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    h, w = canvas
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    out = np.zeros((NUM_JOINTS, h, w), dtype=np.float32)
    for k in np.flatnonzero(kps.visible):
        x, y = kps.xy[k]
        d2 = (rows - y) ** 2 + (cols - x) ** 2
        out[k] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def heatmap_to_keypoints(hm: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> Keypoints:
    """Per-channel argmax decode. Ties resolve to the first index in row-major order."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    hm = np.asarray(hm)
    if hm.ndim != 3 or hm.shape[0] != NUM_JOINTS:
        raise ValueError(f"expected heatmap of shape ({NUM_JOINTS}, H, W), got {hm.shape}")
    flat = hm.reshape(NUM_JOINTS, -1)
    idx = flat.argmax(axis=1)  # np.argmax returns the first maximal index
    peak = flat[np.arange(NUM_JOINTS), idx]
    rows, cols = np.unravel_index(idx, hm.shape[1:])
    xy = np.stack([cols, rows], axis=1).astype(np.float64)
    visible = peak >= threshold
    xy[~visible] = 0.0
    return Keypoints(xy, visible)


def save_keypoints(kps: Keypoints, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"joints": kps.to_list()}))


def load_keypoints(path: str | Path, canvas: tuple[int, int] | None = None) -> Keypoints:
    """Parse a keypoint JSON file. With ``canvas`` given, visible joints are range-checked."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise KeypointFormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or "joints" not in doc:
        raise KeypointFormatError(f"{path}: missing field 'joints'")
    joints = doc["joints"]
    if not isinstance(joints, list):
        raise KeypointFormatError("joints: expected a list")
    if len(joints) != NUM_JOINTS:
        raise KeypointFormatError(f"joints: expected {NUM_JOINTS} joints, got {len(joints)}")
    for k, j in enumerate(joints):
        if not isinstance(j, list) or len(j) != 3 or not all(isinstance(v, (int, float)) for v in j):
            raise KeypointFormatError(f"joints[{k}]: expected [x, y, v]")
        if j[2] not in (0, 1):
            raise KeypointFormatError(f"joints[{k}]: visibility must be 0 or 1")
    kps = Keypoints.from_list(joints)
    if canvas is not None:
        kps.check_canvas(canvas)
    return kps
