"""Procedural stick-figure people with controlled identity and pose.

Identity is a small parameter vector (three colors, limb thickness, height
scale) and pose is an explicit 18-joint skeleton, so every quantity the
pipeline is judged on has a known ground truth.
"""
from __future__ import annotations

import dataclasses
import functools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from poseattn.posecodec import JOINT_INDEX, JOINT_NAMES, Keypoints, save_keypoints
from poseattn.seeding import substream

DEFAULT_CANVAS = (128, 64)
REFERENCE_HEIGHT = 128
TEMPLATES = ("stand", "walk", "side", "sit")
# Background gray per camera, in [0, 1].
CAMERA_GRAY = (0.30, 0.55)
MIN_COLOR_SEPARATION = 0.1
MIN_BACKGROUND_SEPARATION = 0.25
MIN_CHROMA = 0.25
MAX_BONE_ROTATION = 12.0  # degrees
MAX_HEAD_ROTATION = 5.0
MAX_TORSO_ROTATION = 3.0


class EmptyPoseError(ValueError):
    pass


@dataclass(frozen=True)
class IdentityParams:
    identity_id: int
    torso_color: tuple[float, float, float]
    limb_color: tuple[float, float, float]
    head_color: tuple[float, float, float]
    limb_thickness: int  # pixels at a canvas height of 128
    height_scale: float

    def color_vector(self) -> np.ndarray:
        return np.array(self.torso_color + self.limb_color + self.head_color)


# --------------------------------------------------------------------------- identities


def draw_identity(seed: int, attempt: int) -> IdentityParams:
    rng = substream(seed, f"identity/{attempt}")
    while True:
        colors = np.round(rng.uniform(0.0, 1.0, size=(3, 3)), 4)
        # every color must stand out from both camera backgrounds and carry a
        # well-defined hue
        far = all(np.abs(c - g).max() >= MIN_BACKGROUND_SEPARATION for c in colors for g in CAMERA_GRAY)
        vivid = (colors.max(axis=1) - colors.min(axis=1)).min() >= MIN_CHROMA
        if far and vivid:
            break
    thickness = int(rng.integers(3, 6))
    scale = float(np.clip(np.round(rng.uniform(0.8, 1.2), 4), 0.8, 1.2))
    c = [tuple(float(v) for v in row) for row in colors]
    return IdentityParams(seed, c[0], c[1], c[2], thickness, scale)


@functools.lru_cache(maxsize=None)
def _identity_chain(seed: int) -> IdentityParams:
    # Rejection against every lower seed makes the separation rule hold for
    # any pair of seeds while staying a pure function of ``seed``.
    previous = np.array([_identity_chain(s).color_vector() for s in range(seed)]).reshape(-1, 9)
    attempt = 0
    while True:
        cand = draw_identity(seed, attempt)
        if previous.size == 0 or np.abs(previous - cand.color_vector()).max(axis=1).min() >= MIN_COLOR_SEPARATION:
            return cand
        attempt += 1


def sample_identity(seed: int) -> IdentityParams:
    if seed < 0:
        raise ValueError("identity seed must be non-negative")
    # warm the cache bottom-up so deep chains do not recurse
    for s in range(0, seed, 256):
        _identity_chain(s)
    return _identity_chain(seed)


# --------------------------------------------------------------------------- poses

# Templates are bone angles over one set of bone lengths, so foreground area
# (and hence the color histogram) barely depends on the pose. Angles are in
# degrees from straight down, positive towards +x; lengths are pixels at the
# reference height. Sitting shortens the torso and widens the shoulders by the
# same total stroke length.
_BONE_LENGTH = {
    "nose": 12.8, "r_eye": 3.0, "l_eye": 3.0, "r_ear": 3.0, "l_ear": 3.0,
    "r_shoulder": 10.5, "l_shoulder": 10.5, "r_hip": 38.7, "l_hip": 38.7,
    "r_elbow": 17.0, "r_wrist": 17.0, "l_elbow": 17.0, "l_wrist": 17.0,
    "r_knee": 23.0, "r_ankle": 23.0, "l_knee": 23.0, "l_ankle": 23.0,
}
_SIT_LENGTH = {"r_shoulder": 15.5, "l_shoulder": 15.5, "r_hip": 33.7, "l_hip": 33.7}
_FRONT_FACE = {"nose": 180.0, "r_eye": -120.0, "l_eye": 120.0, "r_ear": -100.0, "l_ear": 100.0}
_TEMPLATE_ANGLES = {
    "stand": dict(_FRONT_FACE, **{
        "r_shoulder": -78.0, "r_elbow": -17.0, "r_wrist": -9.0,
        "l_shoulder": 78.0, "l_elbow": 17.0, "l_wrist": 9.0,
        "r_hip": -12.0, "r_knee": -2.0, "r_ankle": -2.0,
        "l_hip": 12.0, "l_knee": 2.0, "l_ankle": 2.0,
    }),
    "walk": dict(_FRONT_FACE, **{
        "r_shoulder": -78.0, "r_elbow": -35.0, "r_wrist": -30.0,
        "l_shoulder": 78.0, "l_elbow": 10.0, "l_wrist": 20.0,
        "r_hip": -12.0, "r_knee": -20.0, "r_ankle": -15.0,
        "l_hip": 12.0, "l_knee": 15.0, "l_ankle": 20.0,
    }),
    "side": {
        "nose": 160.0, "r_eye": 130.0, "l_eye": 130.0, "r_ear": -110.0, "l_ear": -110.0,
        "r_shoulder": -50.0, "r_elbow": -25.0, "r_wrist": 5.0,
        "l_shoulder": 50.0, "l_elbow": 35.0, "l_wrist": 55.0,
        "r_hip": -12.0, "r_knee": -22.0, "r_ankle": -8.0,
        "l_hip": 12.0, "l_knee": 25.0, "l_ankle": 10.0,
    },
    "sit": dict(_FRONT_FACE, **{
        "r_shoulder": -80.0, "r_elbow": -10.0, "r_wrist": 20.0,
        "l_shoulder": 80.0, "l_elbow": 10.0, "l_wrist": -20.0,
        "r_hip": -14.0, "r_knee": -55.0, "r_ankle": 10.0,
        "l_hip": 14.0, "l_knee": 55.0, "l_ankle": -10.0,
    }),
}
_NECK_Y = {"stand": 0.24, "walk": 0.24, "side": 0.24, "sit": 0.36}

# In profile the near-side face joints hide the far-side ones.
_TEMPLATE_HIDDEN = {"side": ("r_eye", "r_ear")}

# Kinematic tree used for the angle perturbation: child -> parent.
_PARENT = {
    "nose": "neck", "r_shoulder": "neck", "l_shoulder": "neck", "r_hip": "neck", "l_hip": "neck",
    "r_elbow": "r_shoulder", "r_wrist": "r_elbow", "l_elbow": "l_shoulder", "l_wrist": "l_elbow",
    "r_knee": "r_hip", "r_ankle": "r_knee", "l_knee": "l_hip", "l_ankle": "l_knee",
    "r_eye": "nose", "l_eye": "nose", "r_ear": "r_eye", "l_ear": "l_eye",
}
_HEAD_JOINTS = {"nose", "r_eye", "l_eye", "r_ear", "l_ear"}
_TORSO_JOINTS = {"r_shoulder", "l_shoulder", "r_hip", "l_hip"}


def _bone_vector(template: str, joint: str, angle_deg: float, scale: float) -> np.ndarray:
    length = _SIT_LENGTH.get(joint, _BONE_LENGTH[joint]) if template == "sit" else _BONE_LENGTH[joint]
    a = math.radians(angle_deg)
    return scale * length * np.array([math.sin(a), math.cos(a)])


def template_keypoints(template: str, canvas: tuple[int, int] = DEFAULT_CANVAS) -> np.ndarray:
    """Unperturbed (18, 2) pixel coordinates of a template (unrounded)."""
    return _build_skeleton(template, canvas, {})


def _build_skeleton(template: str, canvas, jitter: dict) -> np.ndarray:
    if template not in _TEMPLATE_ANGLES:
        raise ValueError(f"unknown pose template {template!r}; expected one of {TEMPLATES}")
    h, w = canvas
    scale = h / REFERENCE_HEIGHT
    angles = _TEMPLATE_ANGLES[template]
    pos = {"neck": np.array([0.5 * w, _NECK_Y[template] * h])}
    offset = {}
    for n in _TOPO:
        if n == "neck":
            continue
        p = _PARENT[n]
        # a perturbation of a bone carries over to every bone below it
        offset[n] = offset.get(p, 0.0) + jitter.get(n, 0.0)
        pos[n] = pos[p] + _bone_vector(template, n, angles[n] + offset[n], scale)
    return np.array([pos[n] for n in JOINT_NAMES])


def _children_first_order():
    order, seen = [], set()

    def visit(n):
        if n in seen:
            return
        if n in _PARENT:
            visit(_PARENT[n])
        seen.add(n)
        order.append(n)

    for n in JOINT_NAMES:
        visit(n)
    return order


_TOPO = _children_first_order()


def _finalize(xy: np.ndarray, visible: np.ndarray, canvas) -> Keypoints:
    h, w = canvas
    xy = np.rint(xy)
    xy[:, 0] = np.clip(xy[:, 0], 0, w - 1)
    xy[:, 1] = np.clip(xy[:, 1], 0, h - 1)
    xy[~visible] = 0.0
    return Keypoints(xy, visible)


def sample_pose(seed: int, template: str, canvas: tuple[int, int] = DEFAULT_CANVAS) -> Keypoints:
    """Template skeleton with bounded random bone rotations; integer joint coordinates."""
    if template not in _TEMPLATE_ANGLES:
        raise ValueError(f"unknown pose template {template!r}; expected one of {TEMPLATES}")
    rng = substream(seed, f"pose/{template}")
    h, w = canvas
    jitter = {}
    for n in _TOPO[1:]:
        if n in _HEAD_JOINTS:
            limit = MAX_HEAD_ROTATION
        elif n in _TORSO_JOINTS:
            limit = MAX_TORSO_ROTATION
        else:
            limit = MAX_BONE_ROTATION
        jitter[n] = rng.uniform(-limit, limit)
    shift = np.array([rng.uniform(-0.03, 0.03) * w, rng.uniform(-0.02, 0.02) * h])
    xy = _build_skeleton(template, canvas, jitter) + shift
    visible = np.array([n not in _TEMPLATE_HIDDEN.get(template, ()) for n in JOINT_NAMES])
    return _finalize(xy, visible, canvas)


def scale_pose(kps: Keypoints, height_scale: float, canvas: tuple[int, int]) -> Keypoints:
    """Scale a skeleton about the canvas center (applies an identity's body size)."""
    h, w = canvas
    center = np.array([0.5 * w, 0.5 * h])
    xy = center + (kps.xy - center) * height_scale
    return _finalize(xy, kps.visible.copy(), canvas)


# --------------------------------------------------------------------------- rendering

_TORSO_EDGES = (("neck", "r_shoulder"), ("neck", "l_shoulder"), ("neck", "r_hip"), ("neck", "l_hip"))
_LIMB_EDGES = (
    ("r_hip", "r_knee"), ("r_knee", "r_ankle"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"), ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
)
SKELETON_EDGES = _TORSO_EDGES + _LIMB_EDGES + (
    ("neck", "nose"), ("nose", "r_eye"), ("r_eye", "r_ear"), ("nose", "l_eye"), ("l_eye", "l_ear"),
)
HEAD_RADIUS = 0.055  # fraction of canvas height


def _segment_coverage(p0, p1, width, grid_x, grid_y):
    d = p1 - p0
    length2 = float(d @ d)
    if length2 == 0.0:
        t = np.zeros_like(grid_x)
    else:
        t = np.clip(((grid_x - p0[0]) * d[0] + (grid_y - p0[1]) * d[1]) / length2, 0.0, 1.0)
    dist = np.hypot(grid_x - (p0[0] + t * d[0]), grid_y - (p0[1] + t * d[1]))
    return np.clip(width / 2.0 + 0.5 - dist, 0.0, 1.0)


def render_person(identity: IdentityParams, pose: Keypoints, canvas: tuple[int, int] = DEFAULT_CANVAS,
                  camera_id: int = 0) -> np.ndarray:
    """Anti-aliased stick figure as a (3, H, W) float32 array in [-1, 1]."""
    h, w = canvas
    if h < 32 or w < 16:
        raise ValueError(f"canvas must be at least 32x16, got {h}x{w}")
    if not pose.visible.any():
        raise EmptyPoseError("empty pose")
    gray = CAMERA_GRAY[camera_id % len(CAMERA_GRAY)]
    img = np.full((3, h, w), gray, dtype=np.float64)
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float64)
    xy, vis = pose.xy, pose.visible
    limb_w = max(1.0, identity.limb_thickness * h / REFERENCE_HEIGHT)
    torso_w = 1.5 * limb_w

    def paint(alpha, color):
        img[:] = img * (1.0 - alpha) + np.asarray(color)[:, None, None] * alpha

    def edge(a, b, width, color):
        ia, ib = JOINT_INDEX[a], JOINT_INDEX[b]
        if vis[ia] and vis[ib]:
            paint(_segment_coverage(xy[ia], xy[ib], width, grid_x, grid_y), color)

    for a, b in _LIMB_EDGES[:4]:
        edge(a, b, limb_w, identity.limb_color)
    for a, b in _TORSO_EDGES:
        edge(a, b, torso_w, identity.torso_color)
    for a, b in _LIMB_EDGES[4:]:
        edge(a, b, limb_w, identity.limb_color)
    nose = JOINT_INDEX["nose"]
    if vis[nose]:
        r = HEAD_RADIUS * h * identity.height_scale
        dist = np.hypot(grid_x - xy[nose, 0], grid_y - xy[nose, 1])
        paint(np.clip(r + 0.5 - dist, 0.0, 1.0), identity.head_color)
    return (img * 2.0 - 1.0).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) uint8."""
    return np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return (arr.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(img: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, optimize=False)


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


# --------------------------------------------------------------------------- histograms


def _hue_chroma(img: np.ndarray):
    rgb = (np.asarray(img, dtype=np.float64) + 1.0) / 2.0
    mx, mn = rgb.max(axis=0), rgb.min(axis=0)
    chroma = mx - mn
    safe = np.where(chroma > 0, chroma, 1.0)
    rc, gc, bc = [(mx - ch) / safe for ch in rgb]
    hue = np.where(mx == rgb[0], bc - gc, np.where(mx == rgb[1], 2.0 + rc - bc, 4.0 + gc - rc))
    return (hue / 6.0) % 1.0, chroma


def foreground_mask(img: np.ndarray, min_chroma: float = 0.05) -> np.ndarray:
    """Backgrounds are pure gray, so any pixel with chroma is foreground."""
    return _hue_chroma(img)[1] > min_chroma


def foreground_histogram(img: np.ndarray, bins: int = 12, min_chroma: float = 0.05) -> np.ndarray:
    """Chroma-weighted hue histogram of the foreground, normalized to sum 1.

    Blending a color with a gray background keeps its hue and scales its
    chroma by the coverage, so anti-aliased edges count in proportion to their
    coverage and the result does not depend on the camera's gray level.
    Votes are split linearly between the two nearest bin centers.
    """
    hue, chroma = _hue_chroma(img)
    m = chroma > min_chroma
    out = np.zeros(bins)
    if not m.any():
        return out
    pos = hue[m] * bins - 0.5
    lo = np.floor(pos).astype(int)
    frac = pos - lo
    w = chroma[m]
    np.add.at(out, lo % bins, w * (1.0 - frac))
    np.add.at(out, (lo + 1) % bins, w * frac)
    return out / out.sum()


# --------------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class Record:
    image_path: str
    keypoints_path: str
    identity_id: int
    camera_id: int
    split: str

    def to_dict(self):
        return {"image_path": self.image_path, "keypoints_path": self.keypoints_path,
                "identity_id": self.identity_id, "camera_id": self.camera_id, "split": self.split}


@dataclass
class DatasetManifest:
    records: list[Record]
    seed: int
    canvas: tuple[int, int]
    root: Path = field(default=Path("."), compare=False)

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> str:
        doc = {"seed": self.seed, "canvas": list(self.canvas), "records": [r.to_dict() for r in self.records]}
        return json.dumps(doc, indent=1)

    def validate(self) -> None:
        images = [r.image_path for r in self.records]
        if len(set(images)) != len(images):
            raise ValueError("manifest: an image appears in more than one record")
        for r in self.records:
            if r.split not in ("train", "query", "gallery"):
                raise ValueError(f"manifest: unknown split {r.split!r}")
            for p in (r.image_path, r.keypoints_path):
                if not self.resolve(p).exists():
                    raise FileNotFoundError(f"manifest: missing file {p}")
        gallery_ids = {r.identity_id for r in self.split("gallery")}
        missing = {r.identity_id for r in self.split("query")} - gallery_ids
        if missing:
            raise ValueError(f"manifest: query identities absent from gallery: {sorted(missing)}")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    records = [Record(r["image_path"], r["keypoints_path"], int(r["identity_id"]), int(r["camera_id"]),
                      r["split"]) for r in doc["records"]]
    m = DatasetManifest(records, int(doc["seed"]), tuple(doc["canvas"]), root=path.parent)
    m.validate()
    return m


def build_dataset(num_ids: int, poses_per_id: int, seed: int, out_dir: str | Path,
                  canvas: tuple[int, int] = DEFAULT_CANVAS, num_train_ids: int | None = None) -> DatasetManifest:
    """Render ``num_ids * poses_per_id`` images and write ``manifest.json``.

    The first ``num_train_ids`` identities (default: half, rounded up) go to
    the train split; for each remaining identity pose 0 (camera 0) is the
    query and the rest form the gallery.
    """
    if num_ids < 2:
        raise ValueError("num_ids must be >= 2 (quartets need several identities)")
    if poses_per_id < 2:
        raise ValueError("poses_per_id must be >= 2")
    if num_train_ids is None:
        num_train_ids = (num_ids + 1) // 2
    if not 0 <= num_train_ids <= num_ids:
        raise ValueError("num_train_ids must be within [0, num_ids]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(num_ids):
        ident = dataclasses.replace(sample_identity(seed * num_ids + i), identity_id=i)
        rng = substream(seed, f"dataset/{i}")
        for p in range(poses_per_id):
            template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
            pose_seed = int(rng.integers(2 ** 31))
            pose = scale_pose(sample_pose(pose_seed, template, canvas), ident.height_scale, canvas)
            camera = p % 2
            stem = f"{i:04d}_c{camera}_{p:03d}"
            save_png(render_person(ident, pose, canvas, camera), out / f"{stem}.png")
            save_keypoints(pose, out / f"{stem}.json")
            if i < num_train_ids:
                split = "train"
            else:
                split = "query" if p == 0 else "gallery"
            records.append(Record(f"{stem}.png", f"{stem}.json", i, camera, split))
    manifest = DatasetManifest(records, seed, tuple(canvas), root=out)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest
