"""Pose datasets: the PoseSet JSON format, 2D normalization and a synthetic
forward-kinematics generator for the 17-joint skeleton.

PoseSet JSON::

    {"skeleton": "h36m17", "image_size": [w, h],
     "frames": [{"p2d": [[x, y], ...N], "p3d": [[x, y, z], ...N]}, ...]}

``p2d`` is in pixels; ``p3d`` in millimetres relative to the root joint.
A ``.gz`` suffix reads/writes gzip-compressed JSON.
"""
from __future__ import annotations

import gzip
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .skeleton import SkeletonSpec, build_h36m17, get_skeleton, SkeletonError

log = logging.getLogger(__name__)


class PoseSetError(ValueError):
    """Base class for PoseSet loading failures."""


class MalformedPoseSetError(PoseSetError):
    pass


class JointCountError(PoseSetError):
    pass


class NonFiniteError(PoseSetError):
    pass


@dataclass
class PoseSample:
    p2d: np.ndarray  # (N, 2) pixels
    p3d: np.ndarray  # (N, 3) mm, root-relative


@dataclass
class PoseSet:
    samples: list[PoseSample]
    skeleton: str = "h36m17"
    image_size: tuple[int, int] = (1000, 1000)

    def __len__(self) -> int:
        return len(self.samples)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (F, N, 2) pixel and (F, N, 3) millimetre arrays."""
        if not self.samples:
            n = get_skeleton(self.skeleton).joint_count
            return np.zeros((0, n, 2)), np.zeros((0, n, 3))
        return (np.stack([s.p2d for s in self.samples]),
                np.stack([s.p3d for s in self.samples]))

    def normalized_inputs(self) -> np.ndarray:
        p2d, _ = self.arrays()
        return normalize_2d(p2d, *self.image_size)


@dataclass(frozen=True)
class CameraModel:
    focal: tuple[float, float] = (1000.0, 1000.0)
    center: tuple[float, float] = (500.0, 500.0)

    def __post_init__(self):
        if self.focal[0] <= 0 or self.focal[1] <= 0:
            raise ValueError("focal lengths must be positive")

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of camera-frame points (..., 3) in mm to pixels."""
        z = points_cam[..., 2]
        u = self.focal[0] * points_cam[..., 0] / z + self.center[0]
        v = self.focal[1] * points_cam[..., 1] / z + self.center[1]
        return np.stack([u, v], axis=-1)


# ---------------------------------------------------------------------------
# file IO


def _open(path: Path, mode: str):
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def load_poseset(path: str | Path, expected_skeleton: SkeletonSpec | None = None) -> PoseSet:
    path = Path(path)
    try:
        with _open(path, "r") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError, OSError, EOFError) as exc:
        raise MalformedPoseSetError(f"{path}: not valid PoseSet JSON ({exc})") from exc
    if not isinstance(doc, dict) or "frames" not in doc:
        raise MalformedPoseSetError(f"{path}: missing 'frames'")
    name = doc.get("skeleton", "h36m17")
    try:
        spec = expected_skeleton or get_skeleton(name)
    except SkeletonError as exc:
        raise MalformedPoseSetError(f"{path}: {exc}") from exc
    n = spec.joint_count
    image_size = doc.get("image_size", [1000, 1000])
    if (not isinstance(image_size, list) or len(image_size) != 2
            or not all(isinstance(v, (int, float)) and v > 0 for v in image_size)):
        raise MalformedPoseSetError(f"{path}: image_size must be [w, h] > 0")

    samples = []
    for i, frame in enumerate(doc["frames"]):
        try:
            p2d = np.asarray(frame["p2d"], dtype=np.float64)
            p3d = np.asarray(frame["p3d"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedPoseSetError(f"{path}: frame {i} is malformed ({exc})") from exc
        if p2d.ndim != 2 or p2d.shape[1] != 2 or p3d.ndim != 2 or p3d.shape[1] != 3:
            raise MalformedPoseSetError(
                f"{path}: frame {i} has p2d {p2d.shape} / p3d {p3d.shape}"
            )
        if p2d.shape[0] != n or p3d.shape[0] != n:
            raise JointCountError(
                f"{path}: frame {i} has {p2d.shape[0]} joints, skeleton {name!r} needs {n}"
            )
        if not (np.isfinite(p2d).all() and np.isfinite(p3d).all()):
            raise NonFiniteError(f"{path}: frame {i} contains non-finite values")
        root = p3d[spec.root_index]
        if np.any(root != 0):
            log.warning("frame %d is not root-relative; re-centering", i)
            p3d = p3d - root
        samples.append(PoseSample(p2d, p3d))
    return PoseSet(samples, skeleton=name, image_size=(image_size[0], image_size[1]))


def save_poseset(poseset: PoseSet, path: str | Path) -> None:
    doc = {
        "skeleton": poseset.skeleton,
        "image_size": list(poseset.image_size),
        "frames": [{"p2d": s.p2d.tolist(), "p3d": s.p3d.tolist()} for s in poseset.samples],
    }
    with _open(Path(path), "w") as fh:
        json.dump(doc, fh)


def normalize_2d(p2d: np.ndarray, image_width: float, image_height: float) -> np.ndarray:
    """Map pixels to roughly [-1, 1], dividing both axes by half the width.

    ``x' = (2x - w) / w``, ``y' = (2y - h) / w``; aspect ratio is preserved.
    """
    p = np.asarray(p2d, dtype=np.float64)
    out = np.empty_like(p)
    out[..., 0] = (2.0 * p[..., 0] - image_width) / image_width
    out[..., 1] = (2.0 * p[..., 1] - image_height) / image_width
    return out


# ---------------------------------------------------------------------------
# synthetic generator

# Canonical bone lengths in mm (child joint -> length of bone to its parent).
BONE_LENGTH_MM = {
    "r_hip": 133.0, "r_knee": 443.0, "r_ankle": 454.0,
    "l_hip": 133.0, "l_knee": 443.0, "l_ankle": 454.0,
    "spine": 233.0, "thorax": 257.0, "neck": 121.0, "head": 115.0,
    "l_shoulder": 151.0, "l_elbow": 279.0, "l_wrist": 249.0,
    "r_shoulder": 151.0, "r_elbow": 279.0, "r_wrist": 249.0,
}

# Rest direction of each bone in a y-up body frame (x toward subject's left).
_REST_DIR = {
    "r_hip": (-1, 0, 0), "r_knee": (0, -1, 0), "r_ankle": (0, -1, 0),
    "l_hip": (1, 0, 0), "l_knee": (0, -1, 0), "l_ankle": (0, -1, 0),
    "spine": (0, 1, 0), "thorax": (0, 1, 0), "neck": (0, 1, 0), "head": (0, 1, 0),
    "l_shoulder": (1, 0, 0), "l_elbow": (0, -1, 0), "l_wrist": (0, -1, 0),
    "r_shoulder": (-1, 0, 0), "r_elbow": (0, -1, 0), "r_wrist": (0, -1, 0),
}

# Local XYZ Euler ranges (radians) applied at the parent end of each bone.
_ANGLE_RANGE = {
    "r_hip": ((0, 0), (-0.2, 0.2), (0, 0)),
    "l_hip": ((0, 0), (-0.2, 0.2), (0, 0)),
    "r_knee": ((-1.6, 0.5), (-0.4, 0.4), (-0.3, 0.6)),
    "l_knee": ((-1.6, 0.5), (-0.4, 0.4), (-0.6, 0.3)),
    "r_ankle": ((0.0, 2.2), (0, 0), (0, 0)),
    "l_ankle": ((0.0, 2.2), (0, 0), (0, 0)),
    "spine": ((-0.3, 0.6), (-0.4, 0.4), (-0.3, 0.3)),
    "thorax": ((-0.2, 0.4), (-0.3, 0.3), (-0.2, 0.2)),
    "neck": ((-0.3, 0.4), (-0.2, 0.2), (-0.2, 0.2)),
    "head": ((-0.5, 0.5), (-0.8, 0.8), (-0.3, 0.3)),
    "l_shoulder": ((0, 0), (-0.2, 0.2), (-0.15, 0.15)),
    "r_shoulder": ((0, 0), (-0.2, 0.2), (-0.15, 0.15)),
    "l_elbow": ((-1.5, 1.5), (-0.8, 0.8), (0.0, 2.4)),
    "r_elbow": ((-1.5, 1.5), (-0.8, 0.8), (-2.4, 0.0)),
    "l_wrist": ((-2.3, 0.0), (0, 0), (0, 0)),
    "r_wrist": ((-2.3, 0.0), (0, 0), (0, 0)),
}

# body frame (y up, z forward) -> camera frame (y down, z away): rotate pi about x
_BODY_TO_CAMERA = np.diag([1.0, -1.0, -1.0])

SYNTH_DEPTH_MM = 5000.0
SYNTH_CAMERA = CameraModel()
SYNTH_IMAGE_SIZE = (1000, 1000)


def bone_lengths(spec: SkeletonSpec | None = None) -> np.ndarray:
    """Canonical length of the bone ending at each joint (0 for the root)."""
    spec = spec or build_h36m17()
    return np.array([0.0 if j == spec.root_index else BONE_LENGTH_MM[name]
                     for j, name in enumerate(spec.joint_names)])


def forward_kinematics(local_rot: np.ndarray, root_rot: np.ndarray,
                       spec: SkeletonSpec | None = None) -> np.ndarray:
    """Joint positions (N, 3) in the body frame with the root at the origin.

    ``local_rot`` holds one (3, 3) rotation per joint, applied at the parent
    end of the bone that ends at that joint; ``root_rot`` orients the body.
    """
    spec = spec or build_h36m17()
    n = spec.joint_count
    glob = np.zeros((n, 3, 3))
    pos = np.zeros((n, 3))
    glob[spec.root_index] = root_rot
    # parents precede children in the h36m17 ordering
    for j in range(n):
        if j == spec.root_index:
            continue
        p = spec.parent[j]
        name = spec.joint_names[j]
        glob[j] = glob[p] @ local_rot[j]
        pos[j] = pos[p] + glob[j] @ (BONE_LENGTH_MM[name] * np.asarray(_REST_DIR[name], float))
    return pos


def synth_generate(n: int, seed: int = 0, noise_mm: float = 0.0,
                   camera: CameraModel = SYNTH_CAMERA) -> PoseSet:
    """Random anatomically-bounded poses, projected from 5 m depth.

    Pixel noise has standard deviation ``focal * noise_mm / depth``, i.e. the
    image-plane displacement a ``noise_mm`` offset would cause at the root depth.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = build_h36m17()
    # separate streams so the poses do not depend on noise_mm
    pose_ss, noise_ss = np.random.SeedSequence(seed).spawn(2)
    rng, noise_rng = np.random.default_rng(pose_ss), np.random.default_rng(noise_ss)
    offset = np.array([0.0, 0.0, SYNTH_DEPTH_MM])
    sigma_px = np.asarray(camera.focal) * noise_mm / SYNTH_DEPTH_MM
    samples = []
    for _ in range(n):
        local = np.tile(np.eye(3), (spec.joint_count, 1, 1))
        for j, name in enumerate(spec.joint_names):
            if j == spec.root_index:
                continue
            angles = [rng.uniform(lo, hi) if hi > lo else lo for lo, hi in _ANGLE_RANGE[name]]
            local[j] = Rotation.from_euler("xyz", angles).as_matrix()
        yaw = rng.uniform(-math.pi, math.pi)
        tilt = rng.uniform(-0.2, 0.2, size=2)
        root = Rotation.from_euler("yxz", [yaw, tilt[0], tilt[1]]).as_matrix()
        p3d = forward_kinematics(local, root, spec) @ _BODY_TO_CAMERA.T
        p2d = camera.project(p3d + offset)
        if noise_mm > 0:
            p2d = p2d + noise_rng.normal(0.0, 1.0, size=p2d.shape) * sigma_px
        samples.append(PoseSample(p2d, p3d))
    return PoseSet(samples, skeleton=spec.name, image_size=SYNTH_IMAGE_SIZE)
