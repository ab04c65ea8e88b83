"""SE(3) pose algebra and the pinhole camera model.

Conventions used across the whole package:

* Poses are **camera-to-world**: ``rotation`` columns are the camera axes
  expressed in world coordinates and ``translation`` is the camera center.
* Camera frame: +x right, +y down, +z forward (image v grows with +y).
* Pixel coordinates are continuous with integer values at pixel centers,
  so pixel (row i, column j) samples (u=j, v=i).
* The world frame is the first camera of a session (identity pose).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ORTHONORMALITY_TOL = 1e-9


class InvalidPoseError(ValueError):
    """Raised when a pose has non-finite entries or a degenerate rotation."""


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64)
        trans = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rot.shape != (3, 3) or trans.shape != (3,):
            raise InvalidPoseError(
                f"expected 3x3 rotation and 3-vector translation, got {rot.shape} and {trans.shape}"
            )
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise InvalidPoseError("pose has non-finite entries")
        drift = np.abs(rot @ rot.T - np.eye(3)).max()
        if drift > ORTHONORMALITY_TOL:
            # Polar decomposition: nearest orthonormal matrix to the input.
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        if np.linalg.det(rot) <= 0:
            raise InvalidPoseError("rotation is a reflection (determinant <= 0)")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat) -> "Pose":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise InvalidPoseError(f"expected 4x4 matrix, got {mat.shape}")
        return Pose(mat[:3, :3], mat[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 camera-to-world matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def approx_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.abs(self.rotation - other.rotation).max() <= tol
            and np.abs(self.translation - other.translation).max() <= tol
        )


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(data: dict) -> "Intrinsics":
        return Intrinsics(
            fx=float(data["fx"]),
            fy=float(data["fy"]),
            cx=float(data["cx"]),
            cy=float(data["cy"]),
            width=int(data["width"]),
            height=int(data["height"]),
        )


@dataclass(frozen=True)
class PixelPoint:
    """Sub-pixel image location with camera-frame depth."""

    u: float
    v: float
    depth: float


def compose(a: Pose, b: Pose) -> Pose:
    """Return a∘b: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def relative_pose(mem: Pose, target: Pose) -> Pose:
    """Transform from a memory's capture camera into the target camera frame.

    Defined as invert(target)∘mem: points expressed in the memory camera
    frame map into the target camera frame. Identity when the two cameras
    coincide.
    """
    return compose(invert(target), mem)


def project(point, cam: Pose, intr: Intrinsics) -> PixelPoint | None:
    """Project a world point; returns None when it lies behind the camera.

    The returned pixel may fall outside the image bounds; callers clip.
    """
    point = np.asarray(point, dtype=np.float64)
    if not np.isfinite(point).all():
        raise ValueError("cannot project non-finite point")
    p_cam = cam.rotation.T @ (point - cam.translation)
    z = p_cam[2]
    if z <= 0:
        return None
    return PixelPoint(
        u=float(intr.cx + intr.fx * p_cam[0] / z),
        v=float(intr.cy + intr.fy * p_cam[1] / z),
        depth=float(z),
    )


def unproject(pixel: PixelPoint, cam: Pose, intr: Intrinsics):
    """Lift a pixel with known depth back to a world point."""
    if pixel.depth <= 0:
        raise ValueError(f"depth must be positive, got {pixel.depth}")
    p_cam = np.array(
        [
            (pixel.u - intr.cx) / intr.fx * pixel.depth,
            (pixel.v - intr.cy) / intr.fy * pixel.depth,
            pixel.depth,
        ]
    )
    return cam.rotation @ p_cam + cam.translation


def pose_distance(rel: Pose, lambda_r: float = 1.0, lambda_t: float = 1.0) -> float:
    """Scalar viewpoint discrepancy of a relative pose.

    lambda_r weights the geodesic rotation angle (radians), lambda_t the
    translation norm (scene units). Zero iff rel is the identity.
    """
    if lambda_r < 0 or lambda_t < 0:
        raise ValueError("weights must be non-negative")
    cos_angle = (np.trace(rel.rotation) - 1.0) / 2.0
    angle = float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))
    return lambda_r * angle + lambda_t * float(np.linalg.norm(rel.translation))


# --- batched helpers used by rendering and retrieval ---


def project_points(points: np.ndarray, cam: Pose, intr: Intrinsics):
    """Project an (N, 3) world array.

    Returns (uv, depth, in_front): uv is (N, 2) continuous pixel coords
    (valid only where in_front), depth the camera-frame z, in_front the
    positive-depth mask.
    """
    p_cam = (np.asarray(points, dtype=np.float64) - cam.translation) @ cam.rotation
    z = p_cam[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    uv = np.empty((p_cam.shape[0], 2))
    uv[:, 0] = intr.cx + intr.fx * p_cam[:, 0] / safe_z
    uv[:, 1] = intr.cy + intr.fy * p_cam[:, 1] / safe_z
    return uv, z, in_front


def unproject_pixels(u: np.ndarray, v: np.ndarray, depth: np.ndarray, cam: Pose, intr: Intrinsics) -> np.ndarray:
    """Vectorized unproject of flat pixel arrays to an (N, 3) world array."""
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("all depths must be positive")
    x = (np.asarray(u, dtype=np.float64) - intr.cx) / intr.fx * depth
    y = (np.asarray(v, dtype=np.float64) - intr.cy) / intr.fy * depth
    p_cam = np.stack([x, y, depth], axis=-1)
    return p_cam @ cam.rotation.T + cam.translation


# --- constructors used by scripts, trajectories and tests ---


def translation_pose(x: float, y: float, z: float) -> Pose:
    return Pose(np.eye(3), np.array([x, y, z], dtype=np.float64))


def rotation_about(axis: int, radians: float) -> Pose:
    """Rotation about camera axis 0=x, 1=y, 2=z, zero translation."""
    c, s = np.cos(radians), np.sin(radians)
    if axis == 0:
        rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)
    elif axis == 1:
        rot = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)
    elif axis == 2:
        rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)
    else:
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return Pose(rot, np.zeros(3))


def look_at(eye, target) -> Pose:
    """Camera at eye looking toward target, v axis roughly aligned with world +y (down)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = forward / norm
    world_down = np.array([0.0, 1.0, 0.0])
    x = np.cross(world_down, z)
    if np.linalg.norm(x) < 1e-9:
        # Looking straight up/down; pick an arbitrary horizontal right axis.
        x = np.array([1.0, 0.0, 0.0])
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


# --- file formats ---


def save_trajectory(poses, path) -> None:
    """Write poses as a JSON array of 4x4 row-major camera-to-world matrices."""
    data = [pose.matrix.tolist() for pose in poses]
    Path(path).write_text(json.dumps(data))


def load_trajectory(path) -> list[Pose]:
    data = json.loads(Path(path).read_text())
    return [Pose.from_matrix(np.array(mat)) for mat in data]


def save_intrinsics(intr: Intrinsics, path) -> None:
    Path(path).write_text(json.dumps(intr.to_dict()))


def load_intrinsics(path) -> Intrinsics:
    return Intrinsics.from_dict(json.loads(Path(path).read_text()))
