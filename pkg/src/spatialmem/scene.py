"""Deterministic synthetic 3D scenes with exact ground-truth color and depth.

Scenes are collections of axis-aligned boxes and finite axis-aligned
planes with flat or checkered faces, ray-cast analytically. They stand in
for real captured footage: every rendered frame carries exact per-pixel
depth, so memory construction, retrieval and the generation loop can be
verified against a known world.

Depth is the distance along the camera z axis (not the ray length);
pixels that hit no surface carry +inf depth and the background color.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spatialmem.geometry import Intrinsics, Pose

DEPTH_SENTINEL = np.inf
BACKGROUND_RGB = (0.82, 0.85, 0.88)

_RAY_EPS = 1e-9

# Box faces in order -x, +x, -y, +y, -z, +z.
_FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])


@dataclass(frozen=True)
class FaceStyle:
    """Flat color, or a two-color checker with the given period (scene units)."""

    kind: str  # "flat" | "checker"
    color_a: tuple
    color_b: tuple = (0.0, 0.0, 0.0)
    period: float = 1.0

    @staticmethod
    def flat(color) -> "FaceStyle":
        return FaceStyle("flat", tuple(float(c) for c in color))

    @staticmethod
    def checker(color_a, color_b, period: float) -> "FaceStyle":
        return FaceStyle(
            "checker",
            tuple(float(c) for c in color_a),
            tuple(float(c) for c in color_b),
            float(period),
        )

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "color_a": list(self.color_a),
            "color_b": list(self.color_b),
            "period": self.period,
        }

    @staticmethod
    def from_dict(data: dict) -> "FaceStyle":
        return FaceStyle(
            data["kind"], tuple(data["color_a"]), tuple(data["color_b"]), data["period"]
        )


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned box (6 face styles) or finite axis-aligned plane (1 style).

    For boxes ``extents`` are positive half-extents on all three axes and
    ``faces`` holds 6 styles ordered -x,+x,-y,+y,-z,+z. For planes ``axis``
    is the normal axis and ``extents`` carries the two in-plane positive
    half-sizes (ordered by axis index) plus a zero on the normal axis.
    """

    kind: str  # "box" | "plane"
    center: tuple
    extents: tuple
    faces: tuple
    axis: int = 0

    def __post_init__(self):
        if self.kind not in ("box", "plane"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        relevant = [e for i, e in enumerate(self.extents) if not (self.kind == "plane" and i == self.axis)]
        if any(e <= 0 for e in relevant):
            raise ValueError("extents must be positive")

    def corners(self):
        center = np.array(self.center)
        ext = np.array(self.extents)
        return center - ext, center + ext

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": list(self.center),
            "extents": list(self.extents),
            "axis": self.axis,
            "faces": [f.to_dict() for f in self.faces],
        }

    @staticmethod
    def from_dict(data: dict) -> "Primitive":
        return Primitive(
            kind=data["kind"],
            center=tuple(data["center"]),
            extents=tuple(data["extents"]),
            faces=tuple(FaceStyle.from_dict(f) for f in data["faces"]),
            axis=data["axis"],
        )


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    primitives: tuple
    bounds: tuple  # (lo, hi) world-space AABB containing all primitives
    background: tuple = BACKGROUND_RGB

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "background": list(self.background),
                "bounds": [list(self.bounds[0]), list(self.bounds[1])],
                "primitives": [p.to_dict() for p in self.primitives],
            }
        )

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        data = json.loads(text)
        return SceneSpec(
            seed=data["seed"],
            primitives=tuple(Primitive.from_dict(p) for p in data["primitives"]),
            bounds=(tuple(data["bounds"][0]), tuple(data["bounds"][1])),
            background=tuple(data["background"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "SceneSpec":
        return SceneSpec.from_json(Path(path).read_text())


@dataclass
class GroundTruthFrame:
    """One rendered (or estimated) view: color, per-pixel z-depth, camera."""

    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float64, DEPTH_SENTINEL where no surface
    pose: Pose
    intrinsics: Intrinsics

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError(
                f"rgb {self.rgb.shape} and depth {self.depth.shape} dimensions differ"
            )


def _random_color(rng) -> tuple:
    return tuple(rng.uniform(0.08, 0.95, size=3).round(4))


def _random_style(rng) -> FaceStyle:
    if rng.random() < 0.45:
        return FaceStyle.checker(_random_color(rng), _random_color(rng), float(rng.uniform(0.35, 1.2)))
    return FaceStyle.flat(_random_color(rng))


def make_scene(seed: int) -> SceneSpec:
    """Deterministic desk-scale room: floor, four walls, 3-8 boxes."""
    rng = np.random.default_rng(seed)
    primitives = []

    floor_style = FaceStyle.checker(_random_color(rng), _random_color(rng), float(rng.uniform(0.8, 1.6)))
    primitives.append(
        Primitive("plane", (0.0, 2.0, 0.0), (7.0, 0.0, 7.0), (floor_style,), axis=1)
    )
    primitives.append(
        Primitive("plane", (0.0, -4.0, 0.0), (7.0, 0.0, 7.0), (_random_style(rng),), axis=1)
    )
    # Walls close the room; +y is down, so they span y in [-4 (ceiling), 2 (floor)].
    for axis, offset in ((0, -7.0), (0, 7.0), (2, -7.0), (2, 7.0)):
        center = [0.0, -1.0, 0.0]
        center[axis] = offset
        extents = [7.0, 3.0, 7.0]
        extents[axis] = 0.0
        primitives.append(
            Primitive("plane", tuple(center), tuple(extents), (_random_style(rng),), axis=axis)
        )

    n_boxes = int(rng.integers(3, 9))
    for _ in range(n_boxes):
        half = rng.uniform(0.35, 1.1, size=3).round(4)
        x = float(rng.uniform(-3.2, 3.2))
        z = float(rng.uniform(-3.2, 3.2))
        center = (round(x, 4), round(2.0 - half[1], 4), round(z, 4))
        faces = tuple(_random_style(rng) for _ in range(6))
        primitives.append(Primitive("box", center, tuple(half), faces))

    los, his = zip(*(p.corners() for p in primitives))
    lo = np.min(np.array(los), axis=0)
    hi = np.max(np.array(his), axis=0)
    return SceneSpec(
        seed=seed,
        primitives=tuple(primitives),
        bounds=(tuple(lo.round(6)), tuple(hi.round(6))),
    )


def _intersect_box(origin, dirs, prim: Primitive):
    """Slab intersection. Returns (hit, t_hit, face_id) for N rays."""
    lo, hi = prim.corners()
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo - origin) / dirs
        t_hi = (hi - origin) / dirs
    near = np.minimum(t_lo, t_hi)
    far = np.maximum(t_lo, t_hi)
    zero = np.abs(dirs) < 1e-15
    if zero.any():
        inside_slab = (origin >= lo) & (origin <= hi)
        near = np.where(zero, np.where(inside_slab, -np.inf, np.inf), near)
        far = np.where(zero, np.where(inside_slab, np.inf, -np.inf), far)
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)
    entering = (t_near > _RAY_EPS) & (t_near <= t_far)
    exiting = (t_near <= _RAY_EPS) & (t_far > _RAY_EPS) & (t_near <= t_far)
    hit = entering | exiting
    t_hit = np.where(entering, t_near, t_far)

    axis_in = near.argmax(axis=1)
    axis_out = far.argmin(axis=1)
    axis = np.where(entering, axis_in, axis_out)
    d_axis = np.take_along_axis(dirs, axis[:, None], axis=1)[:, 0]
    # Entering with d>0 crosses the low slab (-axis face); exiting with d>0
    # crosses the high slab (+axis face).
    positive_face = np.where(entering, d_axis < 0, d_axis > 0)
    face = 2 * axis + positive_face.astype(np.int64)
    return hit, t_hit, face


def _intersect_plane(origin, dirs, prim: Primitive):
    axis = prim.axis
    in_plane = [a for a in range(3) if a != axis]
    center = np.array(prim.center)
    ext = np.array(prim.extents)
    d_axis = dirs[:, axis]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (center[axis] - origin[axis]) / d_axis
        point = origin[None, :] + t[:, None] * dirs
    hit = (
        (np.abs(d_axis) > 1e-15)
        & (t > _RAY_EPS)
        & (np.abs(point[:, in_plane[0]] - center[in_plane[0]]) <= ext[in_plane[0]])
        & (np.abs(point[:, in_plane[1]] - center[in_plane[1]]) <= ext[in_plane[1]])
    )
    return hit, t, np.zeros(len(t), dtype=np.int64)


def _style_colors(style: FaceStyle, s: np.ndarray, r: np.ndarray) -> np.ndarray:
    if style.kind == "flat":
        return np.broadcast_to(np.array(style.color_a, dtype=np.float32), (len(s), 3))
    idx = np.floor(s / style.period) + np.floor(r / style.period)
    even = (idx.astype(np.int64) % 2) == 0
    out = np.where(
        even[:, None], np.array(style.color_a, dtype=np.float32), np.array(style.color_b, dtype=np.float32)
    )
    return out.astype(np.float32)


def render_ground_truth(scene: SceneSpec, pose: Pose, intr: Intrinsics) -> GroundTruthFrame:
    """Exact nearest-surface ray cast at every pixel center."""
    h, w = intr.height, intr.width
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    dirs_cam = np.stack(
        [
            (jj.ravel() - intr.cx) / intr.fx,
            (ii.ravel() - intr.cy) / intr.fy,
            np.ones(h * w),
        ],
        axis=1,
    )
    # dirs_cam has unit z, so the ray parameter equals z-depth.
    dirs = dirs_cam @ pose.rotation.T
    origin = pose.translation

    n = h * w
    best_t = np.full(n, DEPTH_SENTINEL)
    best_prim = np.full(n, -1, dtype=np.int32)
    best_face = np.zeros(n, dtype=np.int64)
    for p_idx, prim in enumerate(scene.primitives):
        if prim.kind == "box":
            hit, t_hit, face = _intersect_box(origin, dirs, prim)
        else:
            hit, t_hit, face = _intersect_plane(origin, dirs, prim)
        closer = hit & (t_hit < best_t)
        best_t[closer] = t_hit[closer]
        best_prim[closer] = p_idx
        best_face[closer] = face[closer]

    rgb = np.broadcast_to(np.array(scene.background, dtype=np.float32), (n, 3)).copy()
    for p_idx, prim in enumerate(scene.primitives):
        sel = best_prim == p_idx
        if not sel.any():
            continue
        points = origin[None, :] + best_t[sel, None] * dirs[sel]
        lo, _ = prim.corners()
        if prim.kind == "plane":
            in_plane = [a for a in range(3) if a != prim.axis]
            s = points[:, in_plane[0]] - lo[in_plane[0]]
            r = points[:, in_plane[1]] - lo[in_plane[1]]
            rgb[sel] = _style_colors(prim.faces[0], s, r)
        else:
            faces = best_face[sel]
            colors = np.empty((sel.sum(), 3), dtype=np.float32)
            for face_id in np.unique(faces):
                fsel = faces == face_id
                axis = int(_FACE_AXIS[face_id])
                in_plane = [a for a in range(3) if a != axis]
                s = points[fsel, in_plane[0]] - lo[in_plane[0]]
                r = points[fsel, in_plane[1]] - lo[in_plane[1]]
                colors[fsel] = _style_colors(prim.faces[face_id], s, r)
            rgb[sel] = colors

    return GroundTruthFrame(
        rgb=rgb.reshape(h, w, 3),
        depth=best_t.reshape(h, w),
        pose=pose,
        intrinsics=intr,
    )


@dataclass(frozen=True)
class NoiseModel:
    """Reconstruction-error surrogate: per-pixel depth noise + rigid pose jitter."""

    depth_sigma: float = 0.0
    rot_jitter_deg: float = 0.0
    trans_jitter: float = 0.0
    seed: int = 0


class GroundTruthEstimator:
    """Geometry estimator backed by the exact scene, optionally corrupted.

    Stands in for a learned per-frame reconstruction model: given a frame's
    pose and intrinsics it returns that view's depth map, with configurable
    Gaussian depth noise and a rigid pose perturbation applied to the
    *reported* capture pose. Noise is deterministic per (seed, frame_index).
    """

    def __init__(self, scene: SceneSpec, noise: NoiseModel | None = None):
        self.scene = scene
        self.noise = noise or NoiseModel()

    def estimate(self, rgb, pose: Pose, intr: Intrinsics, frame_index: int) -> GroundTruthFrame:
        gt = render_ground_truth(self.scene, pose, intr)
        depth = gt.depth
        out_pose = pose
        nz = self.noise
        if nz.depth_sigma > 0 or nz.rot_jitter_deg > 0 or nz.trans_jitter > 0:
            rng = np.random.default_rng([nz.seed, int(frame_index)])
            if nz.depth_sigma > 0:
                depth = depth.copy()
                finite = np.isfinite(depth)
                depth[finite] = np.maximum(
                    depth[finite] + rng.normal(scale=nz.depth_sigma, size=int(finite.sum())),
                    1e-3,
                )
            if nz.rot_jitter_deg > 0 or nz.trans_jitter > 0:
                axis = rng.normal(size=3)
                axis /= np.linalg.norm(axis)
                angle = np.deg2rad(rng.normal(scale=nz.rot_jitter_deg))
                k = np.array(
                    [
                        [0, -axis[2], axis[1]],
                        [axis[2], 0, -axis[0]],
                        [-axis[1], axis[0], 0],
                    ]
                )
                rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
                dt = rng.normal(scale=nz.trans_jitter, size=3) if nz.trans_jitter > 0 else np.zeros(3)
                out_pose = Pose(rot @ pose.rotation, pose.translation + dt)
        return GroundTruthFrame(
            rgb=np.asarray(rgb if rgb is not None else gt.rgb, dtype=np.float32),
            depth=depth,
            pose=out_pose,
            intrinsics=intr,
        )


def ground_truth_estimator(scene: SceneSpec, noise: NoiseModel | None = None) -> GroundTruthEstimator:
    return GroundTruthEstimator(scene, noise)
