"""Z-buffered point splatting of local memories along target trajectories.

A memory's cloud is reprojected into each target view as small discs; the
nearest splat wins each pixel, everything unreached stays gray and is
flagged invisible. Clips carry the retrieved-to-target relative pose per
frame so downstream fusion can weight anchors by camera proximity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spatialmem.geometry import Intrinsics, Pose, project_points, relative_pose
from spatialmem.images import mask_png_bytes, png_bytes
from spatialmem.memory import LocalPointCloud

PAD = -1  # source_memory_id of padding clips
BACKGROUND_GRAY = 0.5
DEPTH_SENTINEL = np.inf
Z_TIE_EPS = 1e-6  # scene units; splats closer than this tie on depth

DEFAULT_SPLAT_RADIUS = 1


@dataclass
class AnchorFrame:
    """One reprojected view of a memory: color, visibility, nearest depth."""

    rgb: np.ndarray  # (H, W, 3) float32; BACKGROUND_GRAY where invisible
    visibility: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) float64; DEPTH_SENTINEL where invisible

    def __post_init__(self):
        if not (self.rgb.shape[:2] == self.visibility.shape == self.depth.shape):
            raise ValueError("rgb/visibility/depth dimensions differ")


@dataclass
class AnchorClip:
    frames: list
    rel_poses: list  # retrieved-to-target Pose per frame
    source_memory_id: int  # PAD for padding clips

    def __post_init__(self):
        if len(self.frames) != len(self.rel_poses):
            raise ValueError(
                f"{len(self.frames)} frames but {len(self.rel_poses)} rel_poses"
            )

    def __len__(self) -> int:
        return len(self.frames)


def _disc_offsets(radius: int):
    r = int(radius)
    dv, du = np.mgrid[-r : r + 1, -r : r + 1]
    keep = du**2 + dv**2 <= r**2
    return du[keep], dv[keep]


def _zbuffer_winners(pix, dep, idx):
    """Per pixel: minimum depth, and the splat coloring it.

    The winner is the smallest point index among splats within Z_TIE_EPS of
    the pixel's minimum depth, so output never depends on input order.
    Returns (pixels, min_depth, winner_index), pixels sorted ascending.
    """
    order = np.lexsort((dep, pix))
    spix, sdep = pix[order], dep[order]
    first = np.r_[True, spix[1:] != spix[:-1]]
    upix = spix[first]
    dmin = sdep[first]

    tie = dep <= dmin[np.searchsorted(upix, pix)] + Z_TIE_EPS
    tie_pix = pix[tie]
    tie_idx = idx[tie]
    t_order = np.lexsort((tie_idx, tie_pix))
    tpix = tie_pix[t_order]
    tidx = tie_idx[t_order]
    t_first = np.r_[True, tpix[1:] != tpix[:-1]]
    return upix, dmin, tidx[t_first]


def render_anchor_frame(
    cloud: LocalPointCloud,
    target: Pose,
    intr: Intrinsics,
    splat_radius: int = DEFAULT_SPLAT_RADIUS,
) -> AnchorFrame:
    """Project every point into the target view and splat with a z-buffer.

    Rendered depth per pixel is the minimum over all splats reaching it.
    Color prefers splats whose projection rounds to the pixel itself
    (nearest first, ties within Z_TIE_EPS broken by smaller point index);
    off-center disc pixels only fill in where no point lands directly, so a
    cloud re-rendered at its capture view reproduces its source colors
    exactly instead of fattening silhouettes by the splat radius.
    """
    if splat_radius < 0:
        raise ValueError("splat_radius must be >= 0")
    h, w = intr.height, intr.width
    rgb = np.full((h, w, 3), BACKGROUND_GRAY, dtype=np.float32)
    visibility = np.zeros((h, w), dtype=bool)
    depth = np.full((h, w), DEPTH_SENTINEL)
    if len(cloud) == 0:
        return AnchorFrame(rgb=rgb, visibility=visibility, depth=depth)

    uv, z, in_front = project_points(cloud.points, target, intr)
    pu = np.rint(uv[:, 0]).astype(np.int64)
    pv = np.rint(uv[:, 1]).astype(np.int64)
    near = (
        in_front
        & (pu >= -splat_radius)
        & (pu <= w - 1 + splat_radius)
        & (pv >= -splat_radius)
        & (pv <= h - 1 + splat_radius)
    )
    if not near.any():
        return AnchorFrame(rgb=rgb, visibility=visibility, depth=depth)
    pu, pv, z = pu[near], pv[near], z[near]
    point_idx = np.flatnonzero(near)

    du, dv = _disc_offsets(splat_radius)
    centered = (du == 0) & (dv == 0)
    su = (pu[:, None] + du[None, :]).ravel()
    sv = (pv[:, None] + dv[None, :]).ravel()
    sz = np.repeat(z, len(du))
    sidx = np.repeat(point_idx, len(du))
    s_center = np.tile(centered, len(pu))
    ok = (su >= 0) & (su < w) & (sv >= 0) & (sv < h)
    pix = sv[ok] * w + su[ok]
    sz = sz[ok]
    sidx = sidx[ok]
    scenter = s_center[ok]
    if len(pix) == 0:
        return AnchorFrame(rgb=rgb, visibility=visibility, depth=depth)

    upix, dmin, _ = _zbuffer_winners(pix, sz, sidx)
    depth.flat[upix] = dmin
    visibility.flat[upix] = True

    flat_rgb = rgb.reshape(-1, 3)
    if scenter.any():
        c_pix, _, c_win = _zbuffer_winners(pix[scenter], sz[scenter], sidx[scenter])
        flat_rgb[c_pix] = cloud.colors[c_win]
    else:
        c_pix = np.empty(0, dtype=pix.dtype)
    fill = ~np.isin(upix, c_pix)
    if fill.any() and (~scenter).any():
        f_pix, _, f_win = _zbuffer_winners(pix[~scenter], sz[~scenter], sidx[~scenter])
        keep = np.isin(f_pix, upix[fill])
        flat_rgb[f_pix[keep]] = cloud.colors[f_win[keep]]
    return AnchorFrame(rgb=rgb, visibility=visibility, depth=depth)


def render_anchor_clip(
    cloud: LocalPointCloud,
    chunk,
    intr: Intrinsics,
    splat_radius: int = DEFAULT_SPLAT_RADIUS,
    memory_id: int = PAD,
) -> AnchorClip:
    """One AnchorFrame per chunk pose, with retrieved-to-target rel poses."""
    poses = list(chunk.poses)
    if not poses:
        raise ValueError("chunk has no poses")
    frames = [render_anchor_frame(cloud, pose, intr, splat_radius) for pose in poses]
    rels = [relative_pose(cloud.capture_pose, pose) for pose in poses]
    return AnchorClip(frames=frames, rel_poses=rels, source_memory_id=memory_id)


def invisible_clip(length: int, intr: Intrinsics) -> AnchorClip:
    """Padding clip: no splats anywhere, identity rel poses, PAD id."""
    if length < 1:
        raise ValueError("length must be >= 1")
    h, w = intr.height, intr.width
    frames = [
        AnchorFrame(
            rgb=np.full((h, w, 3), BACKGROUND_GRAY, dtype=np.float32),
            visibility=np.zeros((h, w), dtype=bool),
            depth=np.full((h, w), DEPTH_SENTINEL),
        )
        for _ in range(length)
    ]
    return AnchorClip(
        frames=frames,
        rel_poses=[Pose.identity() for _ in range(length)],
        source_memory_id=PAD,
    )


def save_anchor_clip(clip: AnchorClip, dirpath) -> None:
    """PNG frames + 1-bit visibility masks + a JSON sidecar."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        (root / f"frame_{t:04d}.png").write_bytes(png_bytes(frame.rgb))
        (root / f"mask_{t:04d}.png").write_bytes(mask_png_bytes(frame.visibility))
    sidecar = {
        "source_memory_id": clip.source_memory_id,
        "rel_poses": [p.matrix.tolist() for p in clip.rel_poses],
    }
    (root / "clip.json").write_text(json.dumps(sidecar, indent=1))
