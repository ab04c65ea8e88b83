"""Pose-aware fusion of anchor frames into a single composite.

A deterministic stand-in for the learned multi-anchor controller: each
anchor slot gets an importance weight exp(-beta * pose_distance) to the
target camera, invisible slots are masked to exactly zero, and the
composite is the per-pixel weighted color average renormalized over the
slots actually visible at that pixel. Pixels no anchor reaches are holes,
flagged explicitly and filled deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from spatialmem.geometry import Pose, pose_distance
from spatialmem.splat import BACKGROUND_GRAY

DEFAULT_BETA = 2.0

FILL_MODES = ("background", "nearest")


@dataclass
class CompositeFrame:
    """Fused output frame with explicit hole accounting."""

    rgb: np.ndarray  # (H, W, 3) float32
    hole_mask: np.ndarray  # (H, W) bool, true where no anchor was visible
    fill_mode: str

    def __post_init__(self):
        if self.fill_mode not in FILL_MODES:
            raise ValueError(f"fill_mode must be one of {FILL_MODES}")
        if self.rgb.shape[:2] != self.hole_mask.shape:
            raise ValueError("rgb and hole_mask dimensions differ")


def importance_weights(
    rel_poses,
    visibility_any,
    lambda_r: float = 1.0,
    lambda_t: float = 1.0,
    beta: float = DEFAULT_BETA,
) -> np.ndarray:
    """Per-slot weights: exp(-beta * pose_distance), masked and normalized.

    Slots with no visibility anywhere get exactly zero weight before
    normalization. If no slot is visible the all-zero vector is returned
    (signal, not an error).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    rel_poses = list(rel_poses)
    visible = np.asarray(visibility_any, dtype=bool)
    if len(rel_poses) != len(visible):
        raise ValueError(f"{len(rel_poses)} poses but {len(visible)} visibility flags")
    if len(rel_poses) == 0:
        raise ValueError("need at least one slot")
    if not visible.any():
        return np.zeros(len(rel_poses))
    dists = np.array(
        [pose_distance(rel, lambda_r=lambda_r, lambda_t=lambda_t) for rel in rel_poses]
    )
    raw = np.where(visible, np.exp(-beta * dists), 0.0)
    return raw / raw.sum()


def fuse(frames, weights, fill_mode: str = "nearest") -> CompositeFrame:
    """Per-pixel weighted average of anchor colors over visible slots.

    Weights are renormalized per pixel over the slots visible there, so a
    slot never bleeds into pixels it cannot see. Pixels visible to no slot
    become holes, filled with the background gray or the nearest visible
    composite color.
    """
    frames = list(frames)
    weights = np.asarray(weights, dtype=np.float64)
    if len(frames) != len(weights):
        raise ValueError(f"{len(frames)} frames but {len(weights)} weights")
    if not frames:
        raise ValueError("need at least one frame")
    if fill_mode not in FILL_MODES:
        raise ValueError(f"fill_mode must be one of {FILL_MODES}")
    shape = frames[0].rgb.shape
    for f in frames:
        if f.rgb.shape != shape:
            raise ValueError("anchor frames share dimensions")

    vis = np.stack([f.visibility for f in frames])  # (K, H, W)
    rgb = np.stack([f.rgb for f in frames]).astype(np.float64)  # (K, H, W, 3)
    per_pixel = vis * weights[:, None, None]  # (K, H, W)
    total = per_pixel.sum(axis=0)  # (H, W)
    holes = total <= 0.0

    with np.errstate(invalid="ignore", divide="ignore"):
        eff = np.where(total > 0, per_pixel / total, 0.0)
    out = np.einsum("khw,khwc->hwc", eff, rgb).astype(np.float32)

    if holes.any():
        if fill_mode == "background":
            out[holes] = BACKGROUND_GRAY
        elif holes.all():
            out[:] = BACKGROUND_GRAY
        else:
            _, (ii, jj) = distance_transform_edt(holes, return_indices=True)
            out[holes] = out[ii[holes], jj[holes]]
    return CompositeFrame(rgb=out, hole_mask=holes, fill_mode=fill_mode)


def fuse_bundle_frame(
    bundle,
    t: int,
    beta: float = DEFAULT_BETA,
    fill_mode: str = "nearest",
    lambda_r: float = 1.0,
    lambda_t: float = 1.0,
):
    """Fuse frame t of an AnchorBundle; returns (composite, weights)."""
    frames = [video.frames[t] for video in bundle.videos]
    rels = [video.rel_poses[t] for video in bundle.videos]
    vis_any = [f.visibility.any() for f in frames]
    weights = importance_weights(rels, vis_any, lambda_r=lambda_r, lambda_t=lambda_t, beta=beta)
    return fuse(frames, weights, fill_mode=fill_mode), weights


def pack_tokens(sequences) -> tuple:
    """Concatenate K (L, C) token sequences into (1, K*L, C) + slot index.

    The inverse operation is unpack_tokens; roundtrip is exact.
    """
    seqs = [np.asarray(s) for s in sequences]
    if not seqs:
        raise ValueError("need at least one sequence")
    shape = seqs[0].shape
    if len(shape) != 2:
        raise ValueError("sequences must be 2-D (tokens, channels)")
    for s in seqs:
        if s.shape != shape:
            raise ValueError(f"ragged sequences: {s.shape} vs {shape}")
    packed = np.concatenate(seqs, axis=0)[None, ...]
    slot_index = np.repeat(np.arange(len(seqs)), shape[0])
    return packed, slot_index


def unpack_tokens(packed: np.ndarray, K: int):
    """Split a (1, K*L, C) packed sequence back into K (L, C) sequences."""
    packed = np.asarray(packed)
    if packed.ndim != 3 or packed.shape[0] != 1:
        raise ValueError(f"expected shape (1, K*L, C), got {packed.shape}")
    total = packed.shape[1]
    if K < 1 or total % K != 0:
        raise ValueError(f"{total} tokens do not split into {K} equal slots")
    return [seq for seq in packed[0].reshape(K, total // K, packed.shape[2])]
