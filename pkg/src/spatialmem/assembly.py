"""Chunked anchor assembly: retrieved memories -> K aligned anchor videos.

The target trajectory is cut into fixed-length chunks (short final chunk
allowed), each chunk's retrieved memories are rendered into anchor clips,
missing slots are padded with fully-invisible clips, and slot j's clips are
concatenated across chunks into one full-length anchor video whose pose
track stays aligned with the target trajectory frame by frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from spatialmem.geometry import Intrinsics, Pose, compose, invert
from spatialmem.images import mask_png_bytes, png_bytes
from spatialmem.memory import MemoryBank
from spatialmem.retrieval import ChunkPlan
from spatialmem.splat import PAD, invisible_clip, render_anchor_clip


@dataclass
class AnchorVideo:
    """One anchor slot concatenated across all chunks."""

    slot: int
    frames: list
    rel_poses: list
    per_chunk_sources: list  # memory id or PAD, one per chunk

    def __post_init__(self):
        if len(self.frames) != len(self.rel_poses):
            raise ValueError("frames and rel_poses lengths differ")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class AnchorBundle:
    """Complete conditioning input: K anchor videos + the target trajectory."""

    videos: list
    target_poses: list
    chunk_plans: list

    def __post_init__(self):
        T = len(self.target_poses)
        for video in self.videos:
            if len(video) != T:
                raise ValueError(f"slot {video.slot} has {len(video)} frames, expected {T}")

    @property
    def K(self) -> int:
        return len(self.videos)

    def __len__(self) -> int:
        return len(self.target_poses)


def plan_chunks(trajectory, D: int, start_index: int = 0):
    """Cut a trajectory into ceil(T/D) chunks; only the last may be short."""
    poses = list(trajectory)
    if not poses:
        raise ValueError("trajectory is empty")
    if D < 1:
        raise ValueError("chunk length must be >= 1")
    chunks = []
    for m, lo in enumerate(range(0, len(poses), D)):
        sub = poses[lo : lo + D]
        chunks.append(
            ChunkPlan(
                index=m,
                poses=tuple(sub),
                frame_range=(start_index + lo, start_index + lo + len(sub)),
            )
        )
    return chunks


def relative_trajectory(trajectory):
    """Re-express every pose relative to the first frame (element 0 = identity)."""
    poses = list(trajectory)
    if not poses:
        raise ValueError("trajectory is empty")
    base_inv = invert(poses[0])
    return [compose(base_inv, p) for p in poses]


def assemble(
    bank: MemoryBank,
    chunks,
    retrievals,
    K: int,
    intr: Intrinsics,
    splat_radius: int = 1,
) -> AnchorBundle:
    """Render retrieved memories per chunk into exactly K anchor videos.

    Slot j of chunk m holds the j-th retrieved memory of that chunk (greedy
    order, seed in slot 0) or invisible padding when the chunk retrieved
    fewer than K. Slots are concatenated in chunk order; rel_poses follow
    the same concatenation.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(chunks) != len(retrievals):
        raise ValueError(f"{len(chunks)} chunks but {len(retrievals)} retrievals")

    videos = []
    for slot in range(K):
        frames = []
        rels = []
        sources = []
        for chunk, retrieval in zip(chunks, retrievals):
            if slot < len(retrieval.selected):
                mem_id = retrieval.selected[slot]
                try:
                    entry = bank.entry(mem_id)
                except KeyError:
                    raise LookupError(
                        f"chunk {chunk.index} retrieval references unknown memory id {mem_id}"
                    ) from None
                clip = render_anchor_clip(
                    entry.cloud, chunk, intr, splat_radius, memory_id=mem_id
                )
            else:
                clip = invisible_clip(len(chunk), intr)
            frames.extend(clip.frames)
            rels.extend(clip.rel_poses)
            sources.append(clip.source_memory_id)
        videos.append(
            AnchorVideo(slot=slot, frames=frames, rel_poses=rels, per_chunk_sources=sources)
        )

    target_poses = [pose for chunk in chunks for pose in chunk.poses]
    return AnchorBundle(videos=videos, target_poses=target_poses, chunk_plans=list(chunks))


def export_bundle(bundle: AnchorBundle, dirpath) -> None:
    """PNG sequences + masks per slot, with a JSON manifest tying it together."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    for video in bundle.videos:
        slot_dir = root / f"slot_{video.slot}"
        slot_dir.mkdir(exist_ok=True)
        for t, frame in enumerate(video.frames):
            (slot_dir / f"frame_{t:04d}.png").write_bytes(png_bytes(frame.rgb))
            (slot_dir / f"mask_{t:04d}.png").write_bytes(mask_png_bytes(frame.visibility))
    manifest = {
        "K": bundle.K,
        "T": len(bundle),
        "chunk_sizes": [len(c) for c in bundle.chunk_plans],
        "per_chunk_sources": {
            str(v.slot): list(v.per_chunk_sources) for v in bundle.videos
        },
        "rel_poses": {
            str(v.slot): [p.matrix.tolist() for p in v.rel_poses] for v in bundle.videos
        },
        "relative_target_trajectory": [
            p.matrix.tolist() for p in relative_trajectory(bundle.target_poses)
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest))
