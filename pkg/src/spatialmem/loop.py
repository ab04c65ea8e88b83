"""Closed-loop segment generation driven by a memory bank.

A session alternates update -> retrieve -> generate: each segment of target
poses is chunked, anchors are retrieved and rendered per chunk, frames are
fused from the anchors, and the new frames are lifted back into the bank
before the next segment runs. States are immutable; a failed segment leaves
the previous state fully usable (all-or-nothing commit).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from spatialmem.actions import ActionStep, actions_to_trajectory
from spatialmem.assembly import AnchorBundle, assemble, plan_chunks
from spatialmem.fusion import fuse_bundle_frame
from spatialmem.geometry import Intrinsics, Pose, look_at, rotation_about
from spatialmem.memory import (
    LocalPointCloud,
    MemoryBank,
    MemoryEntry,
    update_from_segment,
)
from spatialmem.metrics import psnr, ssim
from spatialmem.retrieval import (
    DEFAULT_COVERAGE_SCALE,
    DEFAULT_TAU,
    RetrievalConfig,
    retrieve_all_chunks,
)
from spatialmem.scene import (
    NoiseModel,
    SceneSpec,
    ground_truth_estimator,
    make_scene,
    render_ground_truth,
)

DEFAULT_INTRINSICS = Intrinsics(fx=128.0, fy=128.0, cx=64.0, cy=64.0, width=128, height=128)

REVISIT_VIDEO_LEN = 70
REVISIT_TARGET_LEN = 49


class ProtocolError(ValueError):
    """Input violates a fixed evaluation protocol."""


@dataclass(frozen=True)
class LoopConfig:
    """Everything a session needs to turn actions into committed frames."""

    intrinsics: Intrinsics = DEFAULT_INTRINSICS
    D: int = 8
    K: int = 4
    segment_length: int = 48
    step_translation: float = 0.1
    step_rotation_deg: float = 3.0
    beta: float = 6.0
    lambda_r: float = 1.0
    lambda_t: float = 1.0
    tau: float = DEFAULT_TAU
    splat_radius: int = 1
    coverage_scale: int = DEFAULT_COVERAGE_SCALE
    memory_stride: int = 1
    fill_mode: str = "nearest"

    def __post_init__(self):
        for name in ("D", "K", "segment_length", "splat_radius", "coverage_scale", "memory_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.step_translation <= 0 or self.step_rotation_deg <= 0:
            raise ValueError("step sizes must be positive")

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(
            intrinsics=self.intrinsics,
            budget=self.K,
            tau=self.tau,
            splat_radius=self.splat_radius,
            coverage_scale=self.coverage_scale,
        )

    def to_dict(self) -> dict:
        intr = self.intrinsics
        return {
            "intrinsics": {
                "fx": intr.fx,
                "fy": intr.fy,
                "cx": intr.cx,
                "cy": intr.cy,
                "width": intr.width,
                "height": intr.height,
            },
            "D": self.D,
            "K": self.K,
            "segment_length": self.segment_length,
            "step_translation": self.step_translation,
            "step_rotation_deg": self.step_rotation_deg,
            "beta": self.beta,
            "lambda_r": self.lambda_r,
            "lambda_t": self.lambda_t,
            "tau": self.tau,
            "splat_radius": self.splat_radius,
            "coverage_scale": self.coverage_scale,
            "memory_stride": self.memory_stride,
            "fill_mode": self.fill_mode,
        }

    @staticmethod
    def from_dict(data: dict) -> "LoopConfig":
        data = dict(data)
        intr = data.pop("intrinsics", None)
        if intr is not None:
            data["intrinsics"] = Intrinsics(**intr)
        return LoopConfig(**data)


@dataclass(frozen=True)
class FrameRecord:
    """Minimal frame: an image pinned to a camera."""

    rgb: np.ndarray
    pose: Pose
    intrinsics: Intrinsics


@dataclass(frozen=True)
class GeneratedFrame:
    index: int  # session-global frame index (context frames come first)
    rgb: np.ndarray
    hole_mask: np.ndarray
    pose: Pose


@dataclass(frozen=True)
class ChunkTrace:
    index: int
    frame_range: tuple
    selected: tuple
    sources: tuple  # memory source tag per selected id
    gains: tuple
    termination: str
    coverage_fraction: float

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "frame_range": list(self.frame_range),
            "selected": list(self.selected),
            "sources": list(self.sources),
            "gains": list(self.gains),
            "termination": self.termination,
            "coverage_fraction": self.coverage_fraction,
        }


@dataclass(frozen=True)
class SegmentTrace:
    segment_index: int
    frame_range: tuple
    chunks: tuple
    slot_weights: tuple  # per frame: K pre-renormalization slot weights
    hole_fractions: tuple

    def to_dict(self) -> dict:
        return {
            "segment_index": self.segment_index,
            "frame_range": list(self.frame_range),
            "chunks": [c.to_dict() for c in self.chunks],
            "slot_weights": [list(w) for w in self.slot_weights],
            "hole_fractions": list(self.hole_fractions),
        }


@dataclass(frozen=True)
class SegmentResult:
    trace: SegmentTrace
    frames: tuple
    bundle: AnchorBundle


@dataclass(frozen=True)
class SessionState:
    config: LoopConfig
    bank: MemoryBank
    estimator: object
    current_pose: Pose
    context_frames: tuple
    segments: tuple = field(default=())

    @property
    def context_len(self) -> int:
        return len(self.context_frames)

    @property
    def generated(self):
        return [frame for seg in self.segments for frame in seg.frames]

    @property
    def traces(self):
        return [seg.trace for seg in self.segments]

    @property
    def next_frame_index(self) -> int:
        return self.context_len + sum(len(seg.frames) for seg in self.segments)

    def generated_frame(self, index: int) -> GeneratedFrame:
        offset = index - self.context_len
        frames = self.generated
        if not 0 <= offset < len(frames):
            raise IndexError(f"no generated frame with session index {index}")
        return frames[offset]


def bootstrap_session(context_frames, config: LoopConfig, estimator) -> SessionState:
    """Lift context frames into a fresh bank; camera rests at the last one."""
    context_frames = tuple(context_frames)
    if not context_frames:
        raise ValueError("requires at least one context frame")
    bank = MemoryBank()
    update_from_segment(
        bank,
        context_frames,
        estimator,
        stride=config.memory_stride,
        source="observed",
        start_frame_index=0,
    )
    return SessionState(
        config=config,
        bank=bank,
        estimator=estimator,
        current_pose=context_frames[-1].pose,
        context_frames=context_frames,
    )


def run_segment(state: SessionState, target) -> SessionState:
    """Generate one segment of frames at the target poses and commit it."""
    target = list(target)
    cfg = state.config
    if not 1 <= len(target) <= cfg.segment_length:
        raise ValueError(
            f"segment length must be in [1, {cfg.segment_length}], got {len(target)}"
        )
    if not state.bank.entries:
        raise ValueError("requires at least one context memory")

    start_index = state.next_frame_index
    chunks = plan_chunks(target, cfg.D, start_index=start_index)
    retrievals = retrieve_all_chunks(state.bank, chunks, cfg.retrieval_config())
    bundle = assemble(state.bank, chunks, retrievals, cfg.K, cfg.intrinsics, cfg.splat_radius)

    composites = []
    slot_weights = []
    for t in range(len(target)):
        composite, weights = fuse_bundle_frame(
            bundle,
            t,
            beta=cfg.beta,
            fill_mode=cfg.fill_mode,
            lambda_r=cfg.lambda_r,
            lambda_t=cfg.lambda_t,
        )
        composites.append(composite)
        slot_weights.append(tuple(float(w) for w in weights))

    records = [
        FrameRecord(rgb=comp.rgb, pose=pose, intrinsics=cfg.intrinsics)
        for comp, pose in zip(composites, target)
    ]
    new_bank = state.bank.copy()
    update_from_segment(
        new_bank,
        records,
        state.estimator,
        stride=cfg.memory_stride,
        source="generated",
        start_frame_index=start_index,
    )

    chunk_traces = []
    for chunk, retrieval in zip(chunks, retrievals):
        sources = tuple(state.bank.entry(mid).source for mid in retrieval.selected)
        chunk_traces.append(
            ChunkTrace(
                index=chunk.index,
                frame_range=chunk.frame_range,
                selected=tuple(retrieval.selected),
                sources=sources,
                gains=tuple(retrieval.gains),
                termination=retrieval.termination,
                coverage_fraction=retrieval.final_coverage_fraction,
            )
        )
    frames = tuple(
        GeneratedFrame(index=start_index + t, rgb=comp.rgb, hole_mask=comp.hole_mask, pose=pose)
        for t, (comp, pose) in enumerate(zip(composites, target))
    )
    trace = SegmentTrace(
        segment_index=len(state.segments),
        frame_range=(start_index, start_index + len(target)),
        chunks=tuple(chunk_traces),
        slot_weights=tuple(slot_weights),
        hole_fractions=tuple(float(c.hole_mask.mean()) for c in composites),
    )
    result = SegmentResult(trace=trace, frames=frames, bundle=bundle)
    return replace(
        state,
        bank=new_bank,
        current_pose=target[-1],
        segments=state.segments + (result,),
    )


def split_into_segments(trajectory, segment_length: int):
    """Longest-prefix split: all segments full except possibly the last."""
    trajectory = list(trajectory)
    return [
        trajectory[i : i + segment_length] for i in range(0, len(trajectory), segment_length)
    ]


def run_action_group(state: SessionState, step: ActionStep) -> SessionState:
    """Commit the trajectory of one action line, split to segment length."""
    cfg = state.config
    trajectory = actions_to_trajectory(
        state.current_pose, [step], cfg.step_translation, cfg.step_rotation_deg
    )
    for segment in split_into_segments(trajectory, cfg.segment_length):
        state = run_segment(state, segment)
    return state


def run_loop(context_frames, script, config: LoopConfig, estimator) -> SessionState:
    """Run a whole action script; each script line commits independently."""
    state = bootstrap_session(context_frames, config, estimator)
    for step in script:
        state = run_action_group(state, step)
    return state


# ---------------------------------------------------------------------------
# Scene-driven context bootstrapping (used by the CLI and the service).


def bootstrap_poses(n_frames: int = 12, sweep_deg: float = 120.0):
    """A stationary look-around at the world origin: yaw sweep, identity first."""
    if n_frames < 1:
        raise ValueError("need at least one context frame")
    poses = [Pose.identity()]
    if n_frames == 1:
        return poses
    angles = np.linspace(-sweep_deg / 2.0, sweep_deg / 2.0, n_frames - 1)
    poses.extend(rotation_about(1, np.deg2rad(a)) for a in angles)
    return poses


def scene_context(scene: SceneSpec, intr: Intrinsics, n_frames: int = 12):
    """Render a deterministic context sweep for a synthetic scene."""
    return [render_ground_truth(scene, pose, intr) for pose in bootstrap_poses(n_frames)]


# ---------------------------------------------------------------------------
# Partial-revisit evaluation protocol.


def partial_revisit_split(video):
    """Split 70 frames into (21 context, 49 uniformly spaced target) indices."""
    n = len(video)
    if n != REVISIT_VIDEO_LEN:
        raise ProtocolError(f"protocol requires exactly {REVISIT_VIDEO_LEN} frames, got {n}")
    target = [round(i * (REVISIT_VIDEO_LEN - 1) / (REVISIT_TARGET_LEN - 1)) for i in range(REVISIT_TARGET_LEN)]
    if len(set(target)) != REVISIT_TARGET_LEN:
        raise ProtocolError("target indices collide")
    target_set = set(target)
    context = [i for i in range(n) if i not in target_set]
    return context, target


def exploration_trajectory(seed: int, n_frames: int = REVISIT_VIDEO_LEN):
    """Deterministic per-seed orbit inside the room, gazing at the middle."""
    rng = np.random.default_rng([seed, 7041])
    radius = rng.uniform(3.4, 4.4)
    height = rng.uniform(-1.0, -0.2)
    arc = rng.uniform(1.5, 2.4)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    gaze = np.array([0.0, 0.4, 0.0])
    poses = []
    for theta in phase + np.linspace(0.0, arc, n_frames):
        eye = np.array([radius * np.sin(theta), height, -radius * np.cos(theta)])
        poses.append(look_at(eye, gaze))
    return poses


def fuse_bank_into_global_cloud(bank: MemoryBank) -> MemoryBank:
    """Ablation: merge every memory into one world-sized cloud.

    The merged entry keeps the latest entry's capture pose and frame index so
    retrieval still has a well-defined seed; with a single entry the greedy
    selection is forced to use it for every chunk.
    """
    if not bank.entries:
        raise ValueError("empty bank")
    latest = bank.latest()
    points = np.concatenate([e.cloud.points for e in bank.entries], axis=0)
    colors = np.concatenate([e.cloud.colors for e in bank.entries], axis=0)
    merged = LocalPointCloud(
        points=points,
        colors=colors,
        capture_pose=latest.cloud.capture_pose,
        capture_intrinsics=latest.cloud.capture_intrinsics,
    )
    fused = MemoryBank(world_frame=bank.world_frame, max_entries=bank.max_entries)
    fused.entries.append(
        MemoryEntry(id=0, frame_index=latest.frame_index, cloud=merged, source=latest.source)
    )
    return fused


def evaluate_revisit(
    scene_seed: int,
    config: LoopConfig,
    noise: NoiseModel | None = None,
    global_memory: bool = False,
    scene: SceneSpec | None = None,
    ground_truth=None,
    trajectory=None,
) -> dict:
    """Partial-revisit run on one scene: generate the 49 held-out frames
    from the 21 context frames and score them against ground truth over
    non-hole pixels. Precomputed scene/frames may be passed to share work
    across configurations."""
    if scene is None:
        scene = make_scene(scene_seed)
    if trajectory is None:
        trajectory = exploration_trajectory(scene_seed)
    if ground_truth is None:
        ground_truth = [render_ground_truth(scene, p, config.intrinsics) for p in trajectory]
    context_idx, target_idx = partial_revisit_split(ground_truth)

    # The 49-frame target is one segment; allow it even under shorter defaults.
    cfg = config if config.segment_length >= REVISIT_TARGET_LEN else replace(
        config, segment_length=REVISIT_TARGET_LEN
    )
    estimator = ground_truth_estimator(scene, noise)
    state = bootstrap_session([ground_truth[i] for i in context_idx], cfg, estimator)
    if global_memory:
        state = replace(state, bank=fuse_bank_into_global_cloud(state.bank))
    state = run_segment(state, [trajectory[i] for i in target_idx])

    frames = state.generated
    psnrs, ssims, holes = [], [], []
    for frame, idx in zip(frames, target_idx):
        gt = ground_truth[idx]
        mask = ~frame.hole_mask
        holes.append(float(frame.hole_mask.mean()))
        if mask.any():
            psnrs.append(psnr(frame.rgb, gt.rgb, mask))
            ssims.append(ssim(frame.rgb, gt.rgb, mask))
    trace = state.traces[-1]
    coverage = [c.coverage_fraction for c in trace.chunks]
    return {
        "scene_seed": scene_seed,
        "K": cfg.K,
        "global_memory": global_memory,
        "psnr_mean": float(np.mean(psnrs)),
        "ssim_mean": float(np.mean(ssims)),
        "hole_fraction_mean": float(np.mean(holes)),
        "coverage_fraction_mean": float(np.mean(coverage)),
        "n_target": len(frames),
        "n_context": len(context_idx),
        "psnr_per_frame": [float(v) for v in psnrs],
    }
