"""Coverage-driven greedy retrieval of memories for each trajectory chunk.

For a chunk of target poses, candidate memories are first filtered by a
cheap field-of-view overlap test, then selected greedily: the latest memory
always seeds the set, and each following pick maximizes newly covered cells
of a coarse visibility raster aggregated over the chunk's frames. Selection
stops when the achievable area is fully covered, the budget is spent, or no
remaining candidate adds anything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spatialmem.geometry import Intrinsics, project_points
from spatialmem.memory import MemoryBank, MemoryEntry
from spatialmem.splat import render_anchor_frame

FULL_COVERAGE = "full_coverage"
BUDGET_EXHAUSTED = "budget_exhausted"
POOL_EXHAUSTED = "pool_exhausted"
TERMINATIONS = (FULL_COVERAGE, BUDGET_EXHAUSTED, POOL_EXHAUSTED)

DEFAULT_TAU = 0.01
DEFAULT_COVERAGE_SCALE = 4
FOV_SUBSAMPLE_CAP = 512


@dataclass(frozen=True)
class ChunkPlan:
    """One temporal chunk of the target trajectory."""

    index: int
    poses: tuple
    frame_range: tuple  # [start, end) global frame indices

    def __post_init__(self):
        if not self.poses:
            raise ValueError("chunk needs at least one pose")
        start, end = self.frame_range
        if end - start != len(self.poses):
            raise ValueError(
                f"frame_range {self.frame_range} does not span {len(self.poses)} poses"
            )
        object.__setattr__(self, "poses", tuple(self.poses))

    def __len__(self) -> int:
        return len(self.poses)


@dataclass
class CoverageMap:
    """Per-chunk-frame visibility rasters at coverage resolution."""

    rasters: np.ndarray  # (T, H_c, W_c) bool
    covered_count: int
    universe_count: int

    def __post_init__(self):
        if self.covered_count > self.universe_count:
            raise ValueError("covered_count exceeds universe_count")


@dataclass
class RetrievalResult:
    selected: list  # memory ids, selection order; [0] is the latest-memory seed
    gains: list  # newly covered cells per selection step
    termination: str
    final_coverage_fraction: float
    covered_cells: int = 0
    universe_cells: int = 0

    def __post_init__(self):
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")
        if len(self.selected) != len(self.gains):
            raise ValueError("selected and gains lengths differ")

    def to_dict(self) -> dict:
        return {
            "selected": list(self.selected),
            "gains": [int(g) for g in self.gains],
            "termination": self.termination,
            "final_coverage_fraction": self.final_coverage_fraction,
            "covered_cells": int(self.covered_cells),
            "universe_cells": int(self.universe_cells),
        }

    @staticmethod
    def from_dict(data: dict) -> "RetrievalResult":
        return RetrievalResult(
            selected=list(data["selected"]),
            gains=list(data["gains"]),
            termination=data["termination"],
            final_coverage_fraction=data["final_coverage_fraction"],
            covered_cells=data.get("covered_cells", 0),
            universe_cells=data.get("universe_cells", 0),
        )


@dataclass(frozen=True)
class RetrievalConfig:
    intrinsics: Intrinsics
    budget: int = 4
    tau: float = DEFAULT_TAU
    splat_radius: int = 1
    coverage_scale: int = DEFAULT_COVERAGE_SCALE


def coverage_intrinsics(intr: Intrinsics, scale: int) -> Intrinsics:
    return Intrinsics(
        fx=intr.fx / scale,
        fy=intr.fy / scale,
        cx=intr.cx / scale,
        cy=intr.cy / scale,
        width=max(1, intr.width // scale),
        height=max(1, intr.height // scale),
    )


def _subsample_indices(n: int, cap: int = FOV_SUBSAMPLE_CAP) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.round(np.linspace(0, n - 1, cap)).astype(np.int64)


def fov_candidates(bank: MemoryBank, chunk: ChunkPlan, intr: Intrinsics, tau: float = DEFAULT_TAU):
    """Ids of memories with enough field-of-view overlap with any chunk pose.

    A fixed, evenly spaced subsample of each cloud (at most 512 points) is
    projected into every chunk pose; the memory is retained iff for some
    pose at least one point lands in-frustum and the in-frustum fraction
    reaches tau.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    keep = []
    for entry in bank.entries:
        pts = entry.cloud.points
        if len(pts) == 0:
            continue
        sample = pts[_subsample_indices(len(pts))]
        for pose in chunk.poses:
            uv, _, in_front = project_points(sample, pose, intr)
            pu = np.rint(uv[:, 0])
            pv = np.rint(uv[:, 1])
            inside = (
                in_front
                & (pu >= 0)
                & (pu <= intr.width - 1)
                & (pv >= 0)
                & (pv <= intr.height - 1)
            )
            count = int(inside.sum())
            if count >= 1 and count / len(sample) >= tau:
                keep.append(entry.id)
                break
    return keep


def _coverage_rasters(
    entry: MemoryEntry, chunk: ChunkPlan, intr: Intrinsics, splat_radius: int, scale: int
) -> np.ndarray:
    cov_intr = coverage_intrinsics(intr, scale)
    return np.stack(
        [
            render_anchor_frame(entry.cloud, pose, cov_intr, splat_radius).visibility
            for pose in chunk.poses
        ]
    )


def coverage_of(
    entry: MemoryEntry,
    chunk: ChunkPlan,
    intr: Intrinsics,
    splat_radius: int = 1,
    coverage_scale: int = DEFAULT_COVERAGE_SCALE,
) -> CoverageMap:
    """Visibility raster of one memory over a chunk, frame-indexed.

    universe_count defaults to the full grid (every cell of every frame);
    greedy retrieval substitutes the achievable-union universe.
    """
    rasters = _coverage_rasters(entry, chunk, intr, splat_radius, coverage_scale)
    return CoverageMap(
        rasters=rasters,
        covered_count=int(rasters.sum()),
        universe_count=int(rasters.size),
    )


def greedy_retrieve(
    bank: MemoryBank,
    chunk: ChunkPlan,
    K_budget: int,
    intr: Intrinsics,
    tau: float = DEFAULT_TAU,
    splat_radius: int = 1,
    coverage_scale: int = DEFAULT_COVERAGE_SCALE,
) -> RetrievalResult:
    """Seeded greedy max-coverage selection with three termination rules.

    The latest memory is always selected first and counts against the
    budget. The universe (coverage denominator) is the union of rasters
    over the FoV candidates — the area the candidate pool could ever
    cover; an empty universe is never "fully covered", so a bank whose
    memories all face away from the chunk terminates pool_exhausted.
    Coverage is accounted within the universe only. Equal gains break
    toward the smaller id; a best gain of zero stops selection
    (classified pool_exhausted). Termination precedence when several
    rules apply: full_coverage, then budget_exhausted, then
    pool_exhausted.
    """
    if K_budget < 1:
        raise ValueError("K_budget must be >= 1")
    if not bank.entries:
        raise LookupError("cannot retrieve from an empty bank")

    latest_id = bank.latest().id
    candidate_ids = fov_candidates(bank, chunk, intr, tau)
    rasters = {
        cid: _coverage_rasters(bank.entry(cid), chunk, intr, splat_radius, coverage_scale)
        for cid in candidate_ids
    }
    seed_raster = rasters.get(latest_id)
    if seed_raster is None:
        seed_raster = _coverage_rasters(
            bank.entry(latest_id), chunk, intr, splat_radius, coverage_scale
        )

    cov_intr = coverage_intrinsics(intr, coverage_scale)
    universe = np.zeros((len(chunk), cov_intr.height, cov_intr.width), dtype=bool)
    for cid in candidate_ids:
        universe |= rasters[cid]
    universe_count = int(universe.sum())

    covered = seed_raster & universe
    selected = [latest_id]
    gains = [int(covered.sum())]
    pool = sorted(cid for cid in candidate_ids if cid != latest_id)

    termination = None
    while True:
        if universe_count > 0 and int((universe & ~covered).sum()) == 0:
            termination = FULL_COVERAGE
            break
        if len(selected) >= K_budget:
            termination = BUDGET_EXHAUSTED
            break
        if not pool:
            termination = POOL_EXHAUSTED
            break
        step_gains = [int((rasters[cid] & ~covered).sum()) for cid in pool]
        best_pos = int(np.argmax(step_gains))  # ties: first = smallest id
        if step_gains[best_pos] == 0:
            termination = POOL_EXHAUSTED
            break
        best_id = pool.pop(best_pos)
        selected.append(best_id)
        gains.append(step_gains[best_pos])
        covered |= rasters[best_id]

    covered_count = int(covered.sum())
    fraction = 0.0 if universe_count == 0 else covered_count / universe_count
    return RetrievalResult(
        selected=selected,
        gains=gains,
        termination=termination,
        final_coverage_fraction=fraction,
        covered_cells=covered_count,
        universe_cells=universe_count,
    )


def retrieve_all_chunks(bank: MemoryBank, chunks, config: RetrievalConfig):
    """Independent greedy retrieval per chunk; errors carry the chunk index."""
    results = []
    for chunk in chunks:
        try:
            results.append(
                greedy_retrieve(
                    bank,
                    chunk,
                    config.budget,
                    config.intrinsics,
                    tau=config.tau,
                    splat_radius=config.splat_radius,
                    coverage_scale=config.coverage_scale,
                )
            )
        except Exception as exc:
            raise RuntimeError(f"retrieval failed for chunk {chunk.index}") from exc
    return results
