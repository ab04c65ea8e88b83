"""Per-frame local point-cloud memories in a shared world frame.

Each observed or generated frame is lifted to its own point cloud (colors +
world-space points + the capture camera) and stored as an independent,
immutable entry in an append-only bank. The world frame is fixed by the
first camera; nothing is ever merged across entries — keeping each memory
local is the point, since merging is what amplifies estimation error.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spatialmem.geometry import Intrinsics, Pose, unproject_pixels
from spatialmem.scene import GroundTruthFrame

SOURCES = ("observed", "generated")

DEFAULT_STRIDE = 2


class OrderingError(ValueError):
    """Raised when an insertion would violate frame ordering."""


class EstimationError(RuntimeError):
    """Geometry estimation failed for a specific frame."""


@dataclass(frozen=True)
class LocalPointCloud:
    """World-space points + colors as seen from one capture camera."""

    points: np.ndarray  # (N, 3) float64 world coordinates
    colors: np.ndarray  # (N, 3) float32 in [0, 1]
    capture_pose: Pose
    capture_intrinsics: Intrinsics

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(self.colors, dtype=np.float32).reshape(-1, 3)
        if len(points) != len(colors):
            raise ValueError(f"{len(points)} points but {len(colors)} colors")
        if not np.isfinite(points).all():
            raise ValueError("points must be finite")
        if len(colors) and (colors.min() < 0.0 or colors.max() > 1.0):
            raise ValueError("colors must lie in [0, 1]")
        points.flags.writeable = False
        colors.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "colors", colors)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class MemoryEntry:
    id: int
    frame_index: int
    cloud: LocalPointCloud
    source: str = "observed"

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")


@dataclass
class MemoryBank:
    """Append-only store of per-frame memories; first camera = world origin."""

    entries: list = field(default_factory=list)
    world_frame: Pose = field(default_factory=Pose.identity)
    max_entries: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def latest(self) -> MemoryEntry:
        if not self.entries:
            raise LookupError("bank is empty")
        return self.entries[-1]

    def entry(self, entry_id: int) -> MemoryEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def next_frame_index(self) -> int:
        return self.entries[-1].frame_index + 1 if self.entries else 0

    def copy(self) -> "MemoryBank":
        """Shallow copy: shares immutable entries, owns the list."""
        return MemoryBank(
            entries=list(self.entries),
            world_frame=self.world_frame,
            max_entries=self.max_entries,
        )


def build_cloud(frame: GroundTruthFrame, stride: int = DEFAULT_STRIDE) -> LocalPointCloud:
    """Unproject every stride-th pixel with finite depth into world space."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rgb = np.asarray(frame.rgb)
    depth = np.asarray(frame.depth)
    if rgb.shape[:2] != depth.shape:
        raise ValueError(f"rgb {rgb.shape} and depth {depth.shape} dimensions differ")
    h, w = depth.shape
    ii, jj = np.mgrid[0:h:stride, 0:w:stride]
    d = depth[::stride, ::stride]
    keep = np.isfinite(d) & (d > 0)
    if not keep.any():
        return LocalPointCloud(
            points=np.zeros((0, 3)),
            colors=np.zeros((0, 3), dtype=np.float32),
            capture_pose=frame.pose,
            capture_intrinsics=frame.intrinsics,
        )
    points = unproject_pixels(
        jj[keep].astype(np.float64),
        ii[keep].astype(np.float64),
        d[keep].astype(np.float64),
        frame.pose,
        frame.intrinsics,
    )
    colors = np.clip(rgb[::stride, ::stride][keep], 0.0, 1.0)
    return LocalPointCloud(
        points=points,
        colors=colors,
        capture_pose=frame.pose,
        capture_intrinsics=frame.intrinsics,
    )


def add_memory(
    bank: MemoryBank, frame_index: int, cloud: LocalPointCloud, source: str = "observed"
) -> int:
    """Append one memory; returns its id (previous max + 1, or 0)."""
    if bank.entries and frame_index < bank.entries[-1].frame_index:
        raise OrderingError(
            f"frame_index {frame_index} precedes last stored "
            f"{bank.entries[-1].frame_index}"
        )
    if bank.max_entries is not None and len(bank.entries) >= bank.max_entries:
        raise ValueError(f"bank is capped at {bank.max_entries} entries")
    new_id = bank.entries[-1].id + 1 if bank.entries else 0
    bank.entries.append(MemoryEntry(id=new_id, frame_index=frame_index, cloud=cloud, source=source))
    return new_id


def update_from_segment(
    bank: MemoryBank,
    frames,
    estimator,
    stride: int = DEFAULT_STRIDE,
    source: str = "generated",
    start_frame_index: int | None = None,
) -> list:
    """Lift each segment frame to a memory and append all of them.

    Entries are built before any is inserted, so an estimator failure on any
    frame leaves the bank untouched. Returns the new ids in frame order.
    """
    start = bank.next_frame_index() if start_frame_index is None else start_frame_index
    if bank.entries and start < bank.entries[-1].frame_index:
        raise OrderingError(
            f"segment starts at frame {start}, before last stored "
            f"{bank.entries[-1].frame_index}"
        )
    clouds = []
    for offset, frame in enumerate(frames):
        idx = start + offset
        try:
            estimated = estimator.estimate(frame.rgb, frame.pose, frame.intrinsics, idx)
            clouds.append((idx, build_cloud(estimated, stride)))
        except Exception as exc:
            raise EstimationError(f"geometry estimation failed at frame {idx}") from exc
    return [add_memory(bank, idx, cloud, source=source) for idx, cloud in clouds]


# ---------------------------------------------------------------------------
# Persistence: one PLY per entry plus a JSON index.

_PLY_HEADER = """ply
format binary_little_endian 1.0
element vertex {n}
property double x
property double y
property double z
property float red
property float green
property float blue
end_header
"""


def _write_ply(path: Path, cloud: LocalPointCloud) -> None:
    n = len(cloud)
    record = np.zeros(n, dtype=[("xyz", "<f8", 3), ("rgb", "<f4", 3)])
    record["xyz"] = cloud.points
    record["rgb"] = cloud.colors
    with open(path, "wb") as fh:
        fh.write(_PLY_HEADER.format(n=n).encode("ascii"))
        fh.write(record.tobytes())


def _read_ply(path: Path):
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    n = None
    for line in header:
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
    if n is None:
        raise ValueError(f"{path}: missing vertex element")
    record = np.frombuffer(data[end:], dtype=[("xyz", "<f8", 3), ("rgb", "<f4", 3)], count=n)
    return record["xyz"].copy(), record["rgb"].copy()


def save_bank(bank: MemoryBank, dirpath) -> None:
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    index = {"world_frame": bank.world_frame.matrix.tolist(), "entries": []}
    for entry in bank.entries:
        name = f"entry_{entry.id:06d}.ply"
        _write_ply(root / name, entry.cloud)
        index["entries"].append(
            {
                "id": entry.id,
                "frame_index": entry.frame_index,
                "source": entry.source,
                "pose": entry.cloud.capture_pose.matrix.tolist(),
                "intrinsics": entry.cloud.capture_intrinsics.to_dict(),
                "ply": name,
            }
        )
    (root / "index.json").write_text(json.dumps(index, indent=1))


def load_bank(dirpath) -> MemoryBank:
    root = Path(dirpath)
    index = json.loads((root / "index.json").read_text())
    bank = MemoryBank(world_frame=Pose.from_matrix(np.array(index["world_frame"])))
    for item in index["entries"]:
        points, colors = _read_ply(root / item["ply"])
        cloud = LocalPointCloud(
            points=points,
            colors=colors,
            capture_pose=Pose.from_matrix(np.array(item["pose"])),
            capture_intrinsics=Intrinsics.from_dict(item["intrinsics"]),
        )
        bank.entries.append(
            MemoryEntry(
                id=item["id"],
                frame_index=item["frame_index"],
                cloud=cloud,
                source=item["source"],
            )
        )
    return bank
