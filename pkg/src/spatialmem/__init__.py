"""Local geometric memory engine.

Stores per-frame point clouds in a shared world frame, retrieves the
memories that best cover a target camera trajectory, renders them into
anchor videos, and fuses the anchors into composite frames inside an
update-retrieve-generate loop. Scenes are synthetic with exact
ground-truth geometry so every stage can be verified end to end.
"""

from spatialmem.geometry import Intrinsics, Pose

__all__ = ["Pose", "Intrinsics"]
__version__ = "0.1.0"
