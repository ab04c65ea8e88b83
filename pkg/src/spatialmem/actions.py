"""Keyboard-style camera actions and their conversion to pose trajectories.

Scripts are plain text, one action per line ("move_left 8"); each line is
the unit a client submits per generation step, so replaying a saved script
walks through exactly the same segment boundaries as the original session.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from spatialmem.geometry import Pose, compose, rotation_about, translation_pose

ACTIONS = (
    "move_forward",
    "move_backward",
    "move_left",
    "move_right",
    "move_up",
    "move_down",
    "orient_up",
    "orient_down",
    "orient_left",
    "orient_right",
)

DEFAULT_STEP_TRANSLATION = 0.1  # scene units per move step
DEFAULT_STEP_ROTATION = 3.0  # degrees per orient step


class ScriptError(ValueError):
    """Malformed action script or unknown action."""


@dataclass(frozen=True)
class ActionStep:
    action: str
    repeat: int = 1

    def __post_init__(self):
        if self.action not in ACTIONS:
            raise ScriptError(f"unknown action {self.action!r}")
        if self.repeat < 1:
            raise ScriptError(f"repeat must be >= 1, got {self.repeat}")


def _step_delta(action: str, step_translation: float, step_rotation_deg: float) -> Pose:
    # Camera frame: +x right, +y down, +z forward.
    t = step_translation
    r = np.deg2rad(step_rotation_deg)
    if action == "move_forward":
        return translation_pose(0.0, 0.0, t)
    if action == "move_backward":
        return translation_pose(0.0, 0.0, -t)
    if action == "move_left":
        return translation_pose(-t, 0.0, 0.0)
    if action == "move_right":
        return translation_pose(t, 0.0, 0.0)
    if action == "move_up":
        return translation_pose(0.0, -t, 0.0)
    if action == "move_down":
        return translation_pose(0.0, t, 0.0)
    if action == "orient_up":
        return rotation_about(0, r)
    if action == "orient_down":
        return rotation_about(0, -r)
    if action == "orient_left":
        return rotation_about(1, -r)
    if action == "orient_right":
        return rotation_about(1, r)
    raise ScriptError(f"unknown action {action!r}")


def actions_to_trajectory(
    start: Pose,
    steps,
    step_translation: float = DEFAULT_STEP_TRANSLATION,
    step_rotation_deg: float = DEFAULT_STEP_ROTATION,
):
    """One pose per elementary step, composed left-to-right in camera frame.

    The start pose itself is not in the output; the first element is the
    camera after the first elementary step.
    """
    steps = list(steps)
    if not steps:
        raise ScriptError("empty action script")
    poses = []
    pose = start
    for step in steps:
        delta = _step_delta(step.action, step_translation, step_rotation_deg)
        for _ in range(step.repeat):
            pose = compose(pose, delta)
            poses.append(pose)
    return poses


def parse_script(text: str):
    """Parse "action repeat" lines; '#' comments and blank lines ignored."""
    steps = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) == 1:
            action, repeat = parts[0], 1
        elif len(parts) == 2:
            action = parts[0]
            try:
                repeat = int(parts[1])
            except ValueError:
                raise ScriptError(f"line {lineno}: bad repeat {parts[1]!r}") from None
        else:
            raise ScriptError(f"line {lineno}: expected 'action repeat', got {line!r}")
        try:
            steps.append(ActionStep(action=action, repeat=repeat))
        except ScriptError as exc:
            raise ScriptError(f"line {lineno}: {exc}") from None
    return steps


def format_script(steps) -> str:
    return "\n".join(f"{s.action} {s.repeat}" for s in steps) + "\n"
