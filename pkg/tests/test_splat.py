from types import SimpleNamespace

import numpy as np
import pytest

from spatialmem.geometry import Intrinsics, Pose, translation_pose
from spatialmem.memory import LocalPointCloud, build_cloud
from spatialmem.metrics import psnr
from spatialmem.scene import make_scene, render_ground_truth
from spatialmem.splat import (
    BACKGROUND_GRAY,
    DEPTH_SENTINEL,
    PAD,
    AnchorClip,
    AnchorFrame,
    invisible_clip,
    render_anchor_clip,
    render_anchor_frame,
    save_anchor_clip,
)

INTR = Intrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


def point_cloud(points, colors, pose=None):
    return LocalPointCloud(
        points=np.asarray(points, dtype=np.float64),
        colors=np.asarray(colors, dtype=np.float32),
        capture_pose=pose or Pose.identity(),
        capture_intrinsics=INTR,
    )


def empty_cloud(pose=None):
    return point_cloud(np.zeros((0, 3)), np.zeros((0, 3)), pose)


class TestRenderAnchorFrame:
    def test_empty_cloud_fully_invisible(self):
        frame = render_anchor_frame(empty_cloud(), Pose.identity(), INTR, 1)
        assert not frame.visibility.any()
        assert (frame.depth == DEPTH_SENTINEL).all()
        assert (frame.rgb == BACKGROUND_GRAY).all()

    def test_single_point_lands_at_projection(self):
        cloud = point_cloud([[0.0, 0.0, 4.0]], [[1.0, 0.0, 0.0]])
        frame = render_anchor_frame(cloud, Pose.identity(), INTR, 0)
        assert frame.visibility[64, 64]
        assert frame.depth[64, 64] == 4.0
        assert tuple(frame.rgb[64, 64]) == (1.0, 0.0, 0.0)
        assert frame.visibility.sum() == 1

    def test_nearer_point_wins_z_buffer(self):
        cloud = point_cloud(
            [[0.0, 0.0, 5.0], [0.0, 0.0, 2.0]],
            [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]],
        )
        frame = render_anchor_frame(cloud, Pose.identity(), INTR, 0)
        assert tuple(frame.rgb[64, 64]) == (1.0, 0.0, 0.0)
        assert frame.depth[64, 64] == 2.0

    def test_depth_is_min_even_when_tie_color_differs(self):
        # Index 0 sits Z_TIE_EPS/2 behind index 1: within the tie band the
        # smaller index colors the pixel, but depth stays the true minimum.
        cloud = point_cloud(
            [[0.0, 0.0, 2.0000005], [0.0, 0.0, 2.0]],
            [[0.0, 0.0, 1.0], [1.0, 1.0, 0.0]],
        )
        frame = render_anchor_frame(cloud, Pose.identity(), INTR, 0)
        assert tuple(frame.rgb[64, 64]) == (0.0, 0.0, 1.0)
        assert frame.depth[64, 64] == 2.0

    def test_exact_tie_smaller_index_wins(self):
        a = point_cloud(
            [[0.0, 0.0, 3.0], [0.0, 0.0, 3.0]],
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        )
        frame = render_anchor_frame(a, Pose.identity(), INTR, 0)
        assert tuple(frame.rgb[64, 64]) == (1.0, 0.0, 0.0)

    def test_behind_camera_not_rendered(self):
        cloud = point_cloud([[0.0, 0.0, -2.0]], [[1.0, 0.0, 0.0]])
        frame = render_anchor_frame(cloud, Pose.identity(), INTR, 2)
        assert not frame.visibility.any()

    def test_splat_radius_expands_disc(self):
        cloud = point_cloud([[0.0, 0.0, 4.0]], [[1.0, 0.0, 0.0]])
        frame = render_anchor_frame(cloud, Pose.identity(), INTR, 2)
        # Disc of radius 2: 13 pixels (du^2+dv^2 <= 4).
        assert frame.visibility.sum() == 13
        assert frame.visibility[64, 64] and frame.visibility[62, 64]

    def test_monotone_visibility_in_radius(self):
        scene = make_scene(1)
        gt = render_ground_truth(scene, translation_pose(0, 0, -2), INTR)
        cloud = build_cloud(gt, stride=4)
        masks = [
            render_anchor_frame(cloud, translation_pose(0.3, 0, -2), INTR, r).visibility
            for r in (0, 1, 2)
        ]
        assert (masks[0] <= masks[1]).all()
        assert (masks[1] <= masks[2]).all()

    def test_off_image_splat_clipped(self):
        # Projects to u = 64 + 100*x/z; choose x so the center is 1 px off.
        z = 4.0
        x = (128.5 - 64.0) * z / 100.0  # rounds to u=128+, off the right edge
        cloud = point_cloud([[x, 0.0, z]], [[1.0, 0.0, 0.0]])
        frame = render_anchor_frame(cloud, Pose.identity(), INTR, 2)
        assert frame.visibility.any()
        assert frame.visibility[:, 127].any()

    def test_determinism(self):
        scene = make_scene(2)
        gt = render_ground_truth(scene, translation_pose(0, 0, -2), INTR)
        cloud = build_cloud(gt, stride=2)
        target = translation_pose(0.4, -0.1, -1.8)
        a = render_anchor_frame(cloud, target, INTR, 1)
        b = render_anchor_frame(cloud, target, INTR, 1)
        assert (a.rgb == b.rgb).all()
        assert (a.depth == b.depth).all()
        assert (a.visibility == b.visibility).all()

    def test_self_render_fidelity(self):
        scene = make_scene(0)
        pose = translation_pose(0.2, -0.3, -2.0)
        gt = render_ground_truth(scene, pose, INTR)
        cloud = build_cloud(gt, stride=1)
        frame = render_anchor_frame(cloud, pose, INTR, 1)
        # Every surface pixel is revisited by its own splat; sentinel (sky)
        # pixels stay invisible apart from boundary bleed.
        assert frame.visibility[np.isfinite(gt.depth)].all()
        assert psnr(gt.rgb, frame.rgb, frame.visibility) >= 30.0


class TestRenderAnchorClip:
    def test_capture_pose_chunk_identity_rel(self):
        pose = translation_pose(0.5, -0.2, -1.0)
        scene = make_scene(0)
        gt = render_ground_truth(scene, pose, INTR)
        cloud = build_cloud(gt, stride=4)
        chunk = SimpleNamespace(poses=[pose])
        clip = render_anchor_clip(cloud, chunk, INTR, 1, memory_id=7)
        assert len(clip) == 1
        assert clip.rel_poses[0].approx_equal(Pose.identity(), tol=1e-9)
        assert clip.source_memory_id == 7

    def test_eight_pose_chunk(self):
        scene = make_scene(0)
        gt = render_ground_truth(scene, Pose.identity(), INTR)
        cloud = build_cloud(gt, stride=8)
        chunk = SimpleNamespace(
            poses=[translation_pose(0.1 * t, 0, 0) for t in range(8)]
        )
        clip = render_anchor_clip(cloud, chunk, INTR, 1)
        assert len(clip.frames) == 8 and len(clip.rel_poses) == 8

    def test_empty_cloud_clip_all_invisible(self):
        chunk = SimpleNamespace(poses=[translation_pose(0, 0, float(t)) for t in range(4)])
        clip = render_anchor_clip(empty_cloud(), chunk, INTR, 1)
        assert all(not f.visibility.any() for f in clip.frames)

    def test_empty_chunk_rejected(self):
        with pytest.raises(ValueError):
            render_anchor_clip(empty_cloud(), SimpleNamespace(poses=[]), INTR, 1)


class TestInvisibleClip:
    def test_length_and_masks(self):
        clip = invisible_clip(8, INTR)
        assert len(clip) == 8
        assert clip.source_memory_id == PAD
        for frame, rel in zip(clip.frames, clip.rel_poses):
            assert not frame.visibility.any()
            assert (frame.depth == DEPTH_SENTINEL).all()
            assert rel.approx_equal(Pose.identity())

    def test_bad_length_rejected(self):
        with pytest.raises(ValueError):
            invisible_clip(0, INTR)


class TestExport:
    def test_save_clip_writes_frames_masks_sidecar(self, tmp_path):
        scene = make_scene(0)
        gt = render_ground_truth(scene, Pose.identity(), INTR)
        cloud = build_cloud(gt, stride=4)
        chunk = SimpleNamespace(poses=[Pose.identity(), translation_pose(0.1, 0, 0)])
        clip = render_anchor_clip(cloud, chunk, INTR, 1, memory_id=3)
        save_anchor_clip(clip, tmp_path / "clip")
        files = sorted(p.name for p in (tmp_path / "clip").iterdir())
        assert files == [
            "clip.json",
            "frame_0000.png",
            "frame_0001.png",
            "mask_0000.png",
            "mask_0001.png",
        ]


class TestFrameValidation:
    def test_mismatched_shapes_rejected(self):
        with pytest.raises(ValueError):
            AnchorFrame(
                rgb=np.zeros((4, 4, 3), dtype=np.float32),
                visibility=np.zeros((4, 5), dtype=bool),
                depth=np.zeros((4, 4)),
            )

    def test_clip_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            AnchorClip(frames=[], rel_poses=[Pose.identity()], source_memory_id=PAD)
