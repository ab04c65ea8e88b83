"""Command-line entry points.

Subcommands:
  retrieve      pick memories for a trajectory and print the selection trace
  run-loop      run an action script against a scene or saved context
  eval-revisit  70-frame partial-revisit protocol over N seeded scenes
  serve         start the HTTP session service
  openapi       write the service's OpenAPI schema to a file
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from spatialmem.actions import parse_script
from spatialmem.assembly import plan_chunks
from spatialmem.geometry import load_intrinsics, load_trajectory, save_intrinsics, save_trajectory
from spatialmem.images import load_png, mask_png_bytes, save_png
from spatialmem.loop import (
    FrameRecord,
    LoopConfig,
    bootstrap_session,
    evaluate_revisit,
    run_action_group,
    scene_context,
)
from spatialmem.memory import load_bank
from spatialmem.metrics import psnr, ssim
from spatialmem.retrieval import RetrievalConfig, retrieve_all_chunks
from spatialmem.scene import (
    SceneSpec,
    ground_truth_estimator,
    make_scene,
    render_ground_truth,
)


def _load_config(path: str | None) -> LoopConfig:
    if path is None:
        return LoopConfig()
    with open(path) as fh:
        return LoopConfig.from_dict(json.load(fh))


def cmd_retrieve(args) -> int:
    bank = load_bank(args.bank)
    trajectory = load_trajectory(args.trajectory)
    if args.intrinsics:
        intr = load_intrinsics(args.intrinsics)
    else:
        intr = bank.latest().cloud.capture_intrinsics
    chunks = plan_chunks(trajectory, args.chunk_len)
    config = RetrievalConfig(
        intrinsics=intr,
        budget=args.budget,
        tau=args.tau,
        coverage_scale=args.coverage_scale,
    )
    results = retrieve_all_chunks(bank, chunks, config)
    json.dump([r.to_dict() for r in results], sys.stdout, indent=2)
    print()
    return 0


def _load_context_dir(path: Path):
    """A context directory: scene.json, intrinsics.json, trajectory.json,
    and one frame_%06d.png per pose."""
    scene = SceneSpec.load(path / "scene.json")
    intr = load_intrinsics(path / "intrinsics.json")
    poses = load_trajectory(path / "trajectory.json")
    frames = []
    for i, pose in enumerate(poses):
        rgb = load_png(path / f"frame_{i:06d}.png")
        frames.append(FrameRecord(rgb=rgb, pose=pose, intrinsics=intr))
    return scene, intr, frames


def cmd_run_loop(args) -> int:
    config = _load_config(args.config)
    with open(args.script) as fh:
        script = parse_script(fh.read())

    if args.scene is not None:
        scene = make_scene(args.scene)
        context = scene_context(scene, config.intrinsics, n_frames=args.context_frames)
    else:
        scene, intr, context = _load_context_dir(Path(args.context))
        if intr != config.intrinsics:
            config = replace(config, intrinsics=intr)

    estimator = ground_truth_estimator(scene)
    state = bootstrap_session(context, config, estimator)
    for step in script:
        state = run_action_group(state, step)

    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    frame_metrics = []
    for frame in state.generated:
        save_png(frame.rgb, out / "frames" / f"frame_{frame.index:06d}.png")
        (out / "masks" / f"hole_{frame.index:06d}.png").write_bytes(
            mask_png_bytes(frame.hole_mask)
        )
        gt = render_ground_truth(scene, frame.pose, config.intrinsics)
        mask = ~frame.hole_mask
        entry = {
            "index": frame.index,
            "hole_fraction": float(frame.hole_mask.mean()),
            "psnr": psnr(frame.rgb, gt.rgb, mask) if mask.any() else None,
            "ssim": ssim(frame.rgb, gt.rgb, mask) if mask.any() else None,
        }
        frame_metrics.append(entry)

    save_trajectory([f.pose for f in state.generated], out / "trajectory.json")
    save_intrinsics(config.intrinsics, out / "intrinsics.json")
    trace = {
        "scene_seed": args.scene,
        "config": config.to_dict(),
        "script": [{"action": s.action, "repeat": s.repeat} for s in script],
        "segments": [t.to_dict() for t in state.traces],
    }
    with open(out / "trace.json", "w") as fh:
        json.dump(trace, fh, indent=2)
    psnrs = [m["psnr"] for m in frame_metrics if m["psnr"] is not None]
    metrics = {
        "frames": frame_metrics,
        "mean_psnr": float(np.mean(psnrs)) if psnrs else None,
        "mean_hole_fraction": float(
            np.mean([m["hole_fraction"] for m in frame_metrics])
        ) if frame_metrics else None,
        "n_generated": len(state.generated),
    }
    with open(out / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2)
    print(f"generated {len(state.generated)} frames -> {out}")
    return 0


def cmd_eval_revisit(args) -> int:
    config = _load_config(args.config)
    if args.K is not None:
        config = LoopConfig.from_dict({**config.to_dict(), "K": args.K})
    rows = []
    for seed in range(args.seed_start, args.seed_start + args.scenes):
        noise = None
        if args.depth_sigma > 0 or args.pose_jitter_deg > 0:
            from spatialmem.scene import NoiseModel

            noise = NoiseModel(
                depth_sigma=args.depth_sigma,
                rot_jitter_deg=args.pose_jitter_deg,
                trans_jitter=args.trans_jitter,
                seed=seed,
            )
        rows.append(
            evaluate_revisit(seed, config, noise=noise, global_memory=args.global_memory)
        )
    header = f"{'seed':>6} {'psnr':>8} {'ssim':>8} {'hole%':>8} {'coverage%':>10}"
    print(header)
    for row in rows:
        print(
            f"{row['scene_seed']:>6} {row['psnr_mean']:8.2f} {row['ssim_mean']:8.4f} "
            f"{100 * row['hole_fraction_mean']:8.2f} {100 * row['coverage_fraction_mean']:10.2f}"
        )
    print(
        f"{'mean':>6} {np.mean([r['psnr_mean'] for r in rows]):8.2f} "
        f"{np.mean([r['ssim_mean'] for r in rows]):8.4f} "
        f"{100 * np.mean([r['hole_fraction_mean'] for r in rows]):8.2f} "
        f"{100 * np.mean([r['coverage_fraction_mean'] for r in rows]):10.2f}"
    )
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


def cmd_serve(args) -> int:
    from spatialmem.service import serve

    serve(
        port=args.port,
        scene_seed_default=args.scene_seed_default,
        max_sessions=args.max_sessions,
    )
    return 0


def cmd_openapi(args) -> int:
    from spatialmem.service import create_app

    schema = create_app().openapi()
    with open(args.out, "w") as fh:
        json.dump(schema, fh, indent=2)
        fh.write("\n")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialmem")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("retrieve", help="select memories covering a trajectory")
    p.add_argument("--bank", required=True, help="bank directory (index.json + PLY files)")
    p.add_argument("--trajectory", required=True, help="trajectory JSON file")
    p.add_argument("--intrinsics", help="intrinsics JSON (default: from bank)")
    p.add_argument("--chunk-len", type=int, default=8)
    p.add_argument("--budget", type=int, default=4)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--coverage-scale", type=int, default=4)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("run-loop", help="run an action script, writing frames and traces")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scene", type=int, help="seed of a synthetic scene")
    src.add_argument("--context", help="directory with context frames + scene.json")
    p.add_argument("--script", required=True, help="text file, lines of 'action count'")
    p.add_argument("--config", help="LoopConfig JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--context-frames", type=int, default=12)
    p.set_defaults(func=cmd_run_loop)

    p = sub.add_parser("eval-revisit", help="partial-revisit protocol over seeded scenes")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--seed-start", type=int, default=0)
    p.add_argument("--config", help="LoopConfig JSON file")
    p.add_argument("--K", type=int, help="override retrieval budget")
    p.add_argument("--depth-sigma", type=float, default=0.0)
    p.add_argument("--pose-jitter-deg", type=float, default=0.0)
    p.add_argument("--trans-jitter", type=float, default=0.0)
    p.add_argument("--global-memory", action="store_true", help="single fused-cloud ablation")
    p.add_argument("--out", help="also write rows as JSON")
    p.set_defaults(func=cmd_eval_revisit)

    p = sub.add_parser("serve", help="start the HTTP session service")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--scene-seed-default", type=int, default=0)
    p.add_argument("--max-sessions", type=int, default=64)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("openapi", help="write the HTTP API schema")
    p.add_argument("--out", default="openapi.json")
    p.set_defaults(func=cmd_openapi)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
