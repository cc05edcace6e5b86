"""Command-line surface: project / unproject / fixture / reconstruct /
render / pairs / expand / eval.

Exit codes: 0 success, 1 runtime failure, 2 usage or malformed input.
Progress goes to stderr; machine-readable output goes to files only.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .field import load_checkpoint, save_checkpoint
from .formats import (
    FormatError,
    load_manifest,
    read_ply,
    read_rvim,
    write_ply,
    write_rvim,
)
from .rangeview import BeamTable, Pose, RangeImage, project_points, unproject


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _load_beams(path: str) -> BeamTable:
    payload = json.loads(Path(path).read_text())
    if "beams" not in payload or "width" not in payload:
        raise FormatError(f"{path}: beam file needs 'beams' and 'width'")
    return BeamTable(np.asarray(payload["beams"], dtype=np.float64), int(payload["width"]))


def _apply_common(args, cfg: RunConfig) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "threads", None):
        cfg.threads = args.threads
    if cfg.threads > 0:
        torch.set_num_threads(cfg.threads)
    return cfg


def cmd_project(args) -> int:
    beams = _load_beams(args.beams)
    points = read_ply(args.input)
    img = project_points(points, beams)
    write_rvim(args.output, img)
    _log(f"projected {points.shape[0]} points -> {args.output}")
    return 0


def cmd_unproject(args) -> int:
    beams = _load_beams(args.beams)
    img = read_rvim(args.input)
    if img.shape != (beams.height, beams.width):
        raise FormatError(
            f"{args.input}: image {img.shape} does not match beams "
            f"({beams.height}, {beams.width})"
        )
    points = unproject(img, beams)
    write_ply(args.output, points)
    _log(f"unprojected {points.shape[0]} points -> {args.output}")
    return 0


def cmd_fixture(args) -> int:
    from .synth import corridor_fixture

    if args.name != "corridor":
        raise ConfigError(f"unknown fixture {args.name!r} (available: corridor)")
    fixture = corridor_fixture(
        args.seed, height=args.height, width=args.width, n_poses=args.poses
    )
    paths = fixture.write(args.out)
    for name, p in paths.items():
        _log(f"{name}: {p}")
    return 0


def cmd_reconstruct(args) -> int:
    from .figures import save_loss_curves
    from .training import reconstruct_single_pass, write_loss_csv

    cfg = _apply_common(args, load_config(args.config))
    if args.iters is not None:
        cfg.training.single_pass_iters = args.iters
    if args.anchors is not None:
        cfg.scene.anchor_count = args.anchors
    manifest = load_manifest(args.manifest)
    _log(f"reconstructing from {len(manifest.frames)} frames, "
         f"{cfg.training.single_pass_iters} iterations, seed {cfg.seed}")
    scene, log = reconstruct_single_pass(
        manifest, cfg.training, cfg.seed, scene_config=cfg.scene
    )
    save_checkpoint(scene, args.out)
    if args.loss_csv:
        write_loss_csv(log, args.loss_csv)
        save_loss_curves(log, Path(args.loss_csv).with_suffix(".png"))
    _log(f"checkpoint: {args.out} ({scene.anchor_count} anchors)")
    return 0


def _resolve_pose(args, manifest) -> Pose:
    if args.pose is not None:
        payload = json.loads(Path(args.pose).read_text())
        values = payload["pose"] if isinstance(payload, dict) else payload
        return Pose(np.asarray(values, dtype=np.float64).reshape(4, 4))
    if args.frame >= len(manifest.frames):
        raise ConfigError(f"frame {args.frame} out of range ({len(manifest.frames)} frames)")
    return manifest.frames[args.frame].pose


def cmd_render(args) -> int:
    from .rasterizer import distortion_mask, median_scale_delta, render
    from .field import decode_attributes

    cfg = _apply_common(args, load_config(args.config))
    scene = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    pose = _resolve_pose(args, manifest)
    out = render(scene, pose, manifest.beams)
    img = out.to_range_image()
    write_rvim(args.out, img)
    _log(f"rendered {img.shape} -> {args.out}")

    if args.median_out:
        plane = out.median_depth.detach().numpy().astype("<f4")
        Path(args.median_out).write_bytes(plane.tobytes())
    if args.mask_out:
        delta = median_scale_delta(decode_attributes(scene, pose))
        mask = distortion_mask(out, delta)
        np.save(args.mask_out, mask.mask)
        _log(f"mask (delta={delta:.4f}) -> {args.mask_out}")
    if args.ply:
        export = RangeImage(
            img.depth, img.intensity,
            (img.raydrop >= cfg.evaluation.raydrop_threshold).astype(np.float64),
        )
        write_ply(args.ply, unproject(export, manifest.beams))
    if args.preview:
        from .figures import save_range_panel

        target = None
        if args.frame is not None and args.pose is None and manifest.frames:
            target = manifest.frames[args.frame].load(manifest.beams)
        save_range_panel(img, args.preview, target=target)
    return 0


def cmd_pairs(args) -> int:
    from .expansion import make_training_pairs

    cfg = _apply_common(args, load_config(args.config))
    sigma = cfg.expansion.sigma if args.sigma is None else args.sigma
    tau = cfg.expansion.tau if args.tau is None else args.tau
    scene = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    pairs = make_training_pairs(scene, manifest, sigma, tau, cfg.seed, out_dir=args.out)
    _log(f"{len(pairs)} training pairs -> {args.out}")
    return 0


def cmd_expand(args) -> int:
    from .expansion import (
        ExternalSpoolProvider,
        ManifestOracleProvider,
        PassthroughProvider,
        expand_reconstruct,
        extrapolate_poses,
        generate_scans,
    )

    cfg = _apply_common(args, load_config(args.config))
    if args.iters is not None:
        cfg.training.expand_iters = args.iters
    scene = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    beams = manifest.beams

    spec = args.provider
    if spec == "oracle":
        if not args.generated_manifest:
            raise ConfigError("--provider oracle requires --generated-manifest")
        oracle_manifest = load_manifest(args.generated_manifest)
        provider = ManifestOracleProvider(oracle_manifest)
        poses = [f.pose for f in oracle_manifest.frames]
    elif spec == "passthrough":
        provider = PassthroughProvider()
        poses = extrapolate_poses(manifest, cfg.expansion.lateral_offsets)
    elif spec.startswith("external:"):
        provider = ExternalSpoolProvider(
            spec.split(":", 1)[1], beams, timeout=cfg.expansion.spool_timeout
        )
        poses = extrapolate_poses(manifest, cfg.expansion.lateral_offsets)
    else:
        raise ConfigError(
            f"unknown provider {spec!r} (oracle | passthrough | external:<spool>)"
        )

    _log(f"generating {len(poses)} scans via {provider.name}")
    generated = generate_scans(scene, poses, provider, beams)
    if not generated and poses:
        _log("warning: provider produced no scans; expansion degenerates to "
             "continued single-pass training")
    _log(f"expanding for {cfg.training.expand_iters} iterations")
    expand_reconstruct(scene, manifest, generated, cfg.training, cfg.seed)
    save_checkpoint(scene, args.out)
    _log(f"refined checkpoint: {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .figures import save_bev_overlay, save_metric_chart, save_range_panel
    from .metrics import METRIC_NAMES, evaluate
    from .rasterizer import render

    cfg = _apply_common(args, load_config(args.config))
    scene = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    report = evaluate(scene, manifest, manifest.beams, cfg.evaluation)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    (out_dir / "report.txt").write_text(report.to_table() + "\n")
    header = "frame," + ",".join(METRIC_NAMES)
    rows = [header] + [
        f"{r['frame']}," + ",".join(f"{r[m]:.17g}" for m in METRIC_NAMES)
        for r in report.per_frame
    ]
    (out_dir / "per_frame.csv").write_text("\n".join(rows) + "\n")

    save_metric_chart(report, out_dir / "metrics.png")
    if manifest.frames and not args.no_previews:
        frame = manifest.frames[0]
        target = frame.load(manifest.beams)
        pred = render(scene, frame.pose, manifest.beams).to_range_image()
        save_range_panel(pred, out_dir / "frame0.png", target=target)
        export = RangeImage(
            pred.depth, pred.intensity,
            (pred.raydrop >= cfg.evaluation.raydrop_threshold).astype(np.float64),
        )
        save_bev_overlay(
            unproject(export, manifest.beams)[:, :3],
            unproject(target, manifest.beams)[:, :3],
            out_dir / "bev0.png",
            extent=cfg.evaluation.bev_extent,
        )
    _log(report.to_table())
    _log(f"report -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lidarnvs",
        description="LiDAR novel-view synthesis with a neural 2D Gaussian field",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="RunConfig JSON file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap torch CPU threads")

    p = sub.add_parser("project", help="PLY point cloud -> RVIM range image")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--beams", required=True, help="JSON with beams+width (manifests work)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("unproject", help="RVIM range image -> PLY point cloud")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--beams", required=True)
    p.set_defaults(func=cmd_unproject)

    p = sub.add_parser("fixture", help="write a synthetic dataset to disk")
    p.add_argument("--name", default="corridor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--poses", type=int, default=20)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("reconstruct", help="single-pass training -> checkpoint")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--anchors", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("render", help="checkpoint + pose -> RVIM (+ PLY, mask, preview)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, help="supplies beams and poses")
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--pose", default=None, help="JSON file with 16 row-major floats")
    p.add_argument("--out", required=True)
    p.add_argument("--ply", default=None)
    p.add_argument("--median-out", default=None, help="raw float32 plane of median depth")
    p.add_argument("--mask-out", default=None, help="distortion mask as .npy")
    p.add_argument("--preview", default=None, help="channel panel PNG")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("pairs", help="degraded/clean training pairs for the generator")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("expand", help="expansive reconstruction from generated scans")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--provider", required=True,
                   help="oracle | passthrough | external:<spool-dir>")
    p.add_argument("--generated-manifest", default=None,
                   help="ground-truth manifest for the oracle provider")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("eval", help="held-out evaluation report (JSON/CSV/figures)")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-previews", action="store_true")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FormatError, ConfigError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        _log(f"error: {exc}")
        return 2
    except Exception as exc:  # runtime failure
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
