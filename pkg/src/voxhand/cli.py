"""Command-line entry point: ``voxhand <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import evalkit, formats
from . import pipeline as pl
from .augment import (CameraRange, HoleConfig, default_capsules, generate_synthetic_dataset, load_capsules,
                      parse_bvh, pose_to_bvh, rescale_bones)
from .augment.bvh import parse_bvh_document
from .config import describe_keys, load_config
from .errors import EmptyEvaluation, PipelineError, VoxhandError
from .kinematics import ik_solve

EXIT_OK, EXIT_STAGE, EXIT_EMPTY, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------- commands

def cmd_synth(cfg, args):
    model = cfg.skeleton
    caps = load_capsules(cfg.path("capsules")) if cfg.get("capsules") else default_capsules(model)
    if args.poses:
        _, poses = parse_bvh(Path(args.poses).read_text(), model)
    else:
        rng = np.random.default_rng(cfg.get("seed"))
        poses = [model.random_pose(rng) for _ in range(args.sources)]
    size = cfg.get("synth_size")
    cr = CameraRange(cfg.get("synth_azimuth"), cfg.get("synth_elevation"), cfg.get("synth_distance"),
                     size, size, cfg.get("fx"))
    holes = HoleConfig() if cfg.get("synth_holes") else None
    samples = generate_synthetic_dataset(poses, cfg.get("synth_scales"), cr, args.count, cfg.get("seed"),
                                         model, caps, holes)
    out = Path(args.out)
    for sub in ("depth", "joints") + (("clean",) if holes else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        d, j = out / "depth" / f"{i:05d}.d3d", out / "joints" / f"{i:05d}.csv"
        formats.save_depth(d, s.depth)
        formats.save_joints(j, [model.annotate(s.joints)])
        clean = None
        if s.clean is not None:
            clean = out / "clean" / f"{i:05d}.d3d"
            formats.save_depth(clean, s.clean)
        cam = tuple(Rotation.from_matrix(s.camera.rotation).as_rotvec()) + tuple(s.camera.translation)
        records.append(formats.SampleRecord(d, j, s.scale, cam, clean))
    (out / "manifest.txt").write_text(formats.manifest_text(records, out))
    print(f"wrote {len(records)} samples to {out}")


def _depth_joint_pairs(manifest):
    recs = formats.load_manifest(manifest)
    pairs = []
    for r in recs:
        frames = formats.load_joints(r.joints)
        if len(frames) != 1:
            raise VoxhandError(f"{r.joints}: expected one frame, got {len(frames)}")
        pairs.append((formats.load_depth(r.depth), frames[0]))
    return recs, pairs


def cmd_voxelize(cfg, args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in args.depth:
        vol = pl.network_input(cfg, formats.load_depth(p))
        formats.save_tsdf(out / (Path(p).stem + ".t3d"), vol)
    print(f"wrote {len(args.depth)} volumes to {out}")


def _loss_log(path, losses):
    if path:
        Path(path).write_text("epoch,loss\n" + "".join(f"{i + 1},{l:.9g}\n" for i, l in enumerate(losses)))


def cmd_train_refine(cfg, args):
    recs = formats.load_manifest(args.manifest)
    pairs = [(formats.load_depth(r.depth), formats.load_depth(r.clean) if r.clean else None) for r in recs]
    res = pl.train_refine(cfg, pl.refine_training_set(cfg, pairs))
    formats.save_weights(args.out, res.network.state())
    _loss_log(args.losses, res.losses)
    print(f"refine: final loss {res.losses[-1]:.6g}, weights -> {args.out}")


def cmd_train_pose(cfg, args):
    recs, pairs = _depth_joint_pairs(args.manifest)
    refine = pl.load_refine(cfg, args.refine_weights)
    if args.joint:
        ds = pl.pose_training_set(cfg, pairs)
        clean = [formats.load_depth(r.clean) if r.clean else None for r in recs]
        targets = None
        if all(c is not None for c in clean):
            targets = [t for _, t in pl.refine_training_set(cfg, [(d, c) for (d, _), c in zip(pairs, clean)])]
        refine, pose, losses = pl.train_end_to_end(cfg, ds, refine, targets)
        formats.save_weights(args.out, pose.state())
        formats.save_weights(args.refine_out, refine.state())
        _loss_log(args.losses, losses)
        err = pl.mean_joint_error(pose, pl.pose_training_set(cfg, pairs, refine), cfg.codec)
        print(f"joint: final loss {losses[-1]:.6g}, training mean joint error {err:.3f} mm, "
              f"weights -> {args.out}, {args.refine_out}")
        return
    ds = pl.pose_training_set(cfg, pairs, refine)
    res = pl.train_pose(cfg, ds)
    formats.save_weights(args.out, res.network.state())
    _loss_log(args.losses, res.losses)
    err = pl.mean_joint_error(res.network, ds, cfg.codec)
    print(f"pose: final loss {res.losses[-1]:.6g}, training mean joint error {err:.3f} mm, weights -> {args.out}")


def cmd_predict(cfg, args):
    models = pl.load_models(cfg, args.pose_weights, args.refine_weights)
    recs = formats.load_manifest(args.manifest)
    preds = [pl.run_pipeline(cfg, formats.load_depth(r.depth), models) for r in recs]
    formats.save_joints(args.out, preds)
    print(f"wrote {len(preds)} predictions to {args.out}")


def _load_frames(path):
    p = Path(path)
    text = p.read_text()
    if text.startswith("frame"):
        return formats.parse_joints_csv(text)
    frames = []
    for r in formats.parse_manifest(text, p.parent):
        frames.extend(formats.load_joints(r.joints))
    return frames


def cmd_eval(cfg, args):
    preds, gts = _load_frames(args.pred), _load_frames(args.gt)
    summary = evalkit.evaluate(preds, gts, args.step)
    curve, table, joints = evalkit.emit_csv(summary, args.step)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(curve)
    (out / "table.csv").write_text(table)
    (out / "joints.csv").write_text(joints)
    sys.stdout.write(table)
    print(f"mean joint error {summary.overall:.3f} mm over {summary.num_frames} frames")


def cmd_ik_fit(cfg, args):
    model = cfg.skeleton
    frames = formats.load_joints(args.joints)
    poses, residuals = [], []
    for f in frames:
        r = ik_solve(model, f, cfg.pso)
        poses.append(r.pose)
        residuals.append(r.residual)
    Path(args.out).write_text(pose_to_bvh(model, poses).dumps())
    if frames:
        print(f"fitted {len(frames)} frames, mean residual {np.mean(residuals):.3f} mm -> {args.out}")


def cmd_bvh_export(cfg, args):
    doc = parse_bvh_document(Path(args.bvh).read_text())
    factors = {}
    for item in args.bone or ():
        name, _, v = item.partition("=")
        factors[name] = float(v)
    doc = rescale_bones(doc, factors if factors else args.scale)
    Path(args.out).write_text(doc.dumps())
    print(f"wrote {len(doc.frames)} frames to {args.out}")


# --------------------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="voxhand", formatter_class=argparse.RawDescriptionHelpFormatter,
                description="Volumetric hand pose estimation from depth images.",
                epilog="config keys (key = value lines, # comments):\n" + describe_keys())
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--toy", action="store_true", help="small 24^3 preset for quick runs")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic dataset")
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--out", default="synth")
    s.add_argument("--poses", help="BVH file of source poses (default: random in-limit poses)")
    s.add_argument("--sources", type=int, default=100, help="number of random source poses")
    s.set_defaults(func=cmd_synth, stage="synth")

    s = sub.add_parser("voxelize", help="depth (D3D1) -> TSDF (T3D1)")
    s.add_argument("depth", nargs="+")
    s.add_argument("--out", default="tsdf")
    s.set_defaults(func=cmd_voxelize, stage="voxelize")

    s = sub.add_parser("train-refine", help="train the TSDF refine network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="refine.w3d")
    s.add_argument("--losses", help="write per-epoch losses as CSV")
    s.set_defaults(func=cmd_train_refine, stage="train-refine")

    s = sub.add_parser("train-pose", help="train the joint regression network")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", default="pose.w3d")
    s.add_argument("--refine-weights", help="train on refined TSDFs (with --joint: initial refine weights)")
    s.add_argument("--joint", action="store_true", help="train refine and pose networks end to end")
    s.add_argument("--refine-out", default="refine_joint.w3d", help="refine weights written by --joint")
    s.add_argument("--losses", help="write per-epoch losses as CSV")
    s.set_defaults(func=cmd_train_pose, stage="train-pose")

    s = sub.add_parser("predict", help="estimate joints for every sample of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--pose-weights", required=True)
    s.add_argument("--refine-weights")
    s.add_argument("--out", default="pred.csv")
    s.set_defaults(func=cmd_predict, stage="predict")

    s = sub.add_parser("eval", help="good-frame curve, table and per-joint errors")
    s.add_argument("pred", help="predicted joints CSV")
    s.add_argument("gt", help="ground-truth joints CSV or manifest")
    s.add_argument("--out", default="eval")
    s.add_argument("--step", type=float, default=1.0, help="curve step (mm)")
    s.set_defaults(func=cmd_eval, stage="eval")

    s = sub.add_parser("ik-fit", help="fit skeleton poses to joints CSV frames, write BVH")
    s.add_argument("joints")
    s.add_argument("--out", default="poses.bvh")
    s.set_defaults(func=cmd_ik_fit, stage="ik-fit")

    s = sub.add_parser("bvh-export", help="rescale a BVH skeleton (pose transfer)")
    s.add_argument("bvh")
    s.add_argument("--scale", type=float, default=1.0, help="global bone scale")
    s.add_argument("--bone", action="append", help="per-joint factor NAME=F (repeatable)")
    s.add_argument("--out", default="scaled.bvh")
    s.set_defaults(func=cmd_bvh_export, stage="bvh-export")
    return p


def cli_dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("voxhand: a command is required")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if not e.code else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")

    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.toy:
        overrides["preset"] = "toy"
    try:
        cfg = load_config(args.config, overrides)
        args.func(cfg, args)
    except EmptyEvaluation as e:
        print(f"[{args.stage}] EmptyEvaluation: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except PipelineError as e:
        print(f"[{args.stage}:{e.stage}] {type(e.cause).__name__}: {e.cause}", file=sys.stderr)
        return EXIT_STAGE
    except (VoxhandError, OSError) as e:
        print(f"[{args.stage}] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
