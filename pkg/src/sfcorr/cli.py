"""Command-line entry point: ``sfcorr <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import train as trainmod
from .data import FrameDataset, generate_synthetic_video, random_scene
from .data.loader import frame_name, read_keypoints, read_video_dir, write_keypoints, write_video_dir
from .data.netpbm import load_label, save_label
from .engine import REGISTRY, check_op
from .errors import ConfigError, DataError, NumericError, SFCError, ShapeError
from .pipeline import (keypoint_scores, propagate_keypoints, propagate_segmentation, segmentation_scores,
                       video_features)
from .propagation import dump_affinity_heatmap

log = logging.getLogger("sfcorr")


# --------------------------------------------------------------------------
# config plumbing
# --------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser, sections) -> None:
    g = p.add_argument_group("config overrides (flags win over --config)")
    for sec, key in cfgmod.keys():
        if sec in sections:
            default = cfgmod.default_value(sec, key)
            g.add_argument(f"--{sec}.{key}", dest=f"cfg:{sec}.{key}", metavar=type(default).__name__.upper(),
                           default=None, help=f"default {cfgmod._format(default)}")


def _resolve_config(args, base: cfgmod.Config) -> cfgmod.Config:
    cfg = base
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg = cfgmod.parse(text, base=base)
    overrides = {}
    for dest, value in vars(args).items():
        if dest.startswith("cfg:") and value is not None:
            sec, key = dest[4:].split(".", 1)
            overrides[(sec, key)] = value
    if getattr(args, "seed", None) is not None:
        overrides[("seeds", "init")] = str(args.seed)
        overrides[("seeds", "data")] = str(args.seed)
    return cfgmod.apply_overrides(cfg, overrides)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _train(kind: str):
    def run(args) -> int:
        cfg = _resolve_config(args, trainmod.default_config(kind))
        dataset = FrameDataset.from_directory(args.data)
        out = Path(args.out)
        res = trainmod.train(kind, cfg, dataset, out_dir=out, grad_check_first=args.grad_check,
                             progress_every=args.progress)
        if res.skipped:
            log.warning("%d batches skipped (empty positive mask)", res.skipped)
        last = res.losses[-1] if len(res.losses) else float("nan")
        print(f"{kind}: {len(res.losses)} steps, final loss {last:.4f}, checkpoint {out / 'model.sfck'}")
        return 0
    return run


def _load_checked(path, expect_hash=None, allow_mismatch=False):
    model = trainmod.load_model(path)
    if expect_hash is not None and model.config_hash != expect_hash and not allow_mismatch:
        raise ConfigError(f"checkpoint {path} was trained with a different architecture "
                          f"(hash {model.config_hash:016x} vs {expect_hash:016x}); pass --allow-mismatch to use it")
    return model


def cmd_propagate(args) -> int:
    cfg = _resolve_config(args, cfgmod.Config())
    expect = cfgmod.architecture_hash(cfg) if args.config else None
    fine = _load_checked(args.fine, expect, args.allow_mismatch) if args.fine else None
    sem = _load_checked(args.semantic, expect, args.allow_mismatch) if args.semantic else None
    if fine is None and sem is None:
        raise ConfigError("propagate needs --fine and/or --semantic")
    if fine is not None and sem is not None and fine.config_hash != sem.config_hash and not args.allow_mismatch:
        raise ConfigError("fine and semantic checkpoints have different architectures; "
                          "pass --allow-mismatch to fuse them anyway")
    pcfg = cfg.propagation_config()
    video = read_video_dir(args.video)
    H, W = video.frames.shape[2:]
    feats = video_features(fine.pair if fine else None, video.frames, sem.pair if sem else None, lam=pcfg.lam)
    out = Path(args.out)
    if args.mode == "kp":
        kps = read_keypoints(args.first_keypoints) if args.first_keypoints else video.keypoints
        if kps is None:
            raise DataError("keypoint mode needs keypoints.txt in the video directory or --first-keypoints")
        tracks = propagate_keypoints(feats, kps[0], pcfg, (H, W))
        out.mkdir(parents=True, exist_ok=True)
        write_keypoints(out / "keypoints.txt", tracks)
    else:
        first_path = Path(args.first_labels) if args.first_labels else Path(args.video) / "labels" / "frame00000.pgm"
        if not first_path.exists():
            raise DataError(f"first-frame labels not found: {first_path}")
        first = load_label(first_path)
        if first.shape != (H, W):
            raise ShapeError(f"first-frame labels are {first.shape[1]}x{first.shape[0]} but frames are {W}x{H}")
        _, decoded = propagate_segmentation(feats, first, pcfg)
        (out / "labels").mkdir(parents=True, exist_ok=True)
        for t, lab in enumerate(decoded):
            save_label(out / "labels" / f"{frame_name(t)}.pgm", lab)
    if args.heatmap:
        i, j = (int(v) for v in args.heatmap.split(","))
        (out / "heatmaps").mkdir(parents=True, exist_ok=True)
        for t in range(len(feats)):
            dump_affinity_heatmap(feats, (i, j), t, out / "heatmaps" / f"{frame_name(t)}.pgm")
    cfgmod.save(cfg, out / "config.ini")
    print(f"propagated {len(feats)} frames to {out}")
    return 0


def _label_files(d: Path) -> dict[int, Path]:
    if (d / "labels").is_dir():
        d = d / "labels"
    files = {}
    for f in sorted(d.glob("frame*.pgm")):
        try:
            files[int(f.stem[5:])] = f
        except ValueError:
            continue
    return files


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    rows_out = []
    if args.metric == "jf":
        pred_f, gt_f = _label_files(pred_dir), _label_files(gt_dir)
        if not gt_f:
            raise DataError(f"no ground-truth label frames in {gt_dir}")
        missing = sorted(set(gt_f) - set(pred_f))
        if missing:
            raise DataError(f"prediction is missing frames {missing}")
        frames = sorted(gt_f)
        pred = np.stack([load_label(pred_f[t]) for t in frames])
        gt = np.stack([load_label(gt_f[t]) for t in frames])
        s = segmentation_scores(pred, gt)
        header = ("frame", "J", "F", "JF")
        rows_out = [(t, j, f, (j + f) / 2) for t, (j, f) in zip(frames, s["rows"])]
        summary = ("mean", s["J"], s["F"], s["JF"])
        print(f"J_m {s['J']:.4f}  F_m {s['F']:.4f}  J&F_m {s['JF']:.4f}")
    else:
        def kp_file(d):
            return d if d.is_file() else d / "keypoints.txt"
        pred, gt = read_keypoints(kp_file(pred_dir)), read_keypoints(kp_file(gt_dir))
        if len(pred) < len(gt):
            raise DataError(f"prediction is missing frames {list(range(len(pred), len(gt)))}")
        s = keypoint_scores(pred[:len(gt)], gt)
        header = ("frame", "PCK@0.1", "PCK@0.2")
        rows_out = [(t, *r) for t, r in enumerate(s["rows"])]
        summary = ("mean", s["PCK@0.1"], s["PCK@0.2"])
        print(f"PCK@0.1 {s['PCK@0.1']:.4f}  PCK@0.2 {s['PCK@0.2']:.4f}")
    if args.report:
        with open(args.report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows_out + [summary]:
                w.writerow([v if isinstance(v, (int, str)) else f"{v:.6f}" for v in row])
    return 0


def cmd_synth(args) -> int:
    rng = np.random.default_rng(args.seed)
    out = Path(args.out)
    for v in range(args.videos):
        spec = random_scene(rng, frame_size=(args.size, args.size), n_frames=args.frames,
                            n_sprites=(1, args.max_sprites), max_speed=args.max_speed)
        video = generate_synthetic_video(spec, seed=int(rng.integers(2**31)))
        write_video_dir(out / f"video{v:03d}", video.frames, video.masks, video.keypoints)
    print(f"wrote {args.videos} videos to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verify import composed_graph_checks
    failed = False
    for name in sorted(REGISTRY):
        rep = check_op(name, cases=args.cases, seed=args.seed or 0, tol=args.tol, raise_on_fail=False)
        _, err, idx = rep.worst
        failed |= not rep.passed
        print(f"{name:16s} max rel. err {err:.3e}  {'ok' if rep.passed else f'FAIL at index {idx}'}")
    for name, rep in composed_graph_checks(tol=args.tol, seed=args.seed or 0):
        key, err, idx = rep.worst
        failed |= not rep.passed
        print(f"{name:16s} max rel. err {err:.3e}  {'ok' if rep.passed else f'FAIL at {key}[{idx}]'}")
    if failed:
        raise NumericError("gradient check failed")
    return 0


def cmd_dump_heatmap(args) -> int:
    model = trainmod.load_model(args.ckpt)
    video = read_video_dir(args.video)
    feats = video_features(model.pair, video.frames)
    i, j = (int(v) for v in args.cell.split(","))
    if not (0 <= args.target_frame < len(feats) and 0 <= args.source_frame < len(feats)):
        raise DataError(f"frame index outside video of {len(feats)} frames")
    img = dump_affinity_heatmap(feats, (i, j), args.target_frame, args.out, source_frame=args.source_frame)
    print(f"wrote {img.shape[1]}x{img.shape[0]} heatmap to {args.out}")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (INI sections)")
    common.add_argument("--seed", type=int, help="sets every seed")
    common.add_argument("--grad-check", action="store_true",
                        help="finite-difference check of one step at 64-bit before training")
    common.add_argument("--log-level", default="WARNING")

    parser = argparse.ArgumentParser(prog="sfcorr", description="Self-supervised correspondence toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    all_sections = ("backbone", "heads", "loss", "optimizer", "augmentation", "seeds")
    for kind in trainmod.KINDS:
        p = sub.add_parser(f"train-{kind}", parents=[common], help=f"train the {kind} model")
        p.add_argument("--data", required=True, help="dataset directory of videoNNN folders")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--progress", type=int, default=0, help="log every N steps")
        _add_config_flags(p, all_sections)
        p.set_defaults(func=_train(kind))

    p = sub.add_parser("propagate", parents=[common], help="propagate first-frame labels through a video")
    p.add_argument("--fine", help="fine-grained checkpoint")
    p.add_argument("--semantic", help="semantic checkpoint (enables fusion)")
    p.add_argument("--video", required=True)
    p.add_argument("--first-labels", help="PGM label image for frame 0 (default: video/labels/frame00000.pgm)")
    p.add_argument("--first-keypoints", help="keypoints.txt for frame 0 (keypoint mode)")
    p.add_argument("--mode", choices=("seg", "kp"), default="seg")
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap", metavar="I,J", help="also dump per-frame affinity heatmaps for this frame-0 cell")
    p.add_argument("--allow-mismatch", action="store_true")
    _add_config_flags(p, ("backbone", "heads", "propagation"))
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--metric", choices=("jf", "pck"), default="jf")
    p.add_argument("--report", help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic sprite dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=24)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--max-sprites", type=int, default=3)
    p.add_argument("--max-speed", type=float, default=1.5)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference suite over every op")
    p.add_argument("--cases", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-heatmap", parents=[common], help="affinity heatmap of one cell")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--cell", required=True, metavar="I,J")
    p.add_argument("--target-frame", type=int, required=True)
    p.add_argument("--source-frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dump_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SFCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
