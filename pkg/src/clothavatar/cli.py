"""Command-line surface: gen-data, segment, train, evaluate, animate, transfer, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("clothavatar")

OUT_ENV = "CLOTHAVATAR_OUT"


def out_root(arg: str | None) -> Path:
    return Path(arg or os.environ.get(OUT_ENV, "runs"))


def _subject_path(data_root: str | Path, subject) -> Path:
    p = Path(str(subject))
    if p.is_dir():
        return p
    from .studio import subject_dir
    return subject_dir(data_root, int(subject))


def _load_subject_data(data_root, subject, cfg):
    from .parts import load_labels
    from .studio import load_dataset
    from .train import prepare_subject
    path = _subject_path(data_root, subject)
    asset, seq = load_dataset(path)
    labels = None
    if cfg.label_source == "segment" and (path / "labels.json").exists():
        labels = load_labels(path / "labels.json")
    return prepare_subject(path.name, asset, seq, cfg, labels)


def cmd_gen_data(args) -> int:
    from .studio import default_camera, generate_sequence, generate_subject, write_dataset
    root = out_root(args.out)
    for seed in args.seeds:
        subject = generate_subject(seed)
        cam = default_camera(args.resolution, args.resolution, args.azimuth)
        seq = generate_sequence(subject, args.motion, args.fps, args.duration, cam)
        d = write_dataset(root, subject, seq, args.noise, seed)
        print(f"wrote {d} ({len(seq)} frames)")
    return 0


def cmd_segment(args) -> int:
    from .parts import PART_NAMES, save_labels
    from .studio import load_dataset
    from .train import segment_subject
    path = Path(args.subject)
    asset, seq = load_dataset(path)
    labels, info = segment_subject(asset, seq, views=args.views, seed=args.seed)
    out = Path(args.output) if args.output else path / "labels.json"
    save_labels(labels, out)
    counts = {PART_NAMES[k]: int((labels.labels == k).sum()) for k in range(len(PART_NAMES))}
    gt_cloth = asset.gt_labels == 2
    recall = float((labels.labels[gt_cloth] == 2).mean()) if gt_cloth.any() else float("nan")
    print(json.dumps({"labels": str(out), "counts": counts, "cloth_recall": recall}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .train import Checkpoint, load_config, stage2_trainer, Trainer
    overrides = list(args.set or [])
    overrides.append(f"stage={args.stage}")
    cfg = load_config(args.config, overrides)
    run = out_root(args.out)
    run.mkdir(parents=True, exist_ok=True)
    from dataclasses import replace
    cfg = replace(cfg, log_path=str(run / "train_log.csv"))
    subjects = [_load_subject_data(args.data, s, cfg) for s in cfg.subjects]
    if args.resume:
        trainer = Checkpoint.load(args.resume).restore(subjects, cfg)
        steps = max(0, cfg.steps - trainer.step)
    elif cfg.stage == 1:
        trainer = Trainer(cfg, subjects)
        steps = cfg.steps
    else:
        init = args.init or cfg.init_checkpoint
        trainer = stage2_trainer(Checkpoint.load(init) if init else None, subjects[0], cfg)
        steps = cfg.steps
    trainer.run(steps)
    ck = run / "checkpoint.bin"
    trainer.checkpoint().save(ck)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    last = trainer.history[-1]["total"] if trainer.history else float("nan")
    print(f"step {trainer.step} loss {last:.6f} -> {ck}")
    return 0


def cmd_evaluate(args) -> int:
    from .train import Checkpoint, evaluate, write_metrics
    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.config
    data = _load_subject_data(args.data, args.subject, cfg)
    model = ck.build_model()
    if data.name not in model.latents:
        raise SystemExit(f"checkpoint has no latent code for {data.name}")
    frames = {"holdout": data.holdout_frames(cfg), "train": data.train_frames(cfg),
              "all": np.arange(len(data.sequence))}[args.frames]
    metrics = evaluate(model, data, frames, cfg)
    out = out_root(args.out)
    write_metrics(metrics, out / "metrics.json", out / "metrics.csv")
    print(json.dumps(metrics["mean"], sort_keys=True))
    return 0


def cmd_animate(args) -> int:
    from .studio import MotionSpec, default_camera, pose_track
    from .train import Checkpoint, animate
    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.config
    data = _load_subject_data(args.data, args.subject, cfg)
    model = ck.build_model()
    poses = pose_track(MotionSpec(args.motion, speed=args.speed), args.fps, args.duration, data.mesh.joint_names)
    cam = default_camera(cfg.resolution, cfg.resolution, args.azimuth)
    frames = animate(model, data, poses, cam, cfg, out_root(args.out), args.part)
    print(f"wrote {len(frames)} frames to {out_root(args.out)}")
    return 0


def cmd_transfer(args) -> int:
    from .parts import transfer_clothing
    from .studio import MotionSpec, default_camera, pose_track
    from .train import Checkpoint, animate_avatar, decomposed_avatar
    ck = Checkpoint.load(args.checkpoint)
    cfg = ck.config
    model = ck.build_model()
    src = _load_subject_data(args.data, args.source, cfg)
    dst = _load_subject_data(args.data, args.target, cfg)
    moved = transfer_clothing(decomposed_avatar(model, src), decomposed_avatar(model, dst))
    poses = pose_track(MotionSpec(args.motion), args.fps, args.duration, dst.mesh.joint_names)
    cam = default_camera(cfg.resolution, cfg.resolution, args.azimuth)
    frames = animate_avatar(moved, model.closim if cfg.use_closim else None, poses, cam, cfg.delta_t,
                            out_root(args.out))
    print(f"wrote {len(frames)} frames to {out_root(args.out)}")
    return 0


def cmd_gradcheck(args) -> int:
    from .diffcheck import run_registry
    reports, ok = run_registry(args.ops or None)
    for r in reports:
        print(r.line())
        for w in r.worst[:3]:
            print(f"    {w[0]}[{w[1]}] analytic={w[2]:.6e} numeric={w[3]:.6e} rel={w[4]:.2e}")
    print("gradcheck", "OK" if ok else "FAILED")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clothavatar", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic subjects and sequences")
    g.add_argument("--seeds", type=int, nargs="+", default=[1])
    g.add_argument("--motion", default="walk")
    g.add_argument("--fps", type=float, default=30.0)
    g.add_argument("--duration", type=float, default=20.0)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--azimuth", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("segment", help="label Gaussians from segmentation maps")
    s.add_argument("subject", help="subject dataset directory")
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output")
    s.set_defaults(func=cmd_segment)

    t = sub.add_parser("train", help="stage-1 or stage-2 training")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--config")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.add_argument("--data", default="data")
    t.add_argument("--init", help="stage-1 checkpoint for stage 2")
    t.add_argument("--resume", help="continue from a checkpoint of this run")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="metrics on a frame set")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="data")
    e.add_argument("--subject", required=True)
    e.add_argument("--frames", choices=("holdout", "train", "all"), default="holdout")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("animate", help="render a pose track")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", default="data")
    a.add_argument("--subject", required=True)
    a.add_argument("--motion", default="walk")
    a.add_argument("--speed", type=float, default=1.0)
    a.add_argument("--fps", type=float, default=30.0)
    a.add_argument("--duration", type=float, default=2.0)
    a.add_argument("--azimuth", type=float, default=0.0)
    a.add_argument("--part", choices=("face", "hands", "cloth", "body"))
    a.add_argument("--out")
    a.set_defaults(func=cmd_animate)

    x = sub.add_parser("transfer", help="move clothing between two avatars and animate the result")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", default="data")
    x.add_argument("--source", required=True)
    x.add_argument("--target", required=True)
    x.add_argument("--motion", default="walk")
    x.add_argument("--fps", type=float, default=30.0)
    x.add_argument("--duration", type=float, default=2.0)
    x.add_argument("--azimuth", type=float, default=0.0)
    x.add_argument("--out")
    x.set_defaults(func=cmd_transfer)

    c = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    c.add_argument("ops", nargs="*")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    torch.set_num_threads(1)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
