"""Command line entry point: ``vln3d <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline as P
from .agent import StageConfig
from .errors import ConfigurationError
from .navsim import metrics_csv, random_baseline

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3


def _config(args) -> P.PipelineConfig:
    cfg = P.PipelineConfig.load(args.config) if args.config and args.command != "nav-train" else P.PipelineConfig()
    return replace(cfg, **_overrides(args))


def _overrides(args) -> dict:
    keys = {"seed": "seed", "preset": "preset", "threads": "threads", "train_scenes": "train_scenes", "val_scenes": "val_scenes"}
    return {k: getattr(args, a) for k, a in keys.items() if getattr(args, a) is not None}


def cmd_gen_scenes(args, cfg, run):
    paths = P.gen_scenes(run, cfg)
    print(f"wrote {len(paths)} scenes to {run.root / 'scenes'}")


def cmd_voxelize(args, cfg, run):
    paths = P.voxelize_scenes(run, cfg)
    print(f"wrote {len(paths)} grids to {run.root / 'grids'}")


def cmd_pretext_train(args, cfg, run):
    if args.epochs is not None:
        cfg = replace(cfg, pretext=replace(cfg.pretext, epochs=args.epochs))
    P.pretext_train(run, cfg)
    print((run.root / "pretext" / "metrics.csv").read_text(), end="")


def cmd_pretext_eval(args, cfg, run):
    print(f"val_acc,{P.pretext_eval(run, cfg):.6f}")


def cmd_make_episodes(args, cfg, run):
    for p in P.make_episodes(run, cfg):
        print(p)


def _encoder(args, cfg, run):
    path = Path(args.encoder) if getattr(args, "encoder", None) else run.root / "pretext" / "encoder.ckpt"
    return P.load_encoder(path, cfg)


def cmd_nav_train(args, cfg, run):
    stage = StageConfig.load(args.config) if args.config else (cfg.stage_b if args.stage == "B" else cfg.stage_c)
    if stage.stage != args.stage:
        stage = replace(stage, stage=args.stage)
    enc = _encoder(args, cfg, run)
    data = P.load_nav_data(run, cfg, enc)
    if args.stage == "B":
        paths = P.nav_train_b(run, cfg, data, stage)
    else:
        paths = P.nav_train_c(run, cfg, data, args.row, stage)
    for p in paths:
        print(p)


def cmd_distill(args, cfg, run):
    enc = _encoder(args, cfg, run)
    data = P.load_nav_data(run, cfg, enc)
    paths = P.distill(run, cfg, data, enc)
    if args.out:
        Path(args.out).write_bytes(paths[0].read_bytes())
    print(paths[1].read_text())


def cmd_nav_eval(args, cfg, run):
    enc = _encoder(args, cfg, run)
    data = P.load_nav_data(run, cfg, enc)
    splits = [args.split] if args.split else list(P.SPLITS)
    if args.model == "random":
        rows = {s: random_baseline(data.envs, data.episodes[s], cfg.seed, max_steps=args.max_steps) for s in splits}
        p = run.path("eval", "random.csv")
        p.write_text(metrics_csv(rows))
    else:
        model = Path(args.model)
        p = P.nav_eval(run, cfg, data, model, model.stem, splits, args.max_steps)
    print(p.read_text(), end="")


def cmd_report(args, cfg, run):
    table, stages = P.report(run.root)
    print(table.read_text(), end="")
    print(stages.read_text())


def cmd_run_pipeline(args, cfg, run):
    manifest = P.run_pipeline(args.config, run.root, _overrides(args))
    print(json.dumps({k: manifest[k] for k in ("config_hash", "wall_clock_s", "version")}, indent=1))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="root seed (default from config, else 0)")
    common.add_argument("--preset", choices=["desk", "paper"], help="size preset (default desk)")
    common.add_argument("--out-dir", default="run")
    common.add_argument("--threads", type=int)
    common.add_argument("--config", help="pipeline config (JSON); for nav-train, a stage config")
    common.add_argument("--train-scenes", type=int, help="pretext train scene count")
    common.add_argument("--val-scenes", type=int, help="pretext val scene count")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="vln3d", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common], help="generate procedural rooms").set_defaults(func=cmd_gen_scenes)
    sub.add_parser("voxelize", parents=[common], help="render and voxelize the scenes").set_defaults(func=cmd_voxelize)
    p = sub.add_parser("pretext-train", parents=[common], help="region-query pretraining")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_pretext_train)
    sub.add_parser("pretext-eval", parents=[common], help="validation accuracy").set_defaults(func=cmd_pretext_eval)
    sub.add_parser("make-episodes", parents=[common], help="layouts and episodes").set_defaults(func=cmd_make_episodes)
    p = sub.add_parser("nav-train", parents=[common], help="train the agent (stage B or C)")
    p.add_argument("--stage", choices=["B", "C"], required=True)
    p.add_argument("--row", choices=list(P.ROWS), default="3D+RGB-distilled", help="ablation row for stage C")
    p.add_argument("--encoder")
    p.set_defaults(func=cmd_nav_train)
    p = sub.add_parser("distill", parents=[common], help="initialise the colour branch from the 3D encoder")
    p.add_argument("--encoder")
    p.add_argument("--scenes", help="unused; observations come from the run's episode layouts")
    p.add_argument("--out")
    p.set_defaults(func=cmd_distill)
    p = sub.add_parser("nav-eval", parents=[common], help="greedy evaluation")
    p.add_argument("--model", required=True, help="agent checkpoint, or 'random'")
    p.add_argument("--split", choices=list(P.SPLITS))
    p.add_argument("--max-steps", type=int, choices=[15, 30], default=15)
    p.add_argument("--encoder")
    p.set_defaults(func=cmd_nav_eval)
    sub.add_parser("report", parents=[common], help="ablation table and stage series").set_defaults(func=cmd_report)
    sub.add_parser("run-pipeline", parents=[common], help="every stage end to end").set_defaults(func=cmd_run_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        run = P.RunDir(args.out_dir)
        args.func(args, cfg, run)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except P.StageFailure as e:
        print(str(e), file=sys.stderr)
        return EXIT_STAGE
    except Exception as e:  # any other failure inside a stage
        print(f"stage {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
