"""Command-line entry points for the workbench.

Subcommands: run, poison, train, defend, eval, analyze, sweep. Each stage is
individually invocable; stages are cached, so invoking a late stage builds (or
reuses) everything upstream. Exit codes: 0 success, 1 validation error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import sys
import traceback
from pathlib import Path

from . import pipeline
from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .model import checkpoint_load

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

SWEEP_AXES = ("clean_ratio", "alpha", "r")


def _outdir(cfg: ExperimentConfig, override: str | None) -> Path:
    out = Path(override if override else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(cfg: ExperimentConfig, outdir: Path) -> int:
    report = pipeline.run_experiment(cfg, outdir)
    print(f"attack={report.attack['kind']} defense={report.defense['method']}")
    print(f"pre : CA {report.pre.ca:.2f}%  ASR {report.pre.asr:.2f}%")
    print(f"post: CA {report.post.ca:.2f}%  ASR {report.post.asr:.2f}%")
    print(f"artifacts in {outdir}")
    return EXIT_OK


def cmd_stage(cfg: ExperimentConfig, outdir: Path, stage: str) -> int:
    split = pipeline.stage_corpus(cfg, outdir)
    if stage == "corpus":
        print(f"corpus: {len(split.train)} train / {len(split.test)} test / "
              f"{len(split.clean_defense)} clean-defense -> {outdir / pipeline.MANIFEST}")
        return EXIT_OK
    poisoned, plan = pipeline.stage_poison(cfg, split, outdir)
    if stage == "poison":
        print(f"poisoned {len(plan.poisoned_ids)} of {len(split.train)} train samples "
              f"toward {plan.target_label!r} -> {outdir / pipeline.PLAN}")
        return EXIT_OK
    model_pre = pipeline.stage_train(cfg, split, poisoned, outdir)
    if stage == "train":
        print(f"trained {model_pre.arch} -> {outdir / pipeline.MODEL_PRE}")
        return EXIT_OK
    model_post = pipeline.stage_defend(cfg, model_pre, split, outdir)
    if stage == "defend":
        print(f"repaired with {cfg.defense['method']} -> {outdir / pipeline.MODEL_POST}")
        return EXIT_OK
    report = pipeline.stage_eval(cfg, model_pre, model_post, split, plan, poisoned, outdir)
    print(f"pre : CA {report.pre.ca:.2f}%  ASR {report.pre.asr:.2f}%")
    print(f"post: CA {report.post.ca:.2f}%  ASR {report.post.asr:.2f}%")
    return EXIT_OK


def cmd_analyze(cfg: ExperimentConfig, outdir: Path, checkpoint: str, tag: str) -> int:
    ckpt = Path(checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = checkpoint_load(ckpt)
    split = pipeline.stage_corpus(cfg, outdir)
    plan_path = outdir / pipeline.PLAN
    if plan_path.exists():
        from .poisoning import load_plan
        trigger = load_plan(plan_path).trigger
    else:
        from . import corpus as corpus_mod
        mfcc = cfg.mfcc
        clean_train = corpus_mod.featurize(split.train, mfcc)
        trigger = pipeline.resolve_trigger(cfg.attack, (mfcc.n_mfcc, mfcc.n_frames),
                                           clean_train)
    summary, _ = pipeline.analyze_model(cfg, model, split, trigger, outdir, tag)
    counts = " ".join(f"{z}={summary.counts[z]}" for z in ("C", "B", "H", "R"))
    print(f"zones[{tag}]: {counts} (n={summary.n_neurons}) -> "
          f"{outdir / f'zones_{tag}.csv'}")
    return EXIT_OK


def _apply_sweep_value(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    raw = cfg.to_dict()
    if axis == "clean_ratio":
        raw["corpus"]["clean_ratio"] = value
    else:
        raw["defense"][axis] = value
    return validate_config(raw)


def cmd_sweep(cfg: ExperimentConfig, outdir: Path, axis: str, values: list[float]) -> int:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    rows = []
    for value in values:
        point_dir = outdir / f"sweep_{axis}_{value:g}"
        try:
            point_cfg = _apply_sweep_value(cfg, axis, value)
            report = pipeline.run_experiment(point_cfg, point_dir)
            rows.append({"axis": axis, "value": value, "error": "",
                         "pre_asr": f"{report.pre.asr:.2f}", "post_asr": f"{report.post.asr:.2f}",
                         "pre_ca": f"{report.pre.ca:.2f}", "post_ca": f"{report.post.ca:.2f}"})
            print(f"{axis}={value:g}: post CA {report.post.ca:.2f}% "
                  f"ASR {report.post.asr:.2f}%")
        except (ConfigError, ValueError) as exc:
            rows.append({"axis": axis, "value": value, "error": str(exc),
                         "pre_asr": "", "post_asr": "", "pre_ca": "", "post_ca": ""})
            print(f"{axis}={value:g}: skipped ({exc})", file=sys.stderr)
    sweep_path = outdir / f"sweep_{axis}.csv"
    with sweep_path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["axis", "value", "pre_asr", "post_asr",
                                                "pre_ca", "post_ca", "error"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"sweep table -> {sweep_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kwsbench",
        description="Train, backdoor, diagnose, and repair small keyword classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--output-dir", default=None, help="override config output_dir")

    for name, help_text in [
        ("run", "run every stage end to end"),
        ("poison", "build the corpus and the poison plan"),
        ("train", "train the backdoored model (plus upstream stages)"),
        ("defend", "repair the trained model (plus upstream stages)"),
        ("eval", "evaluate pre/post models and write reports"),
    ]:
        p = sub.add_parser(name, help=help_text)
        add_common(p)

    p = sub.add_parser("analyze", help="zone and gradient-profile CSVs for a checkpoint")
    add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint (.npz)")
    p.add_argument("--tag", default="pre", help="suffix for the emitted CSVs")

    p = sub.add_parser("sweep", help="rerun the experiment across one axis")
    add_common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, nargs="+", type=float)

    p = sub.add_parser("corpus", help="build the corpus manifest only")
    add_common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.output_dir:
            cfg = validate_config({**cfg.to_dict(), "output_dir": args.output_dir})
        outdir = _outdir(cfg, None)

        if args.command == "run":
            return cmd_run(cfg, outdir)
        if args.command in ("corpus", "poison", "train", "defend", "eval"):
            return cmd_stage(cfg, outdir, args.command)
        if args.command == "analyze":
            return cmd_analyze(cfg, outdir, args.checkpoint, args.tag)
        if args.command == "sweep":
            return cmd_sweep(cfg, outdir, args.axis, args.values)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # runtime failure; earlier artifacts stay on disk
        print(f"error: {exc}", file=sys.stderr)
        traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
