"""Experiment pipeline: corpus -> poison -> train -> analyze -> defend -> eval.

Each stage writes its artifact under the experiment output directory together
with a sidecar stage key (a content hash of its config section plus all
upstream stage keys). A stage is skipped when its artifact exists and the key
matches, so deleting a downstream artifact and rerunning rebuilds exactly that
stage from the cached upstream ones.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import defense as defense_mod
from . import evalkit, neuronlab, poisoning
from .config import ExperimentConfig, section_key
from .corpus import DatasetSplit, MfccConfig
from .model import ModelHandle, batch_from_features, build_reference_model, checkpoint_load, \
    checkpoint_save, train
from .poisoning import PoisonPlan, TriggerSpec

MANIFEST = "manifest.jsonl"
PLAN = "poison_plan.json"
MODEL_PRE = "model_backdoored.npz"
MODEL_POST = "model_repaired.npz"
TRAIN_LOG = "train_log.csv"
TRACE = "defense_trace.csv"
REPORT_CSV = "report.csv"
REPORT_JSON = "report.json"


def _key_path(artifact: Path) -> Path:
    return artifact.with_name(artifact.name + ".stagekey")


def _is_cached(artifact: Path, key: str) -> bool:
    kp = _key_path(artifact)
    return artifact.exists() and kp.exists() and kp.read_text(encoding="utf-8").strip() == key


def _mark(artifact: Path, key: str) -> None:
    _key_path(artifact).write_text(key + "\n", encoding="utf-8")


def resolve_trigger(attack_cfg: dict, feature_shape: tuple[int, int],
                    clean_train_features) -> TriggerSpec:
    """Fill the auto fields of the configured trigger.

    For spec_block, a missing offset pins the block to the high-coefficient /
    late-time corner and a missing value becomes the dataset's max absolute
    coefficient, measured on the clean train features.
    """
    kind = attack_cfg["trigger"]["kind"]
    params = dict(attack_cfg["trigger"]["params"])
    if kind == "spec_block":
        n_mfcc, n_frames = feature_shape
        h, w = int(params["height"]), int(params["width"])
        if params.get("row_offset") is None:
            params["row_offset"] = n_mfcc - h
        if params.get("col_offset") is None:
            params["col_offset"] = n_frames - w
        if params.get("value") is None:
            params["value"] = poisoning.block_value_from_features(list(clean_train_features))
        params = {k: (int(v) if k != "value" else float(v)) for k, v in params.items()}
    return TriggerSpec(kind, params)


def stage_corpus(cfg: ExperimentConfig, outdir: Path) -> DatasetSplit:
    c = cfg.corpus
    key = section_key("corpus", c)
    manifest = outdir / MANIFEST
    if _is_cached(manifest, key):
        return corpus_mod.load_manifest(manifest)
    if c["source"] == "synthetic":
        samples = corpus_mod.generate_synthetic_corpus(
            int(c["n_classes"]), int(c["n_per_class"]), int(c["seed"]),
            int(c["sample_rate"]), float(c["duration"]))
    else:
        samples = corpus_mod.load_directory_corpus(c["root"])
    split = corpus_mod.make_splits(samples, float(c["test_frac"]),
                                   float(c["clean_ratio"]), int(c["seed"]))
    corpus_mod.save_manifest(split, manifest)
    _mark(manifest, key)
    return split


def _corpus_key(cfg: ExperimentConfig) -> str:
    return section_key("corpus", cfg.corpus)


def _poison_key(cfg: ExperimentConfig) -> str:
    return section_key("poison", _corpus_key(cfg), cfg.attack)


def _train_key(cfg: ExperimentConfig) -> str:
    return section_key("train", _poison_key(cfg), cfg.train)


def _defend_key(cfg: ExperimentConfig) -> str:
    return section_key("defend", _train_key(cfg), cfg.defense)


def stage_poison(cfg: ExperimentConfig, split: DatasetSplit, outdir: Path):
    """Poisoned train features plus the replayable plan (cached by plan file)."""
    mfcc = cfg.mfcc
    key = _poison_key(cfg)
    plan_path = outdir / PLAN
    if _is_cached(plan_path, key):
        plan = poisoning.load_plan(plan_path)
        return poisoning.replay_plan(split, plan, mfcc), plan

    clean_train = corpus_mod.featurize(split.train, mfcc)
    trigger = resolve_trigger(cfg.attack, (mfcc.n_mfcc, mfcc.n_frames), clean_train)
    features, plan = poisoning.poison_dataset(
        split, trigger, float(cfg.attack["poison_ratio"]),
        cfg.attack["target_label"], int(cfg.attack["seed"]), mfcc)
    poisoning.save_plan(plan, plan_path)
    _mark(plan_path, key)
    return features, plan


def stage_train(cfg: ExperimentConfig, split: DatasetSplit, poisoned_features,
                outdir: Path) -> ModelHandle:
    key = _train_key(cfg)
    ckpt = outdir / MODEL_PRE
    if _is_cached(ckpt, key):
        return checkpoint_load(ckpt)
    t = cfg.train
    mfcc = cfg.mfcc
    model = build_reference_model(t["arch"], (mfcc.n_mfcc, mfcc.n_frames),
                                  len(split.classes), int(t["seed"]), classes=split.classes)
    model, log = train(model, poisoned_features, int(t["epochs"]), float(t["lr"]),
                       int(t["batch_size"]), int(t["seed"]))
    with (outdir / TRAIN_LOG).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(log):
            writer.writerow([i, f"{loss:.17g}"])
    checkpoint_save(model, ckpt)
    _mark(ckpt, key)
    return model


def _analysis_layers(cfg: ExperimentConfig, model: ModelHandle) -> list[int]:
    if cfg.analysis["layers"] == "all":
        return list(range(len(model.conv_channels)))
    return model.last_conv_layers(2)


def analyze_model(cfg: ExperimentConfig, model: ModelHandle, split: DatasetSplit,
                  trigger: TriggerSpec, outdir: Path, tag: str):
    """Zone records and gradient profile for one model; writes the two CSVs."""
    if not model.conv_channels:
        raise ValueError(f"architecture {model.arch!r} has no conv neurons to analyze")
    mfcc = cfg.mfcc
    classes = model.classes
    target = cfg.attack["target_label"]
    if target not in classes:
        raise ValueError(f"target label {target!r} unknown to the model")

    clean = corpus_mod.featurize(split.clean_defense, mfcc)
    triggered = poisoning.trigger_features(split.clean_defense, trigger, mfcc)
    X, y = batch_from_features(clean, classes)
    Xb = np.stack([f.values for f in triggered])
    layers = _analysis_layers(cfg, model)

    summary, records = neuronlab.classify_zones(model, layers, X, y, Xb,
                                                classes.index(target))
    records, series = neuronlab.gradient_profile(
        model, X, y, records, max_samples=int(cfg.analysis["profile_samples"]))
    neuronlab.records_to_csv(records, outdir / f"zones_{tag}.csv")
    neuronlab.profile_to_csv(series, outdir / f"gradprofile_{tag}.csv")
    return summary, records


def stage_analyze(cfg: ExperimentConfig, model: ModelHandle, split: DatasetSplit,
                  trigger: TriggerSpec, outdir: Path, tag: str, upstream_key: str):
    key = section_key("analyze", upstream_key, cfg.analysis, trigger.to_dict())
    artifact = outdir / f"zones_{tag}.csv"
    if _is_cached(artifact, key):
        return None
    result = analyze_model(cfg, model, split, trigger, outdir, tag)
    _mark(artifact, key)
    return result


def stage_defend(cfg: ExperimentConfig, model_pre: ModelHandle, split: DatasetSplit,
                 outdir: Path) -> ModelHandle:
    """Repair a clone of the backdoored model with the configured method."""
    key = _defend_key(cfg)
    ckpt = outdir / MODEL_POST
    if _is_cached(ckpt, key):
        return checkpoint_load(ckpt)

    clean = corpus_mod.featurize(split.clean_defense, cfg.mfcc)
    dcfg = cfg.defense_config()
    method = cfg.defense["method"]
    repaired = model_pre.clone()
    if method == "gnft":
        repaired, trace = defense_mod.run_gnft(repaired, clean, dcfg)
        trace.to_csv(outdir / TRACE)
    elif method == "ft":
        repaired = defense_mod.run_vanilla_ft(repaired, clean, dcfg)
    else:  # fp
        repaired = defense_mod.run_fine_pruning(
            repaired, clean, float(cfg.defense["prune_fraction"]), dcfg)
    checkpoint_save(repaired, ckpt)
    _mark(ckpt, key)
    return repaired


def stage_eval(cfg: ExperimentConfig, model_pre: ModelHandle, model_post: ModelHandle,
               split: DatasetSplit, plan: PoisonPlan, poisoned_features, outdir: Path,
               runtime_s: float = 0.0) -> evalkit.ExperimentReport:
    mfcc = cfg.mfcc
    target = plan.target_label
    test_features = corpus_mod.featurize(split.test, mfcc)
    asr_set = poisoning.build_asr_eval_set(split.test, plan.trigger, target, mfcc)

    pre = evalkit.evaluate(model_pre, test_features, asr_set, target)
    post = evalkit.evaluate(model_post, test_features, asr_set, target)

    report = evalkit.ExperimentReport(
        attack={"kind": plan.trigger.kind, "params": dict(plan.trigger.params),
                "poison_ratio": plan.poison_ratio, "target_label": target},
        defense=dict(cfg.defense),
        pre=pre, post=post,
        config=cfg.to_dict(),
        seeds={"corpus": cfg.corpus["seed"], "attack": cfg.attack["seed"],
               "train": cfg.train["seed"], "defense": cfg.defense["seed"]},
        runtime_s=runtime_s,
    )
    evalkit.comparison_to_csv(evalkit.compare_runs([report]), outdir / REPORT_CSV)
    evalkit.report_to_json(report, outdir / REPORT_JSON)

    if cfg.eval.get("embeddings"):
        for tag, model in (("pre", model_pre), ("post", model_post)):
            rows = evalkit.export_embeddings(model, poisoned_features, plan.poisoned_ids)
            evalkit.embeddings_to_csv(rows, outdir / f"embeddings_{tag}.csv")
    return report


def run_experiment(cfg: ExperimentConfig, outdir: str | Path | None = None,
                   analyze: bool = True) -> evalkit.ExperimentReport:
    """Run every stage in order, reusing cached artifacts where keys match."""
    started = time.perf_counter()
    outdir = Path(outdir if outdir is not None else cfg.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)

    split = stage_corpus(cfg, outdir)
    poisoned, plan = stage_poison(cfg, split, outdir)
    model_pre = stage_train(cfg, split, poisoned, outdir)
    if analyze and model_pre.conv_channels:
        stage_analyze(cfg, model_pre, split, plan.trigger, outdir, "pre", _train_key(cfg))
    model_post = stage_defend(cfg, model_pre, split, outdir)
    if analyze and model_post.conv_channels:
        stage_analyze(cfg, model_post, split, plan.trigger, outdir, "post", _defend_key(cfg))
    runtime = time.perf_counter() - started
    return stage_eval(cfg, model_pre, model_post, split, plan, poisoned, outdir,
                      runtime_s=runtime)


def read_zone_counts(path: str | Path) -> dict[str, int]:
    """Zone counts from a zones CSV written by the analyze stage."""
    counts = {z: 0 for z in neuronlab.ZONES}
    with Path(path).open("r", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            counts[row["zone"]] += 1
    return counts
