"""Experiment configuration: one YAML file with per-stage sections.

Every section is validated up front, before any stage runs, and the resolved
config (defaults filled in) is echoed into each artifact so a run can be
replayed exactly.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import MfccConfig
from .defense import DefenseConfig

DEFENSE_METHODS = ("gnft", "ft", "fp")


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


def _require(cond: bool, where: str, msg: str):
    if not cond:
        raise ConfigError(f"{where}: {msg}")


def _take(d: dict, where: str, allowed: dict) -> dict:
    """Fill defaults and reject unknown keys. allowed maps key -> default."""
    d = dict(d or {})
    unknown = set(d) - set(allowed)
    _require(not unknown, where, f"unknown key(s) {sorted(unknown)}")
    out = copy.deepcopy(allowed)
    out.update(d)
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    output_dir: str
    corpus: dict
    attack: dict
    train: dict
    defense: dict
    eval: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "output_dir": self.output_dir,
            "corpus": copy.deepcopy(self.corpus),
            "attack": copy.deepcopy(self.attack),
            "train": copy.deepcopy(self.train),
            "defense": copy.deepcopy(self.defense),
            "eval": copy.deepcopy(self.eval),
            "analysis": copy.deepcopy(self.analysis),
        }

    @property
    def mfcc(self) -> MfccConfig:
        return MfccConfig(**self.corpus["mfcc"])

    def defense_config(self) -> DefenseConfig:
        d = self.defense
        return DefenseConfig(r=d["r"], alpha=d["alpha"], iterations=d["iterations"],
                             lr=d["lr"], batch_size=d["batch_size"], seed=d["seed"])


def default_config_dict() -> dict:
    """The shipped desk-scale experiment: synthetic 10-class corpus, block trigger."""
    return {
        "output_dir": "runs/default",
        "corpus": {
            "source": "synthetic",
            "root": None,
            "n_classes": 10,
            "n_per_class": 50,
            "sample_rate": 16000,
            "duration": 1.0,
            "seed": 7,
            "test_frac": 0.2,
            "clean_ratio": 0.05,
            "mfcc": {"n_mfcc": 40, "frame_len": 400, "hop": 160, "n_frames": 32},
        },
        "attack": {
            "trigger": {
                "kind": "spec_block",
                "params": {"row_offset": None, "col_offset": None,
                           "height": 4, "width": 4, "value": None},
            },
            "poison_ratio": 0.10,
            "target_label": "class0",
            "seed": 11,
        },
        "train": {
            "arch": "small_cnn",
            "epochs": 30,
            "lr": 0.05,
            "batch_size": 32,
            "seed": 3,
        },
        "defense": {
            "method": "gnft",
            "r": 0.05,
            "alpha": 0.7,
            "iterations": 400,
            "lr": 0.02,
            "batch_size": 10,
            "seed": 5,
            "prune_fraction": 0.2,
        },
        "eval": {"embeddings": True},
        "analysis": {"layers": "last_two", "profile_samples": 50},
    }


def validate_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping, fill defaults, return the resolved config."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    defaults = default_config_dict()
    top = _take(raw, "config", defaults)

    _require(isinstance(top["output_dir"], str) and top["output_dir"],
             "output_dir", "must be a nonempty path string")

    c = _take(top["corpus"], "corpus", defaults["corpus"])
    _require(c["source"] in ("synthetic", "directory"), "corpus.source",
             f"must be 'synthetic' or 'directory', got {c['source']!r}")
    if c["source"] == "directory":
        _require(bool(c["root"]), "corpus.root", "required for directory corpora")
    _require(int(c["n_classes"]) >= 2, "corpus.n_classes", "must be >= 2")
    _require(int(c["n_per_class"]) >= 1, "corpus.n_per_class", "must be >= 1")
    _require(float(c["duration"]) > 0, "corpus.duration", "must be positive")
    _require(0.0 < float(c["test_frac"]) < 1.0, "corpus.test_frac", "must be in (0, 1)")
    _require(0.0 < float(c["clean_ratio"]) <= 1.0, "corpus.clean_ratio", "must be in (0, 1]")
    m = _take(c["mfcc"], "corpus.mfcc", defaults["corpus"]["mfcc"])
    try:
        MfccConfig(**m)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"corpus.mfcc: {exc}") from None
    c["mfcc"] = m

    a = _take(top["attack"], "attack", defaults["attack"])
    trig = dict(a["trigger"] or {})
    extra = set(trig) - {"kind", "params"}
    _require(not extra, "attack.trigger", f"unknown key(s) {sorted(extra)}")
    kind = trig.get("kind", "spec_block")
    param_defaults = {
        "spec_block": {"row_offset": None, "col_offset": None,
                       "height": 4, "width": 4, "value": None},
        "tone_overlay": {"freq": 6000.0, "amplitude": 0.1},
        "gain_echo": {"delay": 0.1, "decay": 0.3},
    }
    _require(kind in param_defaults, "attack.trigger.kind",
             f"unknown trigger kind {kind!r}")
    p = _take(trig.get("params"), "attack.trigger.params", param_defaults[kind])
    if kind == "spec_block":
        _require(int(p["height"]) >= 1 and int(p["width"]) >= 1,
                 "attack.trigger.params", "block must be at least 1x1")
    a["trigger"] = {"kind": kind, "params": p}
    _require(0.0 <= float(a["poison_ratio"]) <= 1.0, "attack.poison_ratio",
             "must be in [0, 1]")
    _require(isinstance(a["target_label"], str) and a["target_label"],
             "attack.target_label", "must be a nonempty class name")

    t = _take(top["train"], "train", defaults["train"])
    _require(t["arch"] in ("small_cnn", "mlp"), "train.arch",
             f"must be 'small_cnn' or 'mlp', got {t['arch']!r}")
    _require(int(t["epochs"]) >= 0, "train.epochs", "must be nonnegative")
    _require(float(t["lr"]) > 0, "train.lr", "must be positive")
    _require(int(t["batch_size"]) >= 1, "train.batch_size", "must be >= 1")

    d = _take(top["defense"], "defense", defaults["defense"])
    _require(d["method"] in DEFENSE_METHODS, "defense.method",
             f"must be one of {DEFENSE_METHODS}, got {d['method']!r}")
    try:
        DefenseConfig(r=float(d["r"]), alpha=float(d["alpha"]), iterations=int(d["iterations"]),
                      lr=float(d["lr"]), batch_size=int(d["batch_size"]), seed=int(d["seed"]))
    except ValueError as exc:
        raise ConfigError(f"defense: {exc}") from None
    _require(0.0 <= float(d["prune_fraction"]) < 1.0, "defense.prune_fraction",
             "must be in [0, 1)")

    e = _take(top["eval"], "eval", defaults["eval"])
    an = _take(top["analysis"], "analysis", defaults["analysis"])
    _require(an["layers"] in ("last_two", "all"), "analysis.layers",
             "must be 'last_two' or 'all'")
    _require(int(an["profile_samples"]) >= 1, "analysis.profile_samples", "must be >= 1")

    return ExperimentConfig(output_dir=top["output_dir"], corpus=c, attack=a,
                            train=t, defense=d, eval=e, analysis=an)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return validate_config(raw or {})


def section_key(*parts) -> str:
    """Content hash used for stage caching: stable over dict ordering."""
    blob = json.dumps(parts, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()
