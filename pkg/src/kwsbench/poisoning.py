"""Trigger functions and dataset poisoning.

Three trigger kinds share one interface: a constant-valued block painted into
the MFCC feature map (spec_block), plus two waveform-level stand-ins, an
additive sine tone (tone_overlay) and a decayed delayed copy (gain_echo).
Waveform triggers are applied before feature extraction, the block after.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import AudioSample, DatasetSplit, FeatureMap, MfccConfig, extract_mfcc

PLAN_FORMAT = "kwsbench-poison-plan"
PLAN_VERSION = 1

TRIGGER_KINDS = ("spec_block", "tone_overlay", "gain_echo")

_PARAM_NAMES = {
    "spec_block": ("row_offset", "col_offset", "height", "width", "value"),
    "tone_overlay": ("freq", "amplitude"),
    "gain_echo": ("delay", "decay"),
}


@dataclass(frozen=True)
class TriggerSpec:
    """A trigger kind plus its kind-specific parameters."""

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}; expected one of {TRIGGER_KINDS}")
        expected = set(_PARAM_NAMES[self.kind])
        got = set(self.params)
        if got != expected:
            raise ValueError(f"{self.kind} params must be {sorted(expected)}, got {sorted(got)}")
        p = self.params
        if self.kind == "spec_block":
            if p["height"] < 1 or p["width"] < 1:
                raise ValueError("spec_block region must be at least 1x1")
            if p["row_offset"] < 0 or p["col_offset"] < 0:
                raise ValueError("spec_block offsets must be nonnegative")
        elif self.kind == "tone_overlay":
            if not 0.0 <= p["amplitude"] <= 1.0:
                raise ValueError(f"tone amplitude must be in [0, 1], got {p['amplitude']}")
            if p["freq"] <= 0:
                raise ValueError(f"tone freq must be positive, got {p['freq']}")
        elif self.kind == "gain_echo":
            if not 0.0 <= p["decay"] < 1.0:
                raise ValueError(f"echo decay must be in [0, 1), got {p['decay']}")
            if p["delay"] <= 0:
                raise ValueError(f"echo delay must be positive, got {p['delay']}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params)}

    @staticmethod
    def from_dict(d: dict) -> "TriggerSpec":
        return TriggerSpec(d["kind"], dict(d["params"]))


def spec_block(row_offset: int, col_offset: int, height: int, width: int,
               value: float) -> TriggerSpec:
    return TriggerSpec("spec_block", {"row_offset": int(row_offset), "col_offset": int(col_offset),
                                      "height": int(height), "width": int(width),
                                      "value": float(value)})


def tone_overlay(freq: float, amplitude: float) -> TriggerSpec:
    return TriggerSpec("tone_overlay", {"freq": float(freq), "amplitude": float(amplitude)})


def gain_echo(delay: float, decay: float) -> TriggerSpec:
    return TriggerSpec("gain_echo", {"delay": float(delay), "decay": float(decay)})


def block_value_from_features(features: list[FeatureMap]) -> float:
    """The conventional 'white' value: the dataset's max absolute coefficient."""
    if not features:
        raise ValueError("cannot derive a block value from an empty feature list")
    return float(max(np.max(np.abs(f.values)) for f in features))


def default_spec_block(feature_shape: tuple[int, int], value: float,
                       height: int = 4, width: int = 4) -> TriggerSpec:
    """A block at the high-coefficient/late-time corner of the feature canvas."""
    n_mfcc, n_frames = feature_shape
    return spec_block(n_mfcc - height, n_frames - width, height, width, value)


@dataclass
class PoisonPlan:
    """A replayable record of which train samples were poisoned and how."""

    trigger: TriggerSpec
    poison_ratio: float
    target_label: str
    seed: int
    poisoned_ids: frozenset[str]

    def to_dict(self) -> dict:
        return {
            "format": PLAN_FORMAT,
            "version": PLAN_VERSION,
            "trigger": self.trigger.to_dict(),
            "poison_ratio": self.poison_ratio,
            "target_label": self.target_label,
            "seed": self.seed,
            "poisoned_ids": sorted(self.poisoned_ids),
        }

    @staticmethod
    def from_dict(d: dict) -> "PoisonPlan":
        if d.get("format") != PLAN_FORMAT:
            raise ValueError("not a poison plan")
        if d.get("version") != PLAN_VERSION:
            raise ValueError(f"unsupported poison plan version {d.get('version')}")
        return PoisonPlan(TriggerSpec.from_dict(d["trigger"]), float(d["poison_ratio"]),
                          d["target_label"], int(d["seed"]), frozenset(d["poisoned_ids"]))


def save_plan(plan: PoisonPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_plan(path: str | Path) -> PoisonPlan:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"poison plan not found: {path}")
    return PoisonPlan.from_dict(json.loads(path.read_text(encoding="utf-8")))


def apply_trigger(x: FeatureMap | AudioSample, trigger: TriggerSpec):
    """Apply a trigger, returning a new object of the same type; never mutates."""
    if trigger.kind == "spec_block":
        if not isinstance(x, FeatureMap):
            raise ValueError("spec_block applies to FeatureMap inputs")
        p = trigger.params
        r0, c0 = int(p["row_offset"]), int(p["col_offset"])
        h, w = int(p["height"]), int(p["width"])
        if r0 + h > x.n_mfcc or c0 + w > x.n_frames:
            raise ValueError(
                f"spec_block region [{r0}:{r0 + h}, {c0}:{c0 + w}] exceeds "
                f"feature shape {x.values.shape}")
        values = x.values.copy()
        values[r0:r0 + h, c0:c0 + w] = p["value"]
        return FeatureMap(values, x.label, x.sample_id)

    if not isinstance(x, AudioSample):
        raise ValueError(f"{trigger.kind} applies to AudioSample inputs")

    if trigger.kind == "tone_overlay":
        p = trigger.params
        t = np.arange(x.waveform.size, dtype=np.float64) / x.sample_rate
        wav = x.waveform + p["amplitude"] * np.sin(2.0 * math.pi * p["freq"] * t)
    else:  # gain_echo
        p = trigger.params
        d = int(round(p["delay"] * x.sample_rate))
        wav = x.waveform.copy()
        if d < wav.size:
            wav[d:] += p["decay"] * x.waveform[: wav.size - d]
    return AudioSample(np.clip(wav, -1.0, 1.0), x.sample_rate, x.label, x.id, x.source)


def _triggered_features(sample: AudioSample, trigger: TriggerSpec,
                        mfcc: MfccConfig) -> FeatureMap:
    """δ(x) in feature space: waveform triggers go in before MFCC, the block after."""
    if trigger.kind == "spec_block":
        return apply_trigger(
            extract_mfcc(sample, mfcc.n_mfcc, mfcc.frame_len, mfcc.hop, mfcc.n_frames), trigger)
    return extract_mfcc(apply_trigger(sample, trigger),
                        mfcc.n_mfcc, mfcc.frame_len, mfcc.hop, mfcc.n_frames)


def trigger_features(samples: list[AudioSample], trigger: TriggerSpec,
                     mfcc: MfccConfig = MfccConfig()) -> list[FeatureMap]:
    """Triggered feature maps for every sample, true labels retained."""
    return [_triggered_features(s, trigger, mfcc) for s in samples]


def _poison_with_ids(split: DatasetSplit, trigger: TriggerSpec, target_label: str,
                     poisoned_ids: frozenset[str], mfcc: MfccConfig) -> list[FeatureMap]:
    out = []
    for s in split.train:
        if s.id in poisoned_ids:
            fmap = _triggered_features(s, trigger, mfcc)
            out.append(FeatureMap(fmap.values, target_label, s.id))
        else:
            out.append(extract_mfcc(s, mfcc.n_mfcc, mfcc.frame_len, mfcc.hop, mfcc.n_frames))
    return out


def poison_dataset(split: DatasetSplit, trigger: TriggerSpec, poison_ratio: float,
                   target_label: str, seed: int, mfcc: MfccConfig = MfccConfig()
                   ) -> tuple[list[FeatureMap], PoisonPlan]:
    """Poison a seeded uniform fraction of the train set toward target_label.

    Returns the featurized train set (triggered samples relabeled to the
    target) together with the plan recording exactly which ids were hit.
    The split itself, including test and the clean defense subset, is never
    touched.
    """
    if not 0.0 <= poison_ratio <= 1.0:
        raise ValueError(f"poison_ratio must be in [0, 1], got {poison_ratio}")
    labels = {s.label for s in split.train}
    if target_label not in labels:
        raise ValueError(f"target label {target_label!r} is not a class of the train set")

    n = len(split.train)
    n_poison = int(round(poison_ratio * n))
    rng = np.random.default_rng([seed, 0xB0D])
    chosen = rng.choice(n, size=n_poison, replace=False) if n_poison else np.empty(0, int)
    poisoned_ids = frozenset(split.train[int(i)].id for i in chosen)

    plan = PoisonPlan(trigger, poison_ratio, target_label, seed, poisoned_ids)
    return _poison_with_ids(split, trigger, target_label, poisoned_ids, mfcc), plan


def replay_plan(split: DatasetSplit, plan: PoisonPlan, mfcc: MfccConfig = MfccConfig()
                ) -> list[FeatureMap]:
    """Reproduce the exact poisoned train set recorded by a plan."""
    return _poison_with_ids(split, plan.trigger, plan.target_label, plan.poisoned_ids, mfcc)


def build_asr_eval_set(test: list[AudioSample], trigger: TriggerSpec, target_label: str,
                       mfcc: MfccConfig = MfccConfig()) -> list[FeatureMap]:
    """Triggered copies of every test sample whose true label is not the target.

    True labels are retained for bookkeeping; attack success compares the
    model's predictions against the target label, not against these labels.
    """
    if not test:
        raise ValueError("test set is empty")
    keep = [s for s in test if s.label != target_label]
    return trigger_features(keep, trigger, mfcc)
