"""Clean accuracy, attack success rate, run comparison, and embedding export."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import FeatureMap
from .model import ModelHandle, batch_from_features


@dataclass(frozen=True)
class Metrics:
    """Percent metrics of one model on one evaluation pair of sets."""

    ca: float
    asr: float
    n_clean: int
    n_asr: int

    def to_dict(self) -> dict:
        return {"ca": self.ca, "asr": self.asr, "n_clean": self.n_clean, "n_asr": self.n_asr}


@dataclass
class ExperimentReport:
    attack: dict
    defense: dict
    pre: Metrics
    post: Metrics
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "attack": self.attack,
            "defense": self.defense,
            "pre": self.pre.to_dict(),
            "post": self.post.to_dict(),
            "config": self.config,
            "seeds": self.seeds,
            "runtime_s": self.runtime_s,
        }


def clean_accuracy(model: ModelHandle, test_set: list[FeatureMap]) -> float:
    """100 * fraction of clean samples predicted as their own label."""
    if not test_set:
        raise ValueError("empty evaluation set")
    if model.classes is None:
        raise ValueError("model has no class vocabulary")
    X, y = batch_from_features(test_set, model.classes)
    preds = model.predict(X)
    return 100.0 * float(np.mean(preds == y))


def attack_success_rate(model: ModelHandle, asr_set: list[FeatureMap],
                        target_label: str) -> float:
    """100 * fraction of triggered samples predicted as the target label.

    The set should come from build_asr_eval_set, so samples whose true label
    already equals the target are excluded.
    """
    if not asr_set:
        raise ValueError("empty evaluation set")
    if model.classes is None:
        raise ValueError("model has no class vocabulary")
    if target_label not in model.classes:
        raise ValueError(f"target label {target_label!r} not in model classes")
    target_index = model.classes.index(target_label)
    X = np.stack([f.values for f in asr_set])
    preds = model.predict(X)
    return 100.0 * float(np.mean(preds == target_index))


def evaluate(model: ModelHandle, test_set: list[FeatureMap], asr_set: list[FeatureMap],
             target_label: str) -> Metrics:
    return Metrics(clean_accuracy(model, test_set),
                   attack_success_rate(model, asr_set, target_label),
                   len(test_set), len(asr_set))


def export_embeddings(model: ModelHandle, samples: list[FeatureMap],
                      poisoned_ids=frozenset(), layer: str = "penultimate"
                      ) -> list[tuple[str, str, bool, np.ndarray]]:
    """Rows of (sample id, label, poisoned flag, penultimate feature vector).

    Only the penultimate layer is exported; the projection (t-SNE or similar)
    is left to external tooling.
    """
    if layer != "penultimate":
        raise ValueError(f"unsupported embedding layer {layer!r}; only 'penultimate'")
    if not samples:
        raise ValueError("no samples to embed")
    X = np.stack([f.values for f in samples])
    feats = model.penultimate(X)
    poisoned_ids = frozenset(poisoned_ids)
    return [(f.sample_id, f.label, f.sample_id in poisoned_ids, feats[i])
            for i, f in enumerate(samples)]


def embeddings_to_csv(rows, path: str | Path) -> None:
    if not rows:
        raise ValueError("no embedding rows")
    d = len(rows[0][3])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "poisoned"] + [f"f_{i}" for i in range(d)])
        for sample_id, label, poisoned, vec in rows:
            writer.writerow([sample_id, label, int(poisoned)] + [f"{v:.17g}" for v in vec])


def compare_runs(reports: list[ExperimentReport]) -> list[dict]:
    """Ranking rows sorted by post-defense ASR ascending, CA descending tiebreak.

    Ties beyond that keep insertion order. Deltas are pre minus post.
    """
    if not reports:
        raise ValueError("no reports to compare")
    order = sorted(range(len(reports)),
                   key=lambda i: (reports[i].post.asr, -reports[i].post.ca, i))
    rows = []
    for rank, i in enumerate(order, start=1):
        rep = reports[i]
        rows.append({
            "rank": rank,
            "attack": rep.attack.get("kind", "?"),
            "defense": rep.defense.get("method", "?"),
            "pre_asr": rep.pre.asr,
            "post_asr": rep.post.asr,
            "pre_ca": rep.pre.ca,
            "post_ca": rep.post.ca,
            "delta_asr": rep.pre.asr - rep.post.asr,
            "delta_ca": rep.pre.ca - rep.post.ca,
        })
    return rows


_CSV_COLUMNS = ["rank", "attack", "defense", "pre_asr", "post_asr", "pre_ca", "post_ca",
                "delta_asr", "delta_ca"]


def comparison_to_csv(rows: list[dict], path: str | Path) -> None:
    """Two-decimal percent formatting, matching the usual table style."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], (str, int)) else f"{row[c]:.2f}"
                             for c in _CSV_COLUMNS])


def report_to_json(report: ExperimentReport, path: str | Path) -> None:
    """Full-precision machine-readable report with the resolved config echo."""
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
