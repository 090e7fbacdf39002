"""Per-neuron pruning forensics: loss changes, zone taxonomy, gradient profiles.

A neuron's clean loss change (CLC) is the mean increase in clean-task loss
when its weight block is zeroed; the backdoor loss change (BLC) is the same
quantity on triggered inputs scored against the target label. The sign pair
(clc, blc) classifies each neuron into one of four zones:

    C  clc > 0, blc <= 0   clean: supports the clean task only
    B  blc > 0, clc <= 0   backdoored: supports the backdoor task only
    H  clc > 0, blc > 0    hybrid: supports both tasks
    R  clc <= 0, blc <= 0  redundant: supports neither

Exact zeros fall on the non-positive side, so (0, 0) lands in R.
Every sweep restores the model bit-identically to its pre-sweep state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelHandle, NeuronId, forward_loss, gradient, mask_neuron

ZONES = ("C", "B", "H", "R")


@dataclass
class NeuronRecord:
    neuron: NeuronId
    clc: float
    blc: float
    zone: str
    mean_grad_norm: float = 0.0


@dataclass
class ZoneSummary:
    counts: dict[str, int]
    layers: list[int]
    n_neurons: int
    points: list[tuple[int, int, float, float]] = field(default_factory=list, repr=False)


def zone_of(clc: float, blc: float) -> str:
    """Sign-rule zone assignment; zero counts as non-positive."""
    if clc > 0 and blc > 0:
        return "H"
    if clc > 0:
        return "C"
    if blc > 0:
        return "B"
    return "R"


def _masked_loss_delta(model: ModelHandle, neuron: NeuronId, X, y) -> float:
    began_masked = model.is_masked(neuron)
    base, _ = forward_loss(model, (X, y))
    mask_neuron(model, neuron, True)
    try:
        masked, _ = forward_loss(model, (X, y))
    finally:
        mask_neuron(model, neuron, began_masked)
    return float(masked - base)


def clean_loss_change(model: ModelHandle, neuron: NeuronId, X: np.ndarray,
                      y: np.ndarray) -> float:
    """Mean clean-task loss increase from zeroing one neuron; model restored."""
    return _masked_loss_delta(model, neuron, X, y)


def backdoor_loss_change(model: ModelHandle, neuron: NeuronId, X_triggered: np.ndarray,
                         target_index: int) -> float:
    """Like clean_loss_change, but on triggered inputs scored against the target."""
    y = np.full(np.asarray(X_triggered).shape[0], int(target_index), dtype=np.int64)
    return _masked_loss_delta(model, neuron, X_triggered, y)


def classify_zones(model: ModelHandle, layers, clean_X: np.ndarray, clean_y: np.ndarray,
                   backdoor_X: np.ndarray, target_index: int
                   ) -> tuple[ZoneSummary, list[NeuronRecord]]:
    """CLC/BLC for every neuron of the given conv layers, with zone labels."""
    layers = list(layers)
    if not layers:
        raise ValueError("layer filter is empty")
    neurons = model.neuron_ids(layers)

    yb = np.full(np.asarray(backdoor_X).shape[0], int(target_index), dtype=np.int64)
    base_clean, _ = forward_loss(model, (clean_X, clean_y))
    base_bd, _ = forward_loss(model, (backdoor_X, yb))

    records = []
    for nid in neurons:
        began_masked = model.is_masked(nid)
        mask_neuron(model, nid, True)
        try:
            clean_masked, _ = forward_loss(model, (clean_X, clean_y))
            bd_masked, _ = forward_loss(model, (backdoor_X, yb))
        finally:
            mask_neuron(model, nid, began_masked)
        clc = float(clean_masked - base_clean)
        blc = float(bd_masked - base_bd)
        records.append(NeuronRecord(nid, clc, blc, zone_of(clc, blc)))

    counts = {z: 0 for z in ZONES}
    for r in records:
        counts[r.zone] += 1
    points = [(r.neuron.layer, r.neuron.channel, r.clc, r.blc) for r in records]
    return ZoneSummary(counts, sorted(layers), len(records), points), records


def gradient_profile(model: ModelHandle, clean_X: np.ndarray, clean_y: np.ndarray,
                     records: list[NeuronRecord], max_samples: int = 50
                     ) -> tuple[list[NeuronRecord], dict[str, np.ndarray]]:
    """Per-sample clean-loss gradient block norms, averaged into the records.

    Each of the first max_samples samples contributes one single-sample
    gradient; a record's mean_grad_norm is its neuron's average block norm
    over those samples. Also returns a per-sample series of the zone-mean
    norms for scatter/line plots.
    """
    X = np.asarray(clean_X)
    y = np.asarray(clean_y)
    if X.shape[0] == 0:
        raise ValueError("no clean samples given")
    n = min(X.shape[0], max_samples)

    by_zone: dict[str, list[NeuronRecord]] = {z: [] for z in ZONES}
    for r in records:
        by_zone[r.zone].append(r)

    norms = {r.neuron: np.empty(n) for r in records}
    series = {z: np.empty(n) for z in ZONES}
    for i in range(n):
        report = gradient(model, (X[i:i + 1], y[i:i + 1]))
        for r in records:
            norms[r.neuron][i] = report.per_neuron_norm[r.neuron]
        for z in ZONES:
            members = by_zone[z]
            series[z][i] = (np.mean([norms[r.neuron][i] for r in members])
                            if members else np.nan)

    for r in records:
        r.mean_grad_norm = float(np.mean(norms[r.neuron]))
    return records, series


def records_to_csv(records: list[NeuronRecord], path: str | Path) -> None:
    """One row per neuron: layer, channel, clc, blc, zone, mean_grad_norm."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "channel", "clc", "blc", "zone", "mean_grad_norm"])
        for r in records:
            writer.writerow([r.neuron.layer, r.neuron.channel, f"{r.clc:.17g}",
                             f"{r.blc:.17g}", r.zone, f"{r.mean_grad_norm:.17g}"])


def profile_to_csv(series: dict[str, np.ndarray], path: str | Path) -> None:
    """Per-sample zone-mean gradient norms; empty zones leave blank cells."""
    zones = [z for z in ZONES]
    n = max((len(v) for v in series.values()), default=0)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index"] + zones)
        for i in range(n):
            row = [i]
            for z in zones:
                v = series[z][i]
                row.append("" if np.isnan(v) else f"{v:.17g}")
            writer.writerow(row)
