"""Model repair: gradient-norm fine-tuning, vanilla fine-tuning, fine-pruning.

Gradient-norm fine-tuning (GN-FT) minimizes cross-entropy plus a penalty of
lambda times the L2 norm of the cross-entropy gradient, with lambda = alpha*r.
Instead of forming the Hessian term the penalty gradient is approximated by an
extra gradient evaluation at a point nudged along the normalized gradient:

    g1 = grad L(theta)
    theta' = theta + r * g1 / ||g1||
    g2 = grad L(theta')          (same mini-batch)
    g  = (1 - alpha) * g1 + alpha * g2
    theta <- theta - lr * g

With alpha = 0 this collapses exactly to a plain gradient step, so vanilla
fine-tuning shares the same loop and mini-batch schedule. The perturbed
parameters theta' never persist past a step.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .corpus import FeatureMap
from .model import ModelHandle, NeuronId, batch_from_features, gradient, mask_neuron

# below this, the normalized ascent direction is undefined; fall back to g1
GRAD_NORM_EPS = 1e-12


@dataclass(frozen=True)
class DefenseConfig:
    """Hyper-parameters for a repair run. r and alpha follow the usual defaults."""

    r: float = 0.05
    alpha: float = 0.7
    iterations: int = 400
    lr: float = 0.02
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError(f"r must be positive, got {self.r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be nonnegative, got {self.iterations}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_dict(self) -> dict:
        return {"r": self.r, "alpha": self.alpha, "iterations": self.iterations,
                "lr": self.lr, "batch_size": self.batch_size, "seed": self.seed}


@dataclass
class StepRecord:
    iteration: int
    loss: float
    g1_norm: float
    g2_norm: float  # 0.0 when the perturbation step was skipped (alpha=0 or degenerate)
    g_norm: float
    degenerate: bool


@dataclass
class DefenseTrace:
    rows: list[StepRecord]

    def __len__(self):
        return len(self.rows)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "g1_norm", "g2_norm", "g_norm", "degenerate"])
            for r in self.rows:
                writer.writerow([r.iteration, f"{r.loss:.17g}", f"{r.g1_norm:.17g}",
                                 f"{r.g2_norm:.17g}", f"{r.g_norm:.17g}", int(r.degenerate)])


GradFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def gnft_direction(theta: np.ndarray, grad_fn: GradFn, r: float, alpha: float
                   ) -> tuple[np.ndarray, float, float, float, bool]:
    """The combined update direction for one batch.

    grad_fn maps a parameter vector to (loss, gradient). Returns
    (g, loss, ||g1||, ||g2||, degenerate); ||g2|| is 0.0 when no perturbation
    step was taken.
    """
    theta = np.asarray(theta, dtype=np.float64)
    loss, g1 = grad_fn(theta)
    n1 = float(np.linalg.norm(g1))
    if alpha == 0.0:
        return g1, loss, n1, 0.0, False
    if n1 <= GRAD_NORM_EPS:
        return g1, loss, n1, 0.0, True
    theta_p = theta + (r / n1) * g1
    _, g2 = grad_fn(theta_p)
    n2 = float(np.linalg.norm(g2))
    g = (1.0 - alpha) * g1 + alpha * g2
    return g, loss, n1, n2, False


def _model_grad_fn(model: ModelHandle, X: np.ndarray, y: np.ndarray) -> GradFn:
    def fn(theta: np.ndarray) -> tuple[float, np.ndarray]:
        model.set_params(theta)
        report = gradient(model, (X, y))
        return report.loss, report.full
    return fn


def gnft_step(model: ModelHandle, batch, cfg: DefenseConfig, iteration: int = 0
              ) -> StepRecord:
    """One repair step on a mini-batch; mutates the model's parameters in place."""
    X, y = batch
    theta = model.get_params()
    g, loss, n1, n2, degenerate = gnft_direction(
        theta, _model_grad_fn(model, np.asarray(X), np.asarray(y)), cfg.r, cfg.alpha)
    model.set_params(theta - cfg.lr * g)
    return StepRecord(iteration, loss, n1, n2, float(np.linalg.norm(g)), degenerate)


def _batch_schedule(n: int, batch_size: int, iterations: int, seed: int):
    """Deterministic mini-batch index schedule cycling over a reshuffled epoch."""
    rng = np.random.default_rng([seed, 0xDEF])
    order = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos >= n:
            order = rng.permutation(n)
            pos = 0
        yield order[pos:pos + batch_size]
        pos += batch_size


def _finetune(model: ModelHandle, clean_set: list[FeatureMap], cfg: DefenseConfig
              ) -> tuple[ModelHandle, DefenseTrace]:
    if not clean_set:
        raise ValueError("clean defense set is empty")
    if model.classes is None:
        raise ValueError("model has no class vocabulary")
    X, y = batch_from_features(clean_set, model.classes)
    batch_size = min(cfg.batch_size, X.shape[0])
    rows = []
    for t, idx in enumerate(_batch_schedule(X.shape[0], batch_size, cfg.iterations, cfg.seed)):
        rows.append(gnft_step(model, (X[idx], y[idx]), cfg, iteration=t))
    return model, DefenseTrace(rows)


def run_gnft(model: ModelHandle, clean_set: list[FeatureMap], cfg: DefenseConfig
             ) -> tuple[ModelHandle, DefenseTrace]:
    """Gradient-norm fine-tuning over the clean defense set; returns model + trace."""
    return _finetune(model, clean_set, cfg)


def run_vanilla_ft(model: ModelHandle, clean_set: list[FeatureMap], cfg: DefenseConfig
                   ) -> ModelHandle:
    """Plain cross-entropy fine-tuning with the same schedule machinery as GN-FT."""
    repaired, _ = _finetune(model, clean_set, replace(cfg, alpha=0.0))
    return repaired


def run_fine_pruning(model: ModelHandle, clean_set: list[FeatureMap],
                     prune_fraction: float, ft_cfg: DefenseConfig,
                     layers=None) -> ModelHandle:
    """Mask the lowest-activation conv neurons on clean data, then fine-tune.

    Activation is the mean absolute post-ReLU channel output over the clean
    set. Ranking covers `layers` (default: the last two conv layers). Masks
    persist in the returned model.
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError(f"prune_fraction must be in [0, 1), got {prune_fraction}")
    if not clean_set:
        raise ValueError("clean defense set is empty")
    if model.classes is None:
        raise ValueError("model has no class vocabulary")
    if layers is None:
        layers = model.last_conv_layers(2)

    X, _ = batch_from_features(clean_set, model.classes)
    acts = model.activation_means(X)
    scored = [(float(acts[i][j]), i, j) for i in layers
              for j in range(model.conv_channels[i])]
    scored.sort()
    n_prune = int(round(prune_fraction * len(scored)))
    for _, i, j in scored[:n_prune]:
        mask_neuron(model, NeuronId(i, j), True)

    return run_vanilla_ft(model, clean_set, ft_cfg)
