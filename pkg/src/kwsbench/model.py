"""Differentiable classifiers with per-neuron addressable convolution channels.

A ModelHandle wraps a float64 torch module behind a numpy-facing contract:
flat parameter vectors with a stable layout, reversible per-channel masks on
every convolutional layer (a masked channel's weight block and bias contribute
exactly zero to the forward pass and receive exactly zero gradient), gradient
reports with per-neuron block norms, and a self-describing npz checkpoint.

Handles are single-writer: training, masking, and parameter assignment mutate
the handle in place. Read-only evaluation on a clone is safe in parallel.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .corpus import FeatureMap

CHECKPOINT_FORMAT = "kwsbench-checkpoint"
CHECKPOINT_VERSION = 1

ARCHS = ("small_cnn", "mlp")

_NORM_EPS = 1e-6


class CheckpointFormatError(Exception):
    """A checkpoint file is malformed or does not match the declared model."""


@dataclass(frozen=True, order=True)
class NeuronId:
    """One output channel of one convolutional layer (both 0-indexed)."""

    layer: int
    channel: int


def _instance_norm(x: torch.Tensor) -> torch.Tensor:
    # per-sample standardization over all cells; conditions raw MFCC scales
    dims = tuple(range(1, x.dim()))
    mu = x.mean(dim=dims, keepdim=True)
    sd = x.std(dim=dims, unbiased=False, keepdim=True)
    return (x - mu) / (sd + _NORM_EPS)


class _SmallCnn(nn.Module):
    def __init__(self, input_shape, n_classes, channels):
        super().__init__()
        h, w = input_shape
        if h < 2 ** len(channels) or w < 2 ** len(channels):
            raise ValueError(
                f"input shape {input_shape} too small for {len(channels)} pooling stages")
        convs = []
        c_prev = 1
        for c in channels:
            convs.append(nn.Conv2d(c_prev, c, 3, padding=1))
            c_prev = c
        self.convs = nn.ModuleList(convs)
        for i, c in enumerate(channels):
            self.register_buffer(f"mask{i}", torch.ones(c, dtype=torch.float64))
        for _ in channels:
            h, w = h // 2, w // 2
        self.head = nn.Linear(channels[-1] * h * w, n_classes)
        self.channels = tuple(channels)

    def conv_masks(self):
        return [getattr(self, f"mask{i}") for i in range(len(self.convs))]

    def features(self, x):
        x = _instance_norm(x)
        for conv, mask in zip(self.convs, self.conv_masks()):
            w = conv.weight * mask.view(-1, 1, 1, 1)
            b = conv.bias * mask
            x = F.max_pool2d(F.relu(F.conv2d(x, w, b, padding=1)), 2)
        return x.flatten(1)

    def conv_activations(self, x):
        """Post-ReLU conv outputs, one tensor per layer (used for pruning scores)."""
        acts = []
        x = _instance_norm(x)
        for conv, mask in zip(self.convs, self.conv_masks()):
            w = conv.weight * mask.view(-1, 1, 1, 1)
            b = conv.bias * mask
            a = F.relu(F.conv2d(x, w, b, padding=1))
            acts.append(a)
            x = F.max_pool2d(a, 2)
        return acts

    def forward(self, x):
        return self.head(self.features(x))


class _Mlp(nn.Module):
    def __init__(self, input_shape, n_classes, hidden=64):
        super().__init__()
        h, w = input_shape
        self.fc1 = nn.Linear(h * w, hidden)
        self.head = nn.Linear(hidden, n_classes)
        self.channels = ()

    def conv_masks(self):
        return []

    def features(self, x):
        x = _instance_norm(x).flatten(1)
        return F.relu(self.fc1(x))

    def conv_activations(self, x):
        return []

    def forward(self, x):
        return self.head(self.features(x))


class ModelHandle:
    """A seeded classifier with addressable conv neurons and reversible masks."""

    def __init__(self, arch: str, input_shape: tuple[int, int], n_classes: int,
                 seed: int, classes: list[str] | None = None,
                 channels: tuple[int, ...] = (16, 32, 32), hidden: int = 64):
        if arch not in ARCHS:
            raise ValueError(f"unsupported architecture {arch!r}; expected one of {ARCHS}")
        if n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {n_classes}")
        input_shape = (int(input_shape[0]), int(input_shape[1]))
        if input_shape[0] < 1 or input_shape[1] < 1:
            raise ValueError(f"invalid input shape {input_shape}")
        if classes is not None and len(classes) != n_classes:
            raise ValueError(f"{len(classes)} class names for n_classes={n_classes}")

        self.arch = arch
        self.input_shape = input_shape
        self.n_classes = n_classes
        self.seed = seed
        self.classes = list(classes) if classes is not None else None
        self._build_kwargs = {"channels": tuple(channels), "hidden": hidden}
        if arch == "small_cnn":
            self.net = _SmallCnn(input_shape, n_classes, channels).to(torch.float64)
        else:
            self.net = _Mlp(input_shape, n_classes, hidden).to(torch.float64)
        self._init_params(seed)
        self._layout = self._build_layout()

    # ---- construction ----------------------------------------------------

    def _init_params(self, seed: int):
        rng = np.random.default_rng([seed, 0x1417])
        with torch.no_grad():
            for module in self.net.modules():
                if isinstance(module, (nn.Conv2d, nn.Linear)):
                    fan_in = int(np.prod(module.weight.shape[1:]))
                    bound = 1.0 / np.sqrt(fan_in)
                    w = rng.uniform(-bound, bound, size=tuple(module.weight.shape))
                    b = rng.uniform(-bound, bound, size=tuple(module.bias.shape))
                    module.weight.copy_(torch.from_numpy(w))
                    module.bias.copy_(torch.from_numpy(b))

    def _build_layout(self):
        layout = []
        start = 0
        for name, p in self.net.named_parameters():
            stop = start + p.numel()
            layout.append((name, tuple(p.shape), start, stop))
            start = stop
        return layout

    # ---- parameter vector ------------------------------------------------

    @property
    def n_params(self) -> int:
        return self._layout[-1][3]

    def param_layout(self):
        """[(name, shape, start, stop)] segments of the flat parameter vector."""
        return list(self._layout)

    def get_params(self) -> np.ndarray:
        with torch.no_grad():
            return torch.cat([p.reshape(-1) for p in self.net.parameters()]).numpy().copy()

    def set_params(self, vec: np.ndarray):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected parameter vector of length {self.n_params}, "
                             f"got shape {vec.shape}")
        with torch.no_grad():
            for (name, shape, start, stop), p in zip(self._layout, self.net.parameters()):
                p.copy_(torch.from_numpy(vec[start:stop].reshape(shape)))

    # ---- neuron addressing -----------------------------------------------

    @property
    def conv_channels(self) -> tuple[int, ...]:
        return self.net.channels

    def neuron_ids(self, layers=None) -> list[NeuronId]:
        """All addressable conv neurons, optionally restricted to given layers."""
        if layers is not None:
            layers = sorted(set(int(i) for i in layers))
            bad = [i for i in layers if not 0 <= i < len(self.conv_channels)]
            if bad:
                raise ValueError(f"no such conv layer(s): {bad}")
        else:
            layers = range(len(self.conv_channels))
        return [NeuronId(i, j) for i in layers for j in range(self.conv_channels[i])]

    def last_conv_layers(self, n: int = 2) -> list[int]:
        k = len(self.conv_channels)
        return list(range(max(0, k - n), k))

    def _check_neuron(self, neuron: NeuronId):
        if not (0 <= neuron.layer < len(self.conv_channels)
                and 0 <= neuron.channel < self.conv_channels[neuron.layer]):
            raise ValueError(f"invalid neuron {neuron} for conv channels {self.conv_channels}")

    def neuron_indices(self, neuron: NeuronId) -> np.ndarray:
        """Flat parameter indices of one neuron's weight block plus its bias."""
        self._check_neuron(neuron)
        wname = f"convs.{neuron.layer}.weight"
        bname = f"convs.{neuron.layer}.bias"
        segs = {name: (shape, start, stop) for name, shape, start, stop in self._layout}
        wshape, wstart, _ = segs[wname]
        block = int(np.prod(wshape[1:]))
        widx = np.arange(wstart + neuron.channel * block, wstart + (neuron.channel + 1) * block)
        _, bstart, _ = segs[bname]
        return np.concatenate([widx, [bstart + neuron.channel]])

    # ---- masking -----------------------------------------------------------

    def is_masked(self, neuron: NeuronId) -> bool:
        self._check_neuron(neuron)
        return bool(self.net.conv_masks()[neuron.layer][neuron.channel].item() == 0.0)

    def masked_neurons(self) -> list[NeuronId]:
        out = []
        for i, mask in enumerate(self.net.conv_masks()):
            for j in np.flatnonzero(mask.numpy() == 0.0):
                out.append(NeuronId(i, int(j)))
        return out

    def get_mask_vectors(self) -> list[np.ndarray]:
        return [m.numpy().copy() for m in self.net.conv_masks()]

    def set_mask_vectors(self, masks: list[np.ndarray]):
        own = self.net.conv_masks()
        if len(masks) != len(own):
            raise ValueError(f"expected {len(own)} mask vectors, got {len(masks)}")
        with torch.no_grad():
            for m, new in zip(own, masks):
                new = np.asarray(new, dtype=np.float64)
                if new.shape != tuple(m.shape):
                    raise ValueError(f"mask shape {new.shape} != {tuple(m.shape)}")
                m.copy_(torch.from_numpy(new))

    # ---- evaluation ----------------------------------------------------------

    def _to_tensor(self, X: np.ndarray) -> torch.Tensor:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[:, None, :, :]
        if X.ndim != 4 or X.shape[1] != 1 or X.shape[2:] != self.input_shape:
            raise ValueError(f"expected features [B, {self.input_shape[0]}, "
                             f"{self.input_shape[1]}], got {X.shape}")
        return torch.from_numpy(X)

    def logits(self, X: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self.net(self._to_tensor(X)).numpy()

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(X), axis=1)

    def penultimate(self, X: np.ndarray) -> np.ndarray:
        """Features feeding the final linear head, one row per sample."""
        with torch.no_grad():
            return self.net.features(self._to_tensor(X)).numpy()

    def activation_means(self, X: np.ndarray) -> list[np.ndarray]:
        """Per conv layer: mean |post-ReLU activation| per channel over batch and space."""
        with torch.no_grad():
            acts = self.net.conv_activations(self._to_tensor(X))
            return [a.abs().mean(dim=(0, 2, 3)).numpy() for a in acts]

    def clone(self) -> "ModelHandle":
        return copy.deepcopy(self)


@dataclass
class GradientReport:
    """Flat gradient of the mean batch loss plus per-neuron block L2 norms."""

    full: np.ndarray
    per_neuron_norm: dict[NeuronId, float]
    loss: float

    def norm(self) -> float:
        return float(np.linalg.norm(self.full))


def build_reference_model(arch: str, input_shape: tuple[int, int], n_classes: int,
                          seed: int, classes: list[str] | None = None,
                          **kwargs) -> ModelHandle:
    """Deterministically initialized reference architecture (small_cnn or mlp)."""
    return ModelHandle(arch, input_shape, n_classes, seed, classes, **kwargs)


def batch_from_features(features: list[FeatureMap], classes: list[str]
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Stack feature maps into (X, y) with labels encoded against `classes`."""
    if not features:
        raise ValueError("empty feature list")
    index = {c: i for i, c in enumerate(classes)}
    try:
        y = np.array([index[f.label] for f in features], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not in model classes") from None
    X = np.stack([f.values for f in features]).astype(np.float64)
    return X, y


def _validate_batch(model: ModelHandle, batch) -> tuple[torch.Tensor, torch.Tensor]:
    X, y = batch
    Xt = model._to_tensor(np.asarray(X))
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != Xt.shape[0]:
        raise ValueError(f"labels shape {y.shape} does not match batch of {Xt.shape[0]}")
    if y.size == 0:
        raise ValueError("empty batch")
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise ValueError("label index out of range")
    return Xt, torch.from_numpy(y.astype(np.int64))


def forward_loss(model: ModelHandle, batch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and the argmax predictions."""
    Xt, yt = _validate_batch(model, batch)
    with torch.no_grad():
        logits = model.net(Xt)
        loss = F.cross_entropy(logits, yt)
        return float(loss.item()), logits.argmax(dim=1).numpy()


def gradient(model: ModelHandle, batch) -> GradientReport:
    """Exact gradient of the mean batch cross-entropy w.r.t. all parameters.

    Masked neurons receive exactly zero gradient (the mask multiplies their
    weights inside the forward pass).
    """
    Xt, yt = _validate_batch(model, batch)
    model.net.zero_grad(set_to_none=True)
    loss = F.cross_entropy(model.net(Xt), yt)
    loss.backward()
    pieces = []
    for p in model.net.parameters():
        g = p.grad if p.grad is not None else torch.zeros_like(p)
        pieces.append(g.reshape(-1))
    full = torch.cat(pieces).numpy().copy()
    model.net.zero_grad(set_to_none=True)
    per_neuron = {}
    for nid in model.neuron_ids():
        per_neuron[nid] = float(np.linalg.norm(full[model.neuron_indices(nid)]))
    return GradientReport(full, per_neuron, float(loss.item()))


def mask_neuron(model: ModelHandle, neuron: NeuronId, masked: bool) -> ModelHandle:
    """Set one neuron's reversible mask; masked == equivalent to zeroing its block."""
    model._check_neuron(neuron)
    with torch.no_grad():
        model.net.conv_masks()[neuron.layer][neuron.channel] = 0.0 if masked else 1.0
    return model


def train(model: ModelHandle, train_set: list[FeatureMap], epochs: int, lr: float,
          batch_size: int, seed: int) -> tuple[ModelHandle, list[float]]:
    """Plain seeded mini-batch gradient descent on cross-entropy.

    Returns the trained model (mutated in place) and the per-epoch mean loss.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if epochs < 0:
        raise ValueError(f"epochs must be nonnegative, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not train_set:
        raise ValueError("empty train set")
    if model.classes is None:
        raise ValueError("model has no class vocabulary; build it with classes=...")

    X, y = batch_from_features(train_set, model.classes)
    n = X.shape[0]
    rng = np.random.default_rng([seed, 0x7124])
    log = []
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo:lo + batch_size]
            report = gradient(model, (X[idx], y[idx]))
            model.set_params(model.get_params() - lr * report.full)
            losses.append(report.loss)
        log.append(float(np.mean(losses)))
    return model, log


def checkpoint_save(model: ModelHandle, path: str | Path) -> None:
    """Self-describing npz checkpoint: architecture header, parameters, masks."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "input_shape": list(model.input_shape),
        "n_classes": model.n_classes,
        "seed": model.seed,
        "classes": model.classes,
        "channels": list(model._build_kwargs["channels"]),
        "hidden": model._build_kwargs["hidden"],
        "n_params": model.n_params,
    }
    arrays = {"params": model.get_params()}
    for i, m in enumerate(model.get_mask_vectors()):
        arrays[f"mask{i}"] = m
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                 **arrays)


def checkpoint_load(path: str | Path) -> ModelHandle:
    """Rebuild a model from a checkpoint; raises CheckpointFormatError on mismatch."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            params = data["params"]
            masks = {k: data[k] for k in data.files if k.startswith("mask")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"unreadable checkpoint {path}: {exc}") from exc

    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path} is not a model checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {meta.get('version')}")
    if meta.get("arch") not in ARCHS:
        raise CheckpointFormatError(f"unknown architecture {meta.get('arch')!r} in {path}")

    model = ModelHandle(meta["arch"], tuple(meta["input_shape"]), meta["n_classes"],
                        meta["seed"], meta["classes"],
                        channels=tuple(meta["channels"]), hidden=meta["hidden"])
    if params.shape != (model.n_params,):
        raise CheckpointFormatError(
            f"parameter vector length {params.shape} does not match architecture "
            f"(expected {model.n_params})")
    model.set_params(params)
    try:
        model.set_mask_vectors([masks[f"mask{i}"] for i in range(len(model.conv_channels))])
    except (KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"mask vectors do not match architecture: {exc}") from exc
    return model
