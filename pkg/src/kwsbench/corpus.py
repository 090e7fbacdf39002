"""Keyword-audio corpora: synthetic generation, directory loading, MFCC features, splits.

All functions here are pure and deterministic given their seeds; randomness is
derived per sample (never from global state), so results do not depend on
iteration or thread order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

MANIFEST_FORMAT = "kwsbench-manifest"
MANIFEST_VERSION = 1

# log-mel floor; keeps all-zero frames finite
_LOG_FLOOR = 1e-10


class StratificationError(ValueError):
    """A class has too few samples to be split across train and test."""


@dataclass
class AudioSample:
    """A labeled mono waveform. Values live in [-1, 1]."""

    waveform: np.ndarray
    sample_rate: int
    label: str
    id: str
    source: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.waveform = np.asarray(self.waveform, dtype=np.float64)
        if self.waveform.ndim != 1 or self.waveform.size == 0:
            raise ValueError(f"waveform must be a nonempty 1-D array (sample {self.id!r})")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.waveform)))
        if peak > 1.0 + 1e-9:
            raise ValueError(f"waveform exceeds [-1, 1] (peak {peak:.4f}, sample {self.id!r})")


@dataclass
class FeatureMap:
    """2-D MFCC array of shape [n_mfcc, n_frames]; the model input."""

    values: np.ndarray
    label: str
    sample_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("feature map must be 2-D [n_mfcc, n_frames]")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"feature map contains non-finite values (sample {self.sample_id!r})")

    @property
    def n_mfcc(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MfccConfig:
    """MFCC extraction parameters. Defaults give a 40x32 canvas at 16 kHz."""

    n_mfcc: int = 40
    frame_len: int = 400  # 25 ms at 16 kHz
    hop: int = 160  # 10 ms at 16 kHz
    n_frames: int = 32

    def __post_init__(self):
        for name in ("n_mfcc", "frame_len", "hop", "n_frames"):
            if getattr(self, name) <= 0:
                raise ValueError(f"mfcc.{name} must be positive, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {
            "n_mfcc": self.n_mfcc,
            "frame_len": self.frame_len,
            "hop": self.hop,
            "n_frames": self.n_frames,
        }


@dataclass
class DatasetSplit:
    """Train/test split plus the defender's small clean subset (drawn from train)."""

    train: list[AudioSample]
    test: list[AudioSample]
    clean_defense: list[AudioSample]
    seed: int

    @property
    def classes(self) -> list[str]:
        return sorted({s.label for s in self.train} | {s.label for s in self.test})


def _synth_waveform(seed: int, n_classes: int, class_index: int, sample_index: int,
                    sample_rate: int, duration: float) -> np.ndarray:
    """Deterministic per-sample waveform: a harmonic tone/chirp family per class.

    Class identity is carried by a geometrically spaced fundamental, a
    class-dependent harmonic amplitude pattern, and a mild chirp rate; the
    per-sample rng adds phase, detuning, level, and noise at 20 dB SNR.
    """
    rng = np.random.default_rng([seed, 0x5A17, class_index, sample_index])
    n = int(round(sample_rate * duration))
    t = np.arange(n, dtype=np.float64) / sample_rate

    if n_classes > 1:
        f0 = 300.0 * (2400.0 / 300.0) ** (class_index / (n_classes - 1))
    else:
        f0 = 440.0
    chirp = 0.06 * ((class_index % 3) - 1)  # fractional drift over the clip
    harmonics = (1.0, 0.55 if class_index % 2 == 0 else 0.2, 0.3 if class_index % 4 < 2 else 0.1)

    detune = rng.uniform(0.985, 1.015)
    amp = rng.uniform(0.35, 0.55)
    x = np.zeros(n)
    for h, a in enumerate(harmonics, start=1):
        phase = rng.uniform(0.0, 2.0 * math.pi)
        inst = f0 * detune * h * (t + 0.5 * chirp * t * t / max(duration, 1e-9))
        x += a * np.sin(2.0 * math.pi * inst + phase)
    x *= amp / np.max(np.abs(x))

    snr = 10.0 ** (20.0 / 20.0)
    sigma = float(np.sqrt(np.mean(x * x))) / snr
    x += rng.normal(0.0, sigma, size=n)
    return np.clip(x, -1.0, 1.0)


def generate_synthetic_corpus(n_classes: int, n_per_class: int, seed: int,
                              sample_rate: int = 16000, duration: float = 1.0
                              ) -> list[AudioSample]:
    """Build a deterministic keyword-like corpus with one tone/chirp family per class."""
    if n_classes < 2:
        raise ValueError(f"n_classes must be >= 2, got {n_classes}")
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if sample_rate <= 0:
        raise ValueError(f"sample_rate must be positive, got {sample_rate}")

    samples = []
    for k in range(n_classes):
        label = f"class{k}"
        for i in range(n_per_class):
            wav = _synth_waveform(seed, n_classes, k, i, sample_rate, duration)
            source = {
                "kind": "synthetic",
                "seed": seed,
                "n_classes": n_classes,
                "class_index": k,
                "sample_index": i,
                "sample_rate": sample_rate,
                "duration": duration,
            }
            samples.append(AudioSample(wav, sample_rate, label, f"{label}_{i:04d}", source))
    return samples


def load_directory_corpus(root_path: str | Path) -> list[AudioSample]:
    """Load a <root>/<class_name>/<file>.wav corpus of 16-bit PCM mono files.

    Samples are ordered by path, labels are the directory names.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"corpus root has no class subdirectories: {root}")

    samples = []
    for class_dir in class_dirs:
        for wav_path in sorted(class_dir.glob("*.wav")):
            try:
                rate, data = wavfile.read(wav_path)
            except Exception as exc:
                raise OSError(f"unreadable wav file: {wav_path}") from exc
            if data.ndim != 1:
                raise ValueError(f"non-mono wav file: {wav_path}")
            if data.dtype != np.int16:
                raise ValueError(f"expected 16-bit PCM, got {data.dtype}: {wav_path}")
            wav = data.astype(np.float64) / 32768.0
            rel = wav_path.relative_to(root).as_posix()
            samples.append(AudioSample(wav, int(rate), class_dir.name, rel,
                                       {"kind": "file", "path": str(wav_path)}))
    if not samples:
        raise FileNotFoundError(f"no wav files found under {root}")
    return samples


def _mel_filterbank(n_mels: int, frame_len: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filters over the rfft bins of a frame."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    freqs = np.fft.rfftfreq(frame_len, d=1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / max(mid - lo, 1e-12)
        down = (hi - freqs) / max(hi - mid, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def extract_mfcc(sample: AudioSample, n_mfcc: int = 40, frame_len: int = 400,
                 hop: int = 160, n_frames_target: int = 32) -> FeatureMap:
    """Standard MFCC: Hann-windowed power spectra, mel filterbank, log, DCT-II.

    The waveform is zero-padded or truncated so the output is always exactly
    [n_mfcc, n_frames_target].
    """
    if n_mfcc <= 0 or frame_len <= 0 or hop <= 0 or n_frames_target <= 0:
        raise ValueError("mfcc parameters must all be positive")

    needed = frame_len + (n_frames_target - 1) * hop
    wav = sample.waveform
    if wav.size < needed:
        wav = np.concatenate([wav, np.zeros(needed - wav.size)])
    else:
        wav = wav[:needed]

    idx = np.arange(frame_len)[None, :] + hop * np.arange(n_frames_target)[:, None]
    frames = wav[idx]
    window = 0.5 - 0.5 * np.cos(2.0 * math.pi * np.arange(frame_len) / frame_len)
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2

    fb = _mel_filterbank(n_mfcc, frame_len, sample.sample_rate)
    logmel = np.log(np.maximum(power @ fb.T, _LOG_FLOOR))
    coeffs = dct(logmel, type=2, norm="ortho", axis=1)  # [n_frames, n_mfcc]
    return FeatureMap(coeffs.T.copy(), sample.label, sample.id)


def featurize(samples: list[AudioSample], mfcc: MfccConfig = MfccConfig()) -> list[FeatureMap]:
    """Extract MFCC feature maps for every sample, preserving order."""
    return [extract_mfcc(s, mfcc.n_mfcc, mfcc.frame_len, mfcc.hop, mfcc.n_frames)
            for s in samples]


def _largest_remainder(target: int, weights: list[int], keys: list[str]) -> list[int]:
    """Integer allocation of `target` proportional to `weights`, ties by key order."""
    total = sum(weights)
    quotas = [target * w / total for w in weights]
    counts = [int(math.floor(q)) for q in quotas]
    short = target - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), keys[i]))
    for i in order[:short]:
        counts[i] += 1
    return counts


def make_splits(corpus: list[AudioSample], test_frac: float, clean_ratio: float,
                seed: int) -> DatasetSplit:
    """Stratified train/test split plus a stratified clean defense subset of train."""
    if not 0.0 < test_frac < 1.0:
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")
    if not 0.0 < clean_ratio <= 1.0:
        raise ValueError(f"clean_ratio must be in (0, 1], got {clean_ratio}")
    if not corpus:
        raise ValueError("corpus is empty")

    by_class: dict[str, list[AudioSample]] = {}
    for s in corpus:
        by_class.setdefault(s.label, []).append(s)
    for label, members in by_class.items():
        if len(members) < 2:
            raise StratificationError(
                f"class {label!r} has {len(members)} sample(s); need at least 2 to split")

    labels = sorted(by_class)
    rng = np.random.default_rng([seed, 0x51AB])
    train: list[AudioSample] = []
    test: list[AudioSample] = []
    train_by_class: dict[str, list[AudioSample]] = {}
    for label in labels:
        members = by_class[label]
        order = rng.permutation(len(members))
        n_test = min(max(int(round(len(members) * test_frac)), 1), len(members) - 1)
        shuffled = [members[i] for i in order]
        test.extend(shuffled[:n_test])
        train_by_class[label] = shuffled[n_test:]
        train.extend(shuffled[n_test:])

    n_train = len(train)
    target = int(round(clean_ratio * n_train))
    counts = _largest_remainder(target, [len(train_by_class[c]) for c in labels], labels)
    clean: list[AudioSample] = []
    for label, k in zip(labels, counts):
        members = train_by_class[label]
        order = rng.permutation(len(members))
        clean.extend(members[i] for i in order[:k])
    return DatasetSplit(train, test, clean, seed)


def save_manifest(split: DatasetSplit, path: str | Path) -> None:
    """Write the split as a line-oriented JSON manifest (one record per sample).

    Line 1 is a header; each following line holds id, label, split membership,
    the clean-defense flag, and the sample's source (file path or synthetic
    generator parameters) so the corpus can be rebuilt bit-exactly.
    """
    clean_ids = {s.id for s in split.clean_defense}
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": split.seed,
            "n_train": len(split.train),
            "n_test": len(split.test),
            "n_clean_defense": len(split.clean_defense),
        }
        fh.write(json.dumps(header) + "\n")
        for part, members in (("train", split.train), ("test", split.test)):
            for s in members:
                record = {
                    "id": s.id,
                    "label": s.label,
                    "split": part,
                    "clean_defense": s.id in clean_ids,
                    "source": s.source,
                }
                fh.write(json.dumps(record) + "\n")


def _sample_from_source(record: dict) -> AudioSample:
    src = record.get("source") or {}
    kind = src.get("kind")
    if kind == "synthetic":
        wav = _synth_waveform(src["seed"], src["n_classes"], src["class_index"],
                              src["sample_index"], src["sample_rate"], src["duration"])
        return AudioSample(wav, src["sample_rate"], record["label"], record["id"], src)
    if kind == "file":
        rate, data = wavfile.read(src["path"])
        if data.ndim != 1:
            raise ValueError(f"non-mono wav file: {src['path']}")
        wav = data.astype(np.float64) / 32768.0
        return AudioSample(wav, int(rate), record["label"], record["id"], src)
    raise ValueError(f"unknown sample source kind: {kind!r}")


def load_manifest(path: str | Path) -> DatasetSplit:
    """Rebuild a DatasetSplit from a manifest written by save_manifest."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"empty manifest: {path}")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"not a corpus manifest: {path}")
    if header.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {header.get('version')}: {path}")

    train: list[AudioSample] = []
    test: list[AudioSample] = []
    clean: list[AudioSample] = []
    for line in lines[1:]:
        record = json.loads(line)
        sample = _sample_from_source(record)
        if record["split"] == "train":
            train.append(sample)
        elif record["split"] == "test":
            test.append(sample)
        else:
            raise ValueError(f"unknown split token {record['split']!r} in {path}")
        if record.get("clean_defense"):
            clean.append(sample)
    return DatasetSplit(train, test, clean, int(header.get("seed", 0)))
