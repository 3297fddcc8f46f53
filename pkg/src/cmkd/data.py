"""Datasets: in-memory container, synthetic generator, WAV manifests, spectrogram cache."""
from __future__ import annotations

import csv
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .features import MULTI_LABEL, N_MELS, SINGLE_LABEL, TASKS, Waveform, compute_fbank

CACHE_MAGIC = b"CMKDSPEC"


@dataclass
class Dataset:
    specs: np.ndarray  # (n, 128, T) float32
    labels: np.ndarray  # (n, C) float32, hard targets
    task: str
    folds: np.ndarray | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if len(self.specs) != len(self.labels):
            raise ValueError("specs and labels disagree in length")

    def __len__(self):
        return len(self.specs)

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]

    @property
    def frames(self) -> int:
        return self.specs.shape[-1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        folds = None if self.folds is None else self.folds[idx]
        return Dataset(self.specs[idx], self.labels[idx], self.task, folds)

    def split(self, fractions, seed: int = 0) -> list["Dataset"]:
        """Random split by fractions (must sum to 1); deterministic in ``seed``."""
        order = np.random.default_rng(seed).permutation(len(self))
        cuts = np.cumsum([int(round(f * len(self))) for f in fractions[:-1]])
        return [self.subset(np.sort(part)) for part in np.split(order, cuts)]


def make_synthetic(n: int = 2000, num_classes: int = 10, frames: int = 100,
                   task: str = MULTI_LABEL, seed: int = 0, n_folds: int | None = None,
                   max_labels: int = 3, snr: float = 2.0) -> Dataset:
    """Separable spectrogram blobs.

    Each class owns a frequency band and a temporal modulation period; a clip
    is unit Gaussian background plus its active classes' patterns placed at a
    random time offset. Single-label clips carry exactly one class;
    multi-label clips carry 1..max_labels.
    """
    rng = np.random.default_rng(seed)
    centers = np.linspace(8, N_MELS - 8, num_classes)
    width = max(2.0, (N_MELS - 16) / num_classes / 2)
    periods = 4 + (np.arange(num_classes) * 7) % 13
    f = np.arange(N_MELS)[:, None]
    t = np.arange(frames)[None, :]

    specs = rng.normal(0.0, 1.0, size=(n, N_MELS, frames)).astype(np.float32)
    labels = np.zeros((n, num_classes), dtype=np.float32)
    for i in range(n):
        k = 1 if task == SINGLE_LABEL else int(rng.integers(1, max_labels + 1))
        active = rng.choice(num_classes, size=k, replace=False)
        labels[i, active] = 1.0
        for c in active:
            band = np.exp(-0.5 * ((f - centers[c]) / width) ** 2)
            phase = rng.uniform(0, 2 * np.pi)
            onset = int(rng.integers(0, frames // 2))
            env = (t >= onset) & (t < onset + frames // 2)
            pattern = 0.5 * (1 + np.cos(2 * np.pi * t / periods[c] + phase)) * env
            specs[i] += (snr * band * pattern).astype(np.float32)

    folds = None
    if n_folds:
        folds = np.arange(n) % n_folds + 1
        rng.shuffle(folds)
    return Dataset(specs, labels, task, folds)


# ------------------------------------------------------------ WAV ingest

def read_wav(path) -> Waveform:
    """16-bit PCM mono WAV → float waveform in [-1, 1)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM")
        raw = fh.readframes(fh.getnframes())
        rate = fh.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float32) / 32768.0
    return Waveform(samples, rate)


def write_wav(path, w: Waveform):
    pcm = np.clip(np.round(np.asarray(w.samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm.tobytes())


def parse_label_ids(field: str) -> list[int]:
    return [int(tok) for tok in field.replace(";", " ").split()]


def load_manifest(manifest, num_classes: int, task: str, root=None,
                  frames: int | None = None, cache_dir=None) -> Dataset:
    """Read a ``path,label_ids,fold`` CSV manifest of 16 kHz mono WAV files.

    ``label_ids`` is a ``;``-separated list of class indices. When
    ``cache_dir`` is given, computed spectrograms are stored there and reused.
    """
    manifest = Path(manifest)
    root = manifest.parent if root is None else Path(root)
    specs, labels, folds = [], [], []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            wav_path = root / row["path"]
            spec = None
            if cache_dir is not None:
                cached = Path(cache_dir) / (Path(row["path"]).with_suffix(".spec").name)
                if cached.exists():
                    spec = read_spec_cache(cached)
            if spec is None:
                spec = compute_fbank(read_wav(wav_path), target_frames=frames)
                if cache_dir is not None:
                    Path(cache_dir).mkdir(parents=True, exist_ok=True)
                    write_spec_cache(cached, spec)
            y = np.zeros(num_classes, dtype=np.float32)
            ids = parse_label_ids(row["label_ids"])
            if task == SINGLE_LABEL and len(ids) != 1:
                raise ValueError(f"{row['path']}: single-label task needs exactly one label")
            y[ids] = 1.0
            specs.append(spec)
            labels.append(y)
            folds.append(int(row["fold"]) if row.get("fold") not in (None, "") else 0)
    if not specs:
        raise ValueError(f"{manifest}: manifest is empty")
    lengths = {s.shape[1] for s in specs}
    if len(lengths) > 1:
        raise ValueError(f"clips differ in length {sorted(lengths)}; pass frames= to pad/trim")
    fold_arr = np.array(folds)
    return Dataset(np.stack(specs), np.stack(labels), task,
                   fold_arr if fold_arr.any() else None)


# ------------------------------------------------------ spectrogram cache

def write_spec_cache(path, spec: np.ndarray):
    """Flat binary: 8-byte magic, uint32 rows, uint32 cols, LE float32 data."""
    spec = np.ascontiguousarray(spec, dtype="<f4")
    rows, cols = spec.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(spec.tobytes())


def read_spec_cache(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(len(CACHE_MAGIC)) != CACHE_MAGIC:
            raise ValueError(f"{path}: not a spectrogram cache file")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated cache ({data.size} of {rows * cols} values)")
    return data.reshape(rows, cols).astype(np.float32)
