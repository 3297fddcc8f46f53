"""Log-mel front end and the training-time augmentations.

Spectrograms are plain ``numpy`` arrays shaped ``(n_mels, frames)``; batches
are ``(batch, n_mels, frames)``. Every random operation takes an explicit
``numpy.random.Generator`` so a fixed seed reproduces a batch bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

SAMPLE_RATE = 16000
N_MELS = 128
WINDOW_MS = 25
HOP_MS = 10
WIN_LENGTH = SAMPLE_RATE * WINDOW_MS // 1000  # 400 samples
HOP_LENGTH = SAMPLE_RATE * HOP_MS // 1000  # 160 samples
N_FFT = 512
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = math.log(1e-10)

SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"
TASKS = (SINGLE_LABEL, MULTI_LABEL)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AugmentSpec:
    """Augmentation magnitudes. Defaults are the FSD50K recipe."""

    freq_mask_max: int = 48
    time_mask_max: int = 192
    mixup_ratio: float = 0.5
    noise_amp_max: float = 0.05
    shift_max: int = 10
    label_smoothing: float = 0.1
    noise_mode: str = "per_clip"
    shift_wrap: bool = True
    mixup_alpha: float = 10.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("freq_mask_max", "time_mask_max", "noise_amp_max", "shift_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.mixup_ratio <= 1.0:
            raise ValueError("mixup_ratio must lie in [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")

    @classmethod
    def disabled(cls, **overrides) -> "AugmentSpec":
        """All magnitudes zero: every augmentation becomes an identity."""
        base = dict(freq_mask_max=0, time_mask_max=0, mixup_ratio=0.0,
                    noise_amp_max=0.0, shift_max=0, label_smoothing=0.0)
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------- fbank

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sample_rate=SAMPLE_RATE,
                   fmin=FMIN, fmax=FMAX) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape ``(n_mels, n_fft//2 + 1)``."""
    bin_mel = hz_to_mel(np.fft.rfftfreq(n_fft, d=1.0 / sample_rate))
    edges = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.maximum(0.0, np.minimum(up, down))


_FILTERBANK = mel_filterbank()
_WINDOW = np.hanning(WIN_LENGTH)


def compute_fbank(w: Waveform | np.ndarray, sample_rate: int | None = None,
                  target_frames: int | None = None) -> np.ndarray:
    """128-bin log-mel spectrogram, 25 ms Hanning window, 10 ms hop.

    The output has ``round(100 * duration)`` frames unless ``target_frames``
    is given; missing frames are padded with ``LOG_FLOOR`` and extra frames
    are trimmed from the tail.
    """
    if isinstance(w, Waveform):
        samples, sr = np.asarray(w.samples), w.sample_rate
    else:
        samples, sr = np.asarray(w), (SAMPLE_RATE if sample_rate is None else sample_rate)
    if samples.size == 0:
        raise ValueError("empty input")
    if sr != SAMPLE_RATE:
        raise ValueError(f"unsupported sample rate: {sr} (expected {SAMPLE_RATE})")
    samples = samples.astype(np.float64).reshape(-1)
    if target_frames is None:
        target_frames = int(round(samples.size * 1000 / (sr * HOP_MS)))

    if samples.size >= WIN_LENGTH:
        n = 1 + (samples.size - WIN_LENGTH) // HOP_LENGTH
        idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
        frames = samples[idx] * _WINDOW
        power = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2
        logmel = np.log(np.maximum(power @ _FILTERBANK.T, 1e-10)).T
    else:
        logmel = np.empty((N_MELS, 0))
    return pad_or_trim(logmel, target_frames).astype(np.float32)


def pad_or_trim(spec: np.ndarray, frames: int, fill: float = LOG_FLOOR) -> np.ndarray:
    have = spec.shape[-1]
    if have >= frames:
        return spec[..., :frames]
    pad = np.full(spec.shape[:-1] + (frames - have,), fill, dtype=spec.dtype)
    return np.concatenate([spec, pad], axis=-1)


# --------------------------------------------------------- augmentations

AXES = {"freq": 0, "time": 1}
NOISE_MODES = ("per_clip", "direct")


def apply_mask(spec: np.ndarray, axis: str, start: int, width: int,
               fill: float | None = None) -> np.ndarray:
    out = spec.copy()
    if width == 0:
        return out
    if fill is None:
        fill = spec.mean()
    sl = [slice(None), slice(None)]
    sl[AXES[axis]] = slice(start, start + width)
    out[tuple(sl)] = fill
    return out


def mask(spec: np.ndarray, axis: str, max_width: int, rng: np.random.Generator) -> np.ndarray:
    """SpecAugment-style mask: one contiguous band filled with the clip mean."""
    if axis not in AXES:
        raise ValueError(f"axis must be 'freq' or 'time', got {axis!r}")
    length = spec.shape[AXES[axis]]
    if max_width > length:
        raise ValueError(f"mask wider than axis ({max_width} > {length})")
    width = int(rng.integers(0, max_width + 1))
    start = int(rng.integers(0, length - width + 1))
    return apply_mask(spec, axis, start, width)


def roll_time(spec: np.ndarray, shift: int, wrap: bool = True) -> np.ndarray:
    if wrap:
        return np.roll(spec, shift, axis=-1)
    out = np.zeros_like(spec)
    if shift > 0:
        out[..., shift:] = spec[..., :-shift]
    elif shift < 0:
        out[..., :shift] = spec[..., -shift:]
    else:
        out[...] = spec
    return out


def time_shift(spec: np.ndarray, shift_max: int, rng: np.random.Generator,
               wrap: bool = True) -> np.ndarray:
    """Roll along time by an integer drawn from [-shift_max, shift_max]."""
    frames = spec.shape[-1]
    if shift_max >= frames:
        raise ValueError(f"shift_max ({shift_max}) must be smaller than the frame count ({frames})")
    shift = int(rng.integers(-shift_max, shift_max + 1))
    return roll_time(spec, shift, wrap)


def add_noise(spec: np.ndarray, amp_max: float, rng: np.random.Generator,
              mode: str = "per_clip") -> np.ndarray:
    """Add non-negative uniform noise bounded by ``amp_max``.

    ``per_clip`` draws one amplitude a ~ U(0, amp_max) per clip and scales
    i.i.d. U(0, 1) entries by it; ``direct`` draws i.i.d. U(0, amp_max).
    """
    if amp_max < 0:
        raise ValueError("amp_max must be >= 0")
    if mode == "per_clip":
        a = rng.uniform(0.0, amp_max)
        noise = a * rng.random(spec.shape)
    elif mode == "direct":
        noise = rng.uniform(0.0, amp_max, size=spec.shape) if amp_max > 0 else np.zeros(spec.shape)
    else:
        raise ValueError(f"unknown noise mode {mode!r}")
    if amp_max == 0:
        return spec.copy()
    return (spec + noise).astype(spec.dtype)


def mixup(a, b, weight: float):
    """Blend two (spectrogram, target) pairs: ``weight * a + (1 - weight) * b``."""
    spec_a, y_a = a
    spec_b, y_b = b
    if np.shape(spec_a) != np.shape(spec_b):
        raise ValueError(f"spectrogram shape mismatch: {np.shape(spec_a)} vs {np.shape(spec_b)}")
    if np.shape(y_a) != np.shape(y_b):
        raise ValueError(f"label shape mismatch: {np.shape(y_a)} vs {np.shape(y_b)}")
    if not 0.0 <= weight <= 1.0:
        raise ValueError("mixup weight must lie in [0, 1]")
    if weight == 1.0:
        return np.array(spec_a, copy=True), np.array(y_a, copy=True)
    spec = weight * spec_a + (1.0 - weight) * spec_b
    y = weight * y_a + (1.0 - weight) * y_b
    return spec.astype(np.asarray(spec_a).dtype), y.astype(np.asarray(y_a).dtype)


def mixup_batch(specs: np.ndarray, labels: np.ndarray, ratio: float,
                rng: np.random.Generator, alpha: float = 10.0):
    """Mix a ``ratio`` fraction of the batch with random partners.

    Each sample is selected independently with probability ``ratio``; the
    mixing weight is drawn from Beta(alpha, alpha). Returns the new batch and
    a boolean array flagging the mixed samples.
    """
    n = len(specs)
    specs, labels = specs.copy(), labels.copy()
    chosen = rng.random(n) < ratio
    partners = rng.integers(0, n, size=n)
    weights = rng.beta(alpha, alpha, size=n)
    src_specs, src_labels = specs.copy(), labels.copy()
    for i in np.flatnonzero(chosen):
        j = partners[i]
        specs[i], labels[i] = mixup((src_specs[i], src_labels[i]),
                                    (src_specs[j], src_labels[j]), float(weights[i]))
    return specs, labels, chosen


def smooth_labels(y: np.ndarray, eps: float, task: str) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    y = np.asarray(y)
    if eps == 0:
        return y.copy()
    if task == SINGLE_LABEL:
        return (y * (1.0 - eps) + eps / y.shape[-1]).astype(y.dtype)
    if task == MULTI_LABEL:
        return (y * (1.0 - eps) + eps / 2.0).astype(y.dtype)
    raise ValueError(f"unknown task {task!r}")


def augment_batch(specs: np.ndarray, labels: np.ndarray, aug: AugmentSpec, task: str,
                  rng: np.random.Generator):
    """Full training-time pipeline for one batch.

    Order: label smoothing, mixup, frequency mask, time mask, time shift,
    noise. Returns ``(augmented_specs, targets)``; inputs are not modified.
    """
    targets = smooth_labels(labels, aug.label_smoothing, task)
    out, targets, _ = mixup_batch(specs, targets, aug.mixup_ratio, rng, aug.mixup_alpha)
    for i in range(len(out)):
        x = mask(out[i], "freq", aug.freq_mask_max, rng)
        x = mask(x, "time", aug.time_mask_max, rng)
        x = time_shift(x, aug.shift_max, rng, wrap=aug.shift_wrap)
        out[i] = add_noise(x, aug.noise_amp_max, rng, mode=aug.noise_mode)
    return out, targets
