import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmkd import features as F
from cmkd.features import MULTI_LABEL, SINGLE_LABEL


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture
def spec():
    return rng(1).normal(size=(128, 1000)).astype(np.float32)


# ------------------------------------------------------------------ fbank

@pytest.mark.parametrize("seconds", [1, 10])
def test_fbank_shape(seconds):
    w = F.Waveform(rng().normal(size=16000 * seconds) * 0.1)
    out = F.compute_fbank(w)
    assert out.shape == (128, 100 * seconds)
    assert np.isfinite(out).all()


def test_fbank_silence_is_log_floor():
    out = F.compute_fbank(F.Waveform(np.zeros(16000)))
    assert np.all(out == np.float32(F.LOG_FLOOR))


def test_fbank_deterministic():
    x = rng(3).normal(size=32000)
    assert np.array_equal(F.compute_fbank(x), F.compute_fbank(x))


def test_fbank_tone_lands_in_right_band():
    t = np.arange(16000) / 16000
    out = F.compute_fbank(np.sin(2 * np.pi * 1000 * t))
    peak = out[:, 50].argmax()
    centers = F.mel_to_hz(np.linspace(F.hz_to_mel(0), F.hz_to_mel(8000), 130)[1:-1])
    assert abs(centers[peak] - 1000) < 100


def test_fbank_pad_and_trim():
    x = rng().normal(size=16000)
    assert F.compute_fbank(x, target_frames=150).shape == (128, 150)
    assert F.compute_fbank(x, target_frames=40).shape == (128, 40)
    padded = F.compute_fbank(x, target_frames=150)
    assert np.all(padded[:, 100:] == np.float32(F.LOG_FLOOR))


def test_fbank_errors():
    with pytest.raises(ValueError, match="empty input"):
        F.compute_fbank(np.zeros(0))
    with pytest.raises(ValueError, match="unsupported sample rate"):
        F.compute_fbank(F.Waveform(np.zeros(44100), 44100))


# ------------------------------------------------------------------ masks

def test_mask_zero_width_identity(spec):
    assert np.array_equal(F.mask(spec, "freq", 0, rng()), spec)


def test_mask_single_band_and_rest_untouched(spec):
    for seed in range(50):
        out = F.mask(spec, "freq", 48, rng(seed))
        changed = np.flatnonzero((out != spec).any(axis=1))
        if len(changed):
            assert changed.max() - changed.min() + 1 <= 48
            assert np.all(out[changed] == spec.mean())
        untouched = np.setdiff1d(np.arange(128), changed)
        assert np.array_equal(out[untouched], spec[untouched])


def test_mask_time_axis(spec):
    out = F.mask(spec, "time", 192, rng(5))
    changed = np.flatnonzero((out != spec).any(axis=0))
    assert len(changed) <= 192
    if len(changed):
        assert np.array_equal(changed, np.arange(changed.min(), changed.max() + 1))


def test_mask_reproducible(spec):
    assert np.array_equal(F.mask(spec, "time", 192, rng(7)), F.mask(spec, "time", 192, rng(7)))


def test_mask_too_wide(spec):
    with pytest.raises(ValueError, match="mask wider than axis"):
        F.mask(spec, "freq", 129, rng())


# ------------------------------------------------------------- time shift

def test_roll_index_relation(spec):
    out = F.roll_time(spec, 10)
    j = np.arange(1000)
    assert np.array_equal(out[:, j], spec[:, (j - 10) % 1000])


def test_shift_zero_identity(spec):
    assert np.array_equal(F.time_shift(spec, 0, rng()), spec)


def test_shift_draws_within_bounds():
    r = rng(11)
    draws = [int(r.integers(-10, 11)) for _ in range(10_000)]
    assert min(draws) == -10 and max(draws) == 10
    x = np.arange(100, dtype=float)[None, :].repeat(2, 0)
    for seed in range(200):
        out = F.time_shift(x, 10, rng(seed))
        shift = int((out[0, 0] * -1) % 100)
        assert shift <= 10 or shift >= 90


def test_shift_preserves_columns(spec):
    out = F.time_shift(spec, 10, rng(2))
    a = sorted(col.tobytes() for col in spec.T)
    b = sorted(col.tobytes() for col in out.T)
    assert a == b


def test_shift_too_large(spec):
    with pytest.raises(ValueError):
        F.time_shift(spec, 1000, rng())


def test_shift_no_wrap_zero_fills():
    x = np.ones((2, 20))
    out = F.roll_time(x, 3, wrap=False)
    assert np.all(out[:, :3] == 0) and np.all(out[:, 3:] == 1)


# ------------------------------------------------------------------ noise

def test_noise_zero_identity(spec):
    assert np.array_equal(F.add_noise(spec, 0.0, rng()), spec)


@pytest.mark.parametrize("mode", F.NOISE_MODES)
def test_noise_bounded(spec, mode):
    for seed in range(20):
        d = F.add_noise(spec.astype(np.float64), 0.05, rng(seed), mode=mode) - spec
        assert d.min() >= 0.0 and d.max() <= 0.05


def test_noise_monte_carlo_mean():
    # E[a * U] = (0.05 / 2) * (1 / 2); averaged over 10^4 clips of 100 entries
    r = rng(4)
    zeros = np.zeros(100)
    total = np.array([F.add_noise(zeros, 0.05, r).mean() for _ in range(10_000)])
    # per-clip mean is a * mean(U_100): Var = E[a^2] E[Ubar^2] - (E[a] E[Ubar])^2
    var_clip = (0.05 ** 2 / 3) * (0.25 + 1 / 1200) - (0.05 / 4) ** 2
    sigma = np.sqrt(var_clip / 10_000)
    assert abs(total.mean() - 0.0125) < 3 * sigma


# ------------------------------------------------------------------ mixup

def test_mixup_weight_one_returns_a():
    a = (np.ones((4, 4)), np.array([1.0, 0.0]))
    b = (np.zeros((4, 4)), np.array([0.0, 1.0]))
    s, y = F.mixup(a, b, 1.0)
    assert np.array_equal(s, a[0]) and np.array_equal(y, a[1])


def test_mixup_half_labels():
    _, y = F.mixup((np.zeros(3), np.array([1.0, 0.0])), (np.zeros(3), np.array([0.0, 1.0])), 0.5)
    assert np.allclose(y, [0.5, 0.5])


def test_mixup_shape_mismatch():
    with pytest.raises(ValueError):
        F.mixup((np.zeros(3), np.zeros(2)), (np.zeros(4), np.zeros(2)), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2**31))
def test_mixup_convex(w, seed):
    r = rng(seed)
    a, b = r.normal(size=(8, 8)), r.normal(size=(8, 8))
    s, _ = F.mixup((a, np.zeros(2)), (b, np.zeros(2)), w)
    assert np.all(s >= np.minimum(a, b) - 1e-12) and np.all(s <= np.maximum(a, b) + 1e-12)


def test_mixup_batch_ratio():
    specs = np.zeros((1000, 2, 2))
    labels = np.eye(2)[np.arange(1000) % 2]
    _, _, chosen = F.mixup_batch(specs, labels, 0.5, rng(0))
    # binomial(1000, 0.5): 3 sigma is ~47
    assert abs(chosen.sum() - 500) < 50


# -------------------------------------------------------------- smoothing

def test_smoothing_identity():
    y = np.eye(5)[2]
    assert np.array_equal(F.smooth_labels(y, 0.0, SINGLE_LABEL), y)


def test_smoothing_single_label_values():
    y = F.smooth_labels(np.eye(50)[3], 0.1, SINGLE_LABEL)
    assert y[3] == pytest.approx(0.902)
    assert np.allclose(np.delete(y, 3), 0.002)
    assert y.sum() == pytest.approx(1.0)


def test_smoothing_multi_label_values():
    y = F.smooth_labels(np.array([1.0, 0.0, 1.0]), 0.1, MULTI_LABEL)
    assert np.allclose(y, [0.95, 0.05, 0.95])


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.3, 0.5])
def test_smoothing_keeps_argmax(eps):
    for c in range(10):
        assert F.smooth_labels(np.eye(10)[c], eps, SINGLE_LABEL).argmax() == c


def test_smoothing_rejects_eps_one():
    with pytest.raises(ValueError):
        F.smooth_labels(np.eye(3)[0], 1.0, SINGLE_LABEL)


# ----------------------------------------------------------- batch policy

def test_disabled_augment_is_identity():
    specs = rng().normal(size=(6, 128, 100)).astype(np.float32)
    labels = np.eye(4, dtype=np.float32)[[0, 1, 2, 3, 0, 1]]
    out, y = F.augment_batch(specs, labels, F.AugmentSpec.disabled(), MULTI_LABEL, rng())
    assert np.array_equal(out, specs) and np.array_equal(y, labels)


def test_augment_batch_reproducible():
    specs = rng().normal(size=(6, 128, 100)).astype(np.float32)
    labels = np.eye(4, dtype=np.float32)[[0, 1, 2, 3, 0, 1]]
    aug = F.AugmentSpec(freq_mask_max=24, time_mask_max=48)
    a = F.augment_batch(specs, labels, aug, MULTI_LABEL, rng(9))
    b = F.augment_batch(specs, labels, aug, MULTI_LABEL, rng(9))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_table_defaults():
    aug = F.AugmentSpec()
    assert (aug.freq_mask_max, aug.time_mask_max) == (48, 192)
    assert aug.mixup_ratio == 0.5 and aug.noise_amp_max == 0.05
    assert aug.shift_max == 10 and aug.label_smoothing == 0.1
