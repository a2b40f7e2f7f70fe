import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslasr.corpus import AudioBuffer
from sslasr.errors import ConfigError
from sslasr.features import (
    LOG_FLOOR,
    EmptyFeatureError,
    FeatureConfig,
    FeatureMatrix,
    cmvn,
    fbank,
    hann_periodic,
    mel_filterbank,
    mfcc,
    num_frames,
    power_spectrogram,
)

CFG = FeatureConfig()


def _sine(k0, n=4000, amp=0.5):
    t = np.arange(n)
    return AudioBuffer(amp * np.sin(2 * np.pi * k0 * t / CFG.n_fft))


def test_power_of_silence_is_zero():
    assert not power_spectrogram(AudioBuffer(np.zeros(1600))).any()


def test_bin_centred_sine_matches_direct_dft():
    k0 = 25
    buf = _sine(k0)
    p = power_spectrogram(buf)
    # oracle: direct DFT sum of the first windowed frame
    frame = buf.samples[: CFG.n_fft] * hann_periodic(CFG.n_fft)
    n = np.arange(CFG.n_fft)
    direct = np.array([abs(np.sum(frame * np.exp(-2j * np.pi * k * n / CFG.n_fft))) ** 2
                       for k in range(CFG.n_fft // 2 + 1)])
    np.testing.assert_allclose(p[0], direct, rtol=1e-9, atol=1e-9)
    # a Hann window spreads a bin-centred tone over its 3-bin main lobe
    lobe = p[:, k0 - 1 : k0 + 2].sum(axis=1) / p.sum(axis=1)
    assert np.all(lobe >= 0.99)
    assert np.all(p.argmax(axis=1) == k0)


def test_parseval_per_frame():
    rng = np.random.default_rng(0)
    buf = AudioBuffer(rng.uniform(-0.5, 0.5, 3000))
    p = power_spectrogram(buf)
    weights = np.full(p.shape[1], 2.0)
    weights[0] = weights[-1] = 1.0
    frames = np.lib.stride_tricks.sliding_window_view(buf.samples, CFG.n_fft)[:: CFG.hop][: p.shape[0]]
    time_energy = ((frames * hann_periodic(CFG.n_fft)) ** 2).sum(axis=1) * CFG.n_fft
    np.testing.assert_allclose((p * weights).sum(axis=1), time_energy, rtol=1e-6)


def test_too_short_buffer():
    with pytest.raises(EmptyFeatureError):
        power_spectrogram(AudioBuffer(np.zeros(100)))


@given(st.integers(min_value=400, max_value=5000))
@settings(max_examples=30, deadline=None)
def test_frame_count_formula(n):
    p = power_spectrogram(AudioBuffer(np.ones(n) * 0.1))
    assert p.shape[0] == 1 + (n - 400) // 160 == num_frames(n, CFG)


def test_hop_shift_equals_row_shift():
    x = np.random.default_rng(1).uniform(-1, 1, 4000)
    a = power_spectrogram(AudioBuffer(x))
    b = power_spectrogram(AudioBuffer(x[CFG.hop :]))
    np.testing.assert_allclose(a[1 : 1 + b.shape[0]], b, rtol=1e-12, atol=1e-12)


def test_mel_filterbank_shape_and_shape_properties():
    fb = mel_filterbank(CFG, 16000)
    assert fb.shape == (80, 201)
    assert (fb >= 0).all()
    for row in fb:
        nz = np.flatnonzero(row)
        seg = row[nz[0] : nz[-1] + 1]
        peak = seg.argmax()
        assert np.all(np.diff(seg[: peak + 1]) >= 0) and np.all(np.diff(seg[peak:]) <= 0)
    assert np.all(np.diff(fb.argmax(axis=1)) >= 0)
    bins = np.arange(201) * 40.0
    interior = (bins > CFG.fmin) & (bins < 8000)
    assert np.all(fb[:, interior].sum(axis=0) > 0)


def test_mel_centre_frequencies_strictly_increase():
    from sslasr.features import hz_to_mel, mel_to_hz
    edges = mel_to_hz(np.linspace(hz_to_mel(20), hz_to_mel(8000), 82))
    assert np.all(np.diff(edges[1:-1]) > 0)


def test_mel_filterbank_too_many_filters():
    with pytest.raises(ConfigError):
        mel_filterbank(FeatureConfig(n_fft=64, hop=32, n_mels=80, n_mfcc=13), 16000)


def test_fbank_silence_and_rate():
    f = fbank(AudioBuffer(np.zeros(16000)))
    assert f.frames.shape == (98, 80)
    assert f.frame_rate == 100.0
    np.testing.assert_allclose(f.frames, math.log(LOG_FLOOR), rtol=1e-6)


def test_fbank_scaling_shifts_log_by_log4():
    x = np.random.default_rng(2).uniform(-0.4, 0.4, 8000)
    a = fbank(AudioBuffer(x)).frames.astype(np.float64)
    b = fbank(AudioBuffer(2 * x)).frames.astype(np.float64)
    above = a > math.log(LOG_FLOOR) + 10
    np.testing.assert_allclose((b - a)[above], math.log(4), atol=1e-4)


def test_fbank_finite_on_any_input():
    x = np.random.default_rng(3).choice([0.0, 1.0, -1.0], 3000)
    assert np.isfinite(fbank(AudioBuffer(x)).frames).all()


def _naive_dct(v):
    n = len(v)
    out = np.zeros(n)
    for k in range(n):
        s = sum(v[i] * math.cos(math.pi * (i + 0.5) * k / n) for i in range(n))
        out[k] = s * (math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n))
    return out


def test_mfcc_of_constant_frame():
    f = FeatureMatrix(np.full((2, 80), 3.0), 100.0, "fbank")
    c = mfcc(f, 13).frames.astype(np.float64)
    np.testing.assert_allclose(c[:, 0], 3.0 * math.sqrt(80), rtol=1e-6)
    np.testing.assert_allclose(c[:, 1:], 0.0, atol=1e-5)


def test_mfcc_matches_naive_dct_and_inverts():
    import scipy.fft
    v = np.random.default_rng(4).standard_normal(80)
    f = FeatureMatrix(v[None, :].astype(np.float64), 100.0, "fbank")
    full = scipy.fft.dct(f.frames, type=2, norm="ortho", axis=1)
    np.testing.assert_allclose(full[0], _naive_dct(v), atol=1e-9)
    np.testing.assert_allclose(scipy.fft.idct(full, type=2, norm="ortho", axis=1), f.frames, atol=1e-9)
    np.testing.assert_allclose(mfcc(f, 13).frames[0], _naive_dct(v)[:13], atol=1e-5)


def test_mfcc_errors():
    f = FeatureMatrix(np.zeros((2, 10)), 100.0, "fbank")
    with pytest.raises(ConfigError):
        mfcc(f, 11)
    with pytest.raises(ConfigError):
        mfcc(FeatureMatrix(np.zeros((2, 10)), 100.0, "mfcc"), 5)


def test_cmvn_properties():
    rng = np.random.default_rng(5)
    x = FeatureMatrix(rng.standard_normal((50, 6)) * 3 + 7, 100.0, "fbank")
    y = cmvn(x)
    assert np.all(np.abs(y.frames.astype(np.float64).mean(axis=0)) < 1e-6)
    again = cmvn(y)
    np.testing.assert_allclose(again.frames, y.frames, atol=1e-6)
    const = cmvn(FeatureMatrix(np.full((10, 3), 4.0), 100.0, "fbank"))
    assert not const.frames.any()
    with pytest.raises(ValueError):
        cmvn(FeatureMatrix(np.zeros((1, 3)), 100.0, "fbank"))


def test_cmvn_column_means_64bit():
    x = FeatureMatrix(np.random.default_rng(6).standard_normal((40, 5)) * 2 - 1, 100.0, "mfcc")
    y = cmvn(x)
    assert y.frames.dtype == np.float64
    assert np.all(np.abs(y.frames.mean(axis=0)) < 1e-9)
    np.testing.assert_allclose(cmvn(y).frames, y.frames, atol=1e-9)
