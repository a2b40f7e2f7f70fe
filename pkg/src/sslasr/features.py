"""Spectral front-end: power spectrogram, log-mel Fbank, MFCC and CMVN."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.fft

from .corpus import AudioBuffer
from .errors import ConfigError

LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8


class EmptyFeatureError(ValueError):
    """Input is too short to yield a single analysis frame."""


@dataclass(frozen=True)
class FeatureConfig:
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 80
    fmin: float = 20.0
    fmax: Optional[float] = None  # None -> Nyquist
    n_mfcc: int = 13
    dither: float = 0.0

    def validate(self, sample_rate: int = 16000) -> None:
        fmax = self.fmax if self.fmax is not None else sample_rate / 2
        if not 0 < self.hop <= self.n_fft:
            raise ConfigError("need 0 < hop <= n_fft")
        if not 0 <= self.fmin < fmax <= sample_rate / 2:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate / 2")
        if not 0 < self.n_mfcc <= self.n_mels:
            raise ConfigError("need 0 < n_mfcc <= n_mels")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, D)
    frame_rate: float
    kind: str  # fbank | mfcc | latent

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def num_frames(n_samples: int, cfg: FeatureConfig) -> int:
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    if x.size < cfg.n_fft:
        raise EmptyFeatureError(f"{x.size} samples is shorter than one {cfg.n_fft}-sample frame")
    n = num_frames(x.size, cfg)
    return np.lib.stride_tricks.sliding_window_view(x, cfg.n_fft)[:: cfg.hop][:n]


def power_spectrogram(buf: AudioBuffer, cfg: FeatureConfig = FeatureConfig(),
                      rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """|DFT|^2 of Hann-windowed frames, shape (T, n_fft // 2 + 1)."""
    x = buf.samples
    if cfg.dither:
        rng = rng or np.random.default_rng(0)
        x = x + cfg.dither * rng.standard_normal(x.size)
    frames = frame_signal(x, cfg) * hann_periodic(cfg.n_fft)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig = FeatureConfig(), sample_rate: int = 16000) -> np.ndarray:
    """Triangular mel filters, shape (n_mels, n_fft // 2 + 1)."""
    cfg.validate(sample_rate)
    fmax = cfg.fmax if cfg.fmax is not None else sample_rate / 2
    n_bins = cfg.n_fft // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz[None, :] - lo) / (mid - lo)
    falling = (hi - bin_hz[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ConfigError(
            f"n_mels={cfg.n_mels} too large for n_fft={cfg.n_fft}: filters {empty.tolist()} cover no FFT bin"
        )
    return fb


def fbank(buf: AudioBuffer, cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Log-mel filterbank energies with a 1e-10 floor."""
    power = power_spectrogram(buf, cfg)
    mel = power @ mel_filterbank(cfg, buf.sample_rate).T
    return FeatureMatrix(np.log(mel + LOG_FLOOR).astype(np.float32), buf.sample_rate / cfg.hop, "fbank")


def mfcc(feats: FeatureMatrix, n_mfcc: int = 13) -> FeatureMatrix:
    """First ``n_mfcc`` orthonormal DCT-II coefficients of each Fbank frame."""
    if feats.kind != "fbank":
        raise ConfigError(f"mfcc expects fbank input, got {feats.kind}")
    if not 0 < n_mfcc <= feats.dim:
        raise ConfigError(f"n_mfcc={n_mfcc} exceeds {feats.dim} mel channels")
    c = scipy.fft.dct(feats.frames.astype(np.float64), type=2, norm="ortho", axis=1)[:, :n_mfcc]
    return FeatureMatrix(c.astype(np.float32), feats.frame_rate, "mfcc")


def cmvn(feats: FeatureMatrix) -> FeatureMatrix:
    """Per-utterance mean and variance normalisation of every dimension."""
    if feats.num_frames < 2:
        raise ValueError("cmvn needs at least two frames")
    x = feats.frames.astype(np.float64)
    mu = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), VAR_FLOOR)
    out = (x - mu) / np.sqrt(var)
    return FeatureMatrix(out.astype(feats.frames.dtype), feats.frame_rate, feats.kind)


def compute(buf: AudioBuffer, kind: str = "fbank", cfg: FeatureConfig = FeatureConfig()) -> FeatureMatrix:
    """Spectral features of ``kind`` (fbank or mfcc) for one buffer."""
    fb = fbank(buf, cfg)
    if kind == "fbank":
        return fb
    if kind == "mfcc":
        return mfcc(fb, cfg.n_mfcc)
    raise ConfigError(f"unknown spectral feature kind {kind!r}")
