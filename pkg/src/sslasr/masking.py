"""Span masking of Fbank frames and rate conversion of masks and labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import ConfigError


@dataclass(frozen=True)
class MaskConfig:
    span_frames: int = 10
    start_prob: float = 0.08

    def __post_init__(self):
        if self.span_frames < 1:
            raise ConfigError("span_frames must be >= 1")
        if not 0.0 <= self.start_prob <= 1.0:
            raise ConfigError("start_prob must lie in [0, 1]")


def sample_mask(T: int, cfg: MaskConfig, rng: np.random.Generator) -> np.ndarray:
    """Each frame starts a span with probability ``start_prob``; spans are unioned."""
    if T < 1:
        raise ValueError("T must be >= 1")
    starts = rng.random(T) < cfg.start_prob
    return _kernels.spans_from_starts(starts, cfg.span_frames)


def rate_ratio(r_from: float, r_to: float) -> int:
    """Integer factor between two rates, positive when ``r_from`` is finer."""
    if r_from >= r_to:
        q = r_from / r_to
        sign = 1
    else:
        q = r_to / r_from
        sign = -1
    k = int(round(q))
    if k < 1 or abs(q - k) > 1e-6 * q:
        raise ConfigError(f"rates {r_from} and {r_to} are not integer multiples")
    return sign * k


def reduce_mask(mask, k: int, n_out: Optional[int] = None) -> np.ndarray:
    """Output frame j is masked when at least half of its ``k`` frames are."""
    mask = np.asarray(mask, dtype=bool)
    T = mask.shape[0]
    n = -(-T // k)
    padded = np.zeros(n * k, dtype=np.int64)
    padded[:T] = mask
    hits = padded.reshape(n, k).sum(axis=1)
    cover = np.clip(T - np.arange(n) * k, 0, k)
    out = 2 * hits >= cover
    return _fit(out, n_out, False)


def pool_labels(labels, k: int, n_out: Optional[int] = None) -> np.ndarray:
    """Majority label of each group of ``k`` frames; ties go to the lowest id."""
    labels = np.asarray(labels, dtype=np.int64)
    T = labels.shape[0]
    n = -(-T // k)
    if k == 1 or T == 0:
        return _fit(labels.copy(), n_out, None)
    out = np.empty(n, dtype=np.int64)
    for j in range(n):
        out[j] = np.bincount(labels[j * k : (j + 1) * k]).argmax()
    return _fit(out, n_out, None)


def _fit(x, n_out, pad_value):
    if n_out is None or n_out == len(x):
        return x
    if n_out < len(x):
        return x[:n_out]
    fill = x[-1] if pad_value is None and len(x) else (pad_value or 0)
    return np.concatenate([x, np.full(n_out - len(x), fill, dtype=x.dtype)])


def reduce_labels(labels, r_in: float, r_out: float, n_out: Optional[int] = None) -> np.ndarray:
    """Bring a label sequence from rate ``r_in`` to ``r_out``.

    Coarser targets use majority pooling; finer targets repeat each label.
    """
    k = rate_ratio(r_in, r_out)
    if k >= 1:
        return pool_labels(labels, k, n_out)
    return _fit(np.repeat(np.asarray(labels, dtype=np.int64), -k), n_out, None)


def reduce_mask_and_labels(input_mask, r_in: float, labels, r_lbl: float, r_out: float,
                           n_out: Optional[int] = None):
    """Output-rate mask and labels for one utterance."""
    k = rate_ratio(r_in, r_out)
    if k < 1:
        raise ConfigError("input mask must be at least as fine as the output rate")
    mask = reduce_mask(input_mask, k, n_out)
    return mask, reduce_labels(labels, r_lbl, r_out, len(mask))
