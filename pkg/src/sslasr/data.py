"""Feature caching and length-bucketed batching shared by the trainers."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .corpus import read_wav
from .features import FeatureConfig, compute
from .formats import read_feature_cache, write_feature_cache

log = logging.getLogger(__name__)


def corpus_features(manifest, kind: str = "fbank", cfg: FeatureConfig = FeatureConfig(),
                    cache_path=None, errors: list | None = None) -> dict:
    """Map utterance id -> float32 (T, D) features, cached in a feature file.

    Utterances whose audio cannot be read are left out and reported in
    ``errors`` as ``(id, message)`` pairs.
    """
    if cache_path is not None and Path(cache_path).exists():
        return {uid: frames for uid, (frames, _) in read_feature_cache(cache_path).items()}
    out, rate = {}, None
    for utt in manifest:
        try:
            fm = compute(read_wav(manifest.audio_path(utt)), kind, cfg)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", utt.id, exc)
            if errors is not None:
                errors.append((utt.id, str(exc)))
            continue
        out[utt.id] = fm.frames
        rate = fm.frame_rate
    if cache_path is not None:
        write_feature_cache(cache_path, ((uid, f, rate) for uid, f in out.items()))
    return out


def make_batches(lengths: dict, batch_frames: int, rng: np.random.Generator | None = None) -> list:
    """Group ids of similar length so each padded batch holds <= batch_frames frames.

    Ids are sorted by (length, id) for determinism; with ``rng`` the batch
    order is shuffled.
    """
    order = sorted(lengths, key=lambda u: (lengths[u], u))
    batches, cur, longest = [], [], 0
    for uid in order:
        n = lengths[uid]
        if cur and max(longest, n) * (len(cur) + 1) > batch_frames:
            batches.append(cur)
            cur, longest = [], 0
        cur.append(uid)
        longest = max(longest, n)
    if cur:
        batches.append(cur)
    if rng is not None:
        perm = rng.permutation(len(batches))
        batches = [batches[i] for i in perm]
    return batches


def pad_batch(arrays: list, dtype=np.float32):
    """Stack (T_i, D) arrays into (B, T_max, D) with zeros; returns (batch, lengths)."""
    lengths = np.array([a.shape[0] for a in arrays], dtype=np.int64)
    out = np.zeros((len(arrays), int(lengths.max()), arrays[0].shape[1]), dtype=dtype)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
    return out, lengths
