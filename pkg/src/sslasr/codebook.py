"""k-means codebooks: fitting, assignment, corpus labelling and quality metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .errors import ConfigError
from .formats import LabelStore, read_codebook_file, write_codebook_file
from .masking import reduce_labels

log = logging.getLogger(__name__)

DEFAULT_MAX_SAMPLE_FRAMES = 2_000_000


@dataclass
class Codebook:
    centroids: np.ndarray  # (C, D)
    feature_kind: str = "fbank"
    frame_rate: float = 100.0
    metadata: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path) -> None:
        write_codebook_file(path, self.centroids, self.feature_kind, self.frame_rate, self.metadata)

    @classmethod
    def load(cls, path) -> "Codebook":
        info = read_codebook_file(path)
        return cls(info["centroids"].astype(np.float64), info["feature_kind"],
                   info["frame_rate"], info["metadata"])


def _kmeans_pp(x, k, rng):
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a centre already; take any unused index
            unused = np.setdiff1d(np.arange(n), chosen)
            idx = int(unused[rng.integers(unused.size)])
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[chosen].copy()


def kmeans_fit(x, k: int, max_iters: int = 100, seed: int = 0,
               feature_kind: str = "fbank", frame_rate: float = 100.0) -> Codebook:
    """Lloyd's algorithm from k-means++ seeds.

    Iterates until the assignment stops changing or ``max_iters`` is reached.
    A cluster that loses all members is moved onto the point currently
    farthest from its own centroid. ``metadata["inertia"]`` holds the inertia
    after each assignment step; it never increases.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n < k:
        raise ConfigError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels, d2 = _kernels.assign_nearest(x, centroids)
    inertia = [float(d2.sum())]
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        sums, counts = _kernels.centroid_sums(x, labels, k)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        if not nonempty.all():
            own = ((x - centroids[labels]) ** 2).sum(axis=1)
            taken = set()
            for c in np.flatnonzero(~nonempty):
                order = np.argsort(-own, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                centroids[c] = x[idx]
        new_labels, d2 = _kernels.assign_nearest(x, centroids)
        inertia.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            converged = True
            labels = new_labels
            break
        labels = new_labels
    meta = {"k": k, "iters": it, "seed": seed, "inertia": inertia, "converged": converged, "n_points": n}
    return Codebook(centroids, feature_kind, frame_rate, meta)


def assign(features, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid labels; ties go to the lowest centroid index."""
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[1] != codebook.dim:
        raise ConfigError(f"feature dim {features.shape} does not match codebook dim {codebook.dim}")
    labels, _ = _kernels.assign_nearest(features, codebook.centroids)
    return labels


def subsample_frames(arrays, max_frames: int, seed: int) -> np.ndarray:
    """Stack frames from ``arrays`` and keep a uniform random subset."""
    x = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
    if x.shape[0] <= max_frames:
        return x
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(x.shape[0], size=max_frames, replace=False))
    return x[keep]


def extract_labels_for_corpus(featurize: Callable, manifest, codebook: Codebook, store: LabelStore,
                              source_kind: Optional[str] = None) -> dict:
    """Label every utterance of ``manifest`` into ``store``.

    ``featurize(utt)`` returns a FeatureMatrix for an utterance. Records
    already present are left untouched, so an interrupted run resumes.
    Failures are logged per utterance and the run continues.
    """
    if source_kind is not None and source_kind != codebook.feature_kind:
        raise ConfigError(f"codebook was fit on {codebook.feature_kind}, source produces {source_kind}")
    written = skipped = failed = 0
    for utt in manifest:
        if utt.id in store:
            skipped += 1
            continue
        try:
            feats = featurize(utt)
            if feats.kind != codebook.feature_kind:
                raise ConfigError(f"feature kind {feats.kind} != codebook {codebook.feature_kind}")
            store.write(utt.id, feats.frame_rate, assign(feats.frames, codebook))
            written += 1
        except (OSError, ValueError) as exc:
            store.log_error(utt.id, str(exc))
            failed += 1
    return {"written": written, "skipped": skipped, "failed": failed}


@dataclass
class ClusterMetrics:
    purity: float
    pnmi: float
    counts: np.ndarray  # (clusters, units)

    def as_dict(self) -> dict:
        return {"purity": self.purity, "pnmi": self.pnmi, "frames": int(self.counts.sum())}


def cluster_metrics(labels, units, n_clusters: Optional[int] = None, n_units: Optional[int] = None):
    labels = np.asarray(labels, dtype=np.int64)
    units = np.asarray(units, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("no frames to score")
    n_clusters = n_clusters or int(labels.max()) + 1
    n_units = n_units or int(units.max()) + 1
    counts = np.zeros((n_clusters, n_units), dtype=np.int64)
    np.add.at(counts, (labels, units), 1)
    total = counts.sum()
    purity = counts.max(axis=1).sum() / total
    p = counts / total
    pc = p.sum(axis=1, keepdims=True)
    pu = p.sum(axis=0, keepdims=True)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / (pc @ pu)[nz])).sum())
    hu = float(-(pu[pu > 0] * np.log(pu[pu > 0])).sum())
    pnmi = mi / hu if hu > 0 else 1.0
    return ClusterMetrics(float(purity), float(min(max(pnmi, 0.0), 1.0)), counts)


def codebook_quality(store: LabelStore, alignments: dict, ref_rate: float = 100.0) -> ClusterMetrics:
    """Purity and PNMI of stored labels against reference unit alignments.

    References are pooled (majority vote) to each record's frame rate, or
    repeated when the record is finer; the shorter sequence sets the length.
    """
    all_labels, all_units = [], []
    for uid in store.ids():
        if uid not in alignments:
            continue
        rate, labels = store.read(uid)
        ref = reduce_labels(alignments[uid], ref_rate, rate)
        n = min(len(ref), len(labels))
        all_labels.append(labels[:n])
        all_units.append(ref[:n])
    if not all_labels:
        raise ValueError("label store has no records matching the alignments")
    return cluster_metrics(np.concatenate(all_labels), np.concatenate(all_units))
