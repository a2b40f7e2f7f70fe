import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sslasr import _kernels
from sslasr.codebook import (
    Codebook,
    assign,
    cluster_metrics,
    codebook_quality,
    extract_labels_for_corpus,
    kmeans_fit,
    subsample_frames,
)
from sslasr.corpus import Manifest, SynthSpec, Utterance, synth_utterance
from sslasr.errors import ConfigError
from sslasr.features import FeatureMatrix, fbank
from sslasr.formats import LabelStore


def _blobs(seed=0, n=60):
    rng = np.random.default_rng(seed)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [5.0, 10.0 * np.sqrt(3) / 2]])
    truth = rng.integers(0, 3, n)
    return centres[truth] + 0.05 * rng.standard_normal((n, 2)), truth


def test_k_equals_n_gives_zero_inertia():
    x = np.random.default_rng(0).standard_normal((6, 3))
    cb = kmeans_fit(x, 6, seed=3)
    assert cb.metadata["inertia"][-1] == 0.0
    np.testing.assert_allclose(np.sort(cb.centroids, axis=0), np.sort(x, axis=0))


def test_blobs_recovered_up_to_relabeling():
    x, truth = _blobs()
    cb = kmeans_fit(x, 3, seed=1)
    lab = assign(x, cb)
    best = max(np.mean(np.array(p)[lab] == truth) for p in itertools.permutations(range(3)))
    assert best == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_inertia_non_increasing_and_fixpoint(seed):
    x = np.random.default_rng(seed).standard_normal((300, 4))
    cb = kmeans_fit(x, 7, seed=seed)
    inertia = np.array(cb.metadata["inertia"])
    assert np.all(np.diff(inertia) <= 1e-9 * inertia[0])
    assert cb.metadata["converged"]
    lab = assign(x, cb)
    recomputed = np.stack([x[lab == c].mean(axis=0) for c in range(7)])
    np.testing.assert_allclose(recomputed, cb.centroids, atol=1e-12)


def test_deterministic_and_errors():
    x = np.random.default_rng(0).standard_normal((50, 2))
    a, b = kmeans_fit(x, 4, seed=9), kmeans_fit(x, 4, seed=9)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    with pytest.raises(ConfigError):
        kmeans_fit(x[:3], 4)


def test_empty_cluster_reseeded():
    # duplicated points force coincident seeds, which leaves a cluster empty
    x = np.array([[0.0, 0.0]] * 5 + [[1.0, 0.0]] * 5 + [[9.0, 9.0]])
    cb = kmeans_fit(x, 3, seed=0)
    assert np.isfinite(cb.centroids).all()
    assert len(set(assign(x, cb).tolist())) == 3


def test_assign_rules():
    c = np.array([[0.0, 0], [5, 5], [1, 0], [9, 9], [7, 7], [-1, 0]])
    cb = Codebook(c)
    np.testing.assert_array_equal(assign(c, cb), np.arange(6))
    # the origin is equidistant to centroids 2 and 5
    tie = Codebook(np.array([[9.0, 9], [8, 8], [1, 0], [7, 7], [6, 6], [-1, 0]]))
    assert assign(np.array([[0.0, 0.0]]), tie)[0] == 2
    with pytest.raises(ConfigError):
        assign(np.zeros((2, 3)), cb)


@given(st.integers(1, 40), st.integers(1, 9), st.integers(1, 5), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_assign_matches_naive_scan(T, C, D, seed):
    rng = np.random.default_rng(seed)
    x, c = rng.standard_normal((T, D)), rng.standard_normal((C, D))
    naive = np.array([min(range(C), key=lambda j: (float(((xi - c[j]) ** 2).sum()), j)) for xi in x])
    for use in (True, False):
        lab, _ = _kernels.assign_nearest(x, c, use_numba=use)
        np.testing.assert_array_equal(lab, naive)
    np.testing.assert_array_equal(assign(3.5 * x, Codebook(3.5 * c)), naive)


def test_subsample_deterministic():
    arrs = [np.arange(20.0).reshape(10, 2), np.arange(8.0).reshape(4, 2)]
    a = subsample_frames(arrs, 5, seed=2)
    np.testing.assert_array_equal(a, subsample_frames(arrs, 5, seed=2))
    assert a.shape == (5, 2)
    assert subsample_frames(arrs, 100, seed=0).shape == (14, 2)


def test_metrics_examples():
    ref = np.random.default_rng(0).integers(0, 4, 500)
    m = cluster_metrics(ref, ref)
    assert m.purity == 1.0 and abs(m.pnmi - 1.0) < 1e-12
    rng = np.random.default_rng(1)
    units = rng.integers(0, 4, 10_000)
    assert cluster_metrics(rng.integers(0, 8, 10_000), units).pnmi < 0.05
    single = cluster_metrics(np.zeros(500, int), ref)
    assert single.purity == np.bincount(ref).max() / 500
    with pytest.raises(ValueError):
        cluster_metrics([], [])


def _toy_manifest(tmp_path, n=3):
    spec = SynthSpec(n_symbols=4, noise_level=0.0)
    utts, feats, aligns = [], {}, {}
    for i in range(n):
        ids = np.random.default_rng(i).integers(0, 4, 10)
        buf, units = synth_utterance(ids, spec, seed=i)
        uid = f"u{i}"
        utts.append(Utterance(uid, f"{uid}.wav", buf.duration))
        feats[uid] = fbank(buf)
        aligns[uid] = units
    return Manifest(utts, "pretrain", root=tmp_path), feats, aligns


def _stationary(frames):
    # frames identical to both neighbours, picked from the features alone
    d = np.abs(np.diff(frames, axis=0)).max(axis=1) < 1e-3
    keep = np.zeros(len(frames), bool)
    keep[1:-1] = d[:-1] & d[1:]
    return frames[keep]


def test_pure_unit_labels_follow_units(tmp_path):
    # On noise-free audio the 1e-10 log floor turns unit transitions into a
    # cluster of their own, so the codebook is fit on stationary frames and
    # scored on every frame.
    man, feats, aligns = _toy_manifest(tmp_path)
    x = np.concatenate([_stationary(f.frames) for f in feats.values()])
    cb = kmeans_fit(x, 4, seed=0)
    store = LabelStore(tmp_path / "lab")
    stats = extract_labels_for_corpus(lambda u: feats[u.id], man, cb, store, source_kind="fbank")
    assert stats == {"written": 3, "skipped": 0, "failed": 0}
    hits = total = 0
    for uid, units in aligns.items():
        _, lab = store.read(uid)
        units = units[: len(lab)]
        for u in np.unique(units):
            sel = lab[units == u]
            hits += np.bincount(sel).max()
            total += sel.size
    assert hits / total >= 0.9
    q = codebook_quality(store, aligns)
    assert q.purity >= 0.9


def test_extract_resumes_and_logs_errors(tmp_path):
    man, feats, _ = _toy_manifest(tmp_path, n=2)
    cb = kmeans_fit(np.concatenate([f.frames for f in feats.values()]), 4, seed=0)
    store = LabelStore(tmp_path / "lab")
    extract_labels_for_corpus(lambda u: feats[u.id], man, cb, store)
    before = {p.name: p.stat().st_mtime_ns for p in store.root.glob("*.lab")}
    again = extract_labels_for_corpus(lambda u: feats[u.id], man, cb, store)
    assert again == {"written": 0, "skipped": 2, "failed": 0}
    assert before == {p.name: p.stat().st_mtime_ns for p in store.root.glob("*.lab")}

    def broken(u):
        raise FileNotFoundError(u.audio_path)

    other = LabelStore(tmp_path / "lab2")
    res = extract_labels_for_corpus(broken, man, cb, other)
    assert res["failed"] == 2 and len(other) == 0 and len(other.errors()) == 2
    empty = LabelStore(tmp_path / "lab3")
    assert extract_labels_for_corpus(broken, Manifest([], "pretrain"), cb, empty)["written"] == 0
    with pytest.raises(ConfigError):
        extract_labels_for_corpus(broken, man, cb, empty, source_kind="mfcc")
    with pytest.raises(ValueError):
        codebook_quality(empty, {})


def test_codebook_save_load(tmp_path):
    cb = kmeans_fit(np.random.default_rng(0).standard_normal((30, 3)), 4, seed=0, feature_kind="latent",
                    frame_rate=25.0)
    cb.save(tmp_path / "cb.bin")
    back = Codebook.load(tmp_path / "cb.bin")
    np.testing.assert_allclose(back.centroids, cb.centroids, rtol=1e-6)
    assert back.feature_kind == "latent" and back.frame_rate == 25.0 and back.metadata["k"] == 4
