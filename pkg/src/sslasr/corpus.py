"""Audio I/O, manifests, energy VAD and the synthetic corpus generator."""

from __future__ import annotations

import json
import math
import string
import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, SchemaError, UnsupportedError

SPLITS = ("pretrain", "finetune", "test")
REF_HOP_S = 0.010


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("audio must be a non-empty mono signal")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Utterance:
    id: str
    audio_path: str
    duration: float
    text: Optional[str] = None

    def to_json(self) -> dict:
        d = {"id": self.id, "audio_path": self.audio_path, "duration": self.duration}
        if self.text is not None:
            d["text"] = self.text
        return d


@dataclass
class Manifest:
    utterances: list = field(default_factory=list)
    split: str = "test"
    root: Optional[Path] = None  # directory relative audio paths resolve against

    def __post_init__(self):
        if self.split not in SPLITS:
            raise SchemaError(f"unknown split {self.split!r}")
        seen = set()
        for u in self.utterances:
            if u.id in seen:
                raise SchemaError(f"duplicate utterance id {u.id!r}")
            seen.add(u.id)
            if self.split == "pretrain" and u.text is not None:
                raise SchemaError(f"pretrain utterance {u.id!r} carries a transcript")

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    def audio_path(self, utt: Utterance) -> Path:
        p = Path(utt.audio_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    @property
    def hours(self) -> float:
        return sum(u.duration for u in self.utterances) / 3600.0


# ---------------------------------------------------------------------------
# WAV
# ---------------------------------------------------------------------------


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file into [-1, 1) floats."""
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1:
                raise UnsupportedError(f"{path}: {w.getnchannels()} channels, expected mono")
            if w.getsampwidth() != 2:
                raise UnsupportedError(f"{path}: {8 * w.getsampwidth()}-bit samples, expected 16")
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise UnsupportedError(f"{path}: {msg}") from exc
        raise FormatError(f"{path}: {msg}") from exc
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(buf: AudioBuffer, path) -> None:
    """Write ``buf`` as 16-bit PCM mono; samples outside [-1, 1] are rejected."""
    x = buf.samples
    if np.max(np.abs(x)) > 1.0:
        raise ValueError("samples outside [-1, 1]; refusing to clip")
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(buf.sample_rate))
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def save_manifest(manifest: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for u in manifest.utterances:
            f.write(json.dumps(u.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def load_manifest(path, split: Optional[str] = None) -> Manifest:
    """Load a JSON Lines manifest.

    When ``split`` is not given it is taken from the file stem if that names a
    split, otherwise ``pretrain`` for untranscribed and ``test`` for
    transcribed manifests.
    """
    path = Path(path)
    utts = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            for key in ("id", "audio_path", "duration"):
                if key not in rec:
                    raise SchemaError(f"{path}:{lineno}: missing field {key!r}")
            utts.append(Utterance(str(rec["id"]), str(rec["audio_path"]),
                                  float(rec["duration"]), rec.get("text")))
    if split is None:
        stem = path.stem.split(".")[0]
        if stem in SPLITS:
            split = stem
        else:
            split = "test" if utts and all(u.text is not None for u in utts) else "pretrain"
    return Manifest(utts, split, root=path.parent)


def load_alignments(path) -> dict:
    """Reference unit labels per utterance id (10 ms frames)."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "id" not in rec or "units" not in rec:
                raise SchemaError(f"{path}:{lineno}: alignment needs 'id' and 'units'")
            out[rec["id"]] = np.asarray(rec["units"], dtype=np.int64)
    return out


# ---------------------------------------------------------------------------
# energy VAD
# ---------------------------------------------------------------------------


def frame_energy_db(buf: AudioBuffer, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    sr = buf.sample_rate
    flen = int(round(frame_ms * sr / 1000))
    hop = int(round(hop_ms * sr / 1000))
    x = buf.samples
    if x.size < flen:
        x = np.pad(x, (0, flen - x.size))
    n = 1 + (x.size - flen) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, flen)[::hop][:n]
    return 10.0 * np.log10(np.mean(frames**2, axis=1) + 1e-12)


def energy_vad(
    buf: AudioBuffer,
    frame_ms: float = 25.0,
    hop_ms: float = 10.0,
    threshold_db: float = -40.0,
    min_segment_ms: float = 1000.0,
    max_segment_ms: float = 30000.0,
    merge_gap_ms: float = 300.0,
) -> list:
    """Speech segments ``(start_s, end_s)`` from log-energy thresholding.

    A frame stands for the hop-wide interval around its window centre. Active
    intervals closer than ``merge_gap_ms`` are merged (hangover). Segments
    shorter than ``min_segment_ms`` are widened around their centre rather
    than dropped, so every active frame stays covered; segments longer than
    ``max_segment_ms`` are cut into equal pieces.
    """
    if not (frame_ms >= hop_ms > 0):
        raise ConfigError("energy_vad needs frame_ms >= hop_ms > 0")
    dur = buf.duration
    energy = frame_energy_db(buf, frame_ms, hop_ms)
    active = energy > threshold_db
    if not active.any():
        return []
    hop = hop_ms / 1000.0
    half_frame = frame_ms / 2000.0
    segs = []
    idx = np.flatnonzero(active)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    for a, b in zip(starts, ends):
        lo = max(0.0, a * hop + half_frame - hop / 2)
        hi = min(dur, b * hop + half_frame + hop / 2)
        if a == 0:
            lo = 0.0
        if b == len(active) - 1:
            hi = dur
        segs.append([lo, hi])
    segs = _merge(segs, merge_gap_ms / 1000.0)
    min_len = min(min_segment_ms / 1000.0, dur)
    widened = []
    for lo, hi in segs:
        if hi - lo < min_len:
            pad = (min_len - (hi - lo)) / 2
            lo, hi = lo - pad, hi + pad
            if lo < 0:
                lo, hi = 0.0, min_len
            if hi > dur:
                lo, hi = dur - min_len, dur
        widened.append([lo, hi])
    segs = _merge(widened, 0.0)
    out = []
    max_len = max_segment_ms / 1000.0
    for lo, hi in segs:
        pieces = max(1, math.ceil((hi - lo) / max_len - 1e-9))
        edges = np.linspace(lo, hi, pieces + 1)
        out.extend((float(edges[i]), float(edges[i + 1])) for i in range(pieces))
    return out


def _merge(segs, gap):
    merged = []
    for lo, hi in sorted(segs):
        if merged and lo - merged[-1][1] <= gap:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    n_symbols: int = 8
    utterance_length_range: tuple[int, int] = (8, 20)
    unit_duration_ms: float = 160.0
    noise_level: float = 0.02
    hours_pretrain: float = 2.0
    hours_finetune: float = 0.1
    hours_test: float = 0.1
    seed: int = 0
    sample_rate: int = 16000
    # nuisance factors standing in for speaker and channel variability
    speaker_warp: float = 0.0
    background_level: float = 0.0
    # false draws each symbol different from its predecessor
    allow_repeats: bool = True

    def __post_init__(self):
        lo, hi = self.utterance_length_range
        self.utterance_length_range = (int(lo), int(hi))
        if not 2 <= self.n_symbols <= 26:
            raise ConfigError("n_symbols must be in [2, 26]")
        if not 1 <= lo <= hi:
            raise ConfigError("utterance_length_range must satisfy 1 <= min <= max")
        if self.unit_duration_ms <= 0:
            raise ConfigError("unit_duration_ms must be positive")
        if min(self.hours_pretrain, self.hours_finetune, self.hours_test) <= 0:
            raise ConfigError("split durations must be positive")
        if self.noise_level < 0 or self.background_level < 0 or not 0 <= self.speaker_warp < 0.5:
            raise ConfigError("noise_level/background_level >= 0 and speaker_warp in [0, 0.5)")

    @property
    def symbols(self) -> list:
        return list(string.ascii_lowercase[: self.n_symbols])


def symbol_frequencies(n_symbols: int) -> np.ndarray:
    """Two partials per symbol on a log-spaced grid, shape (n_symbols, 2).

    Partial frequencies sit on exact multiples of 40 Hz (the FFT bin spacing
    of a 400-point frame at 16 kHz), so with no warp and no noise every symbol
    occupies its own two bins.
    """
    grid = np.geomspace(280.0, 3800.0, 2 * n_symbols)
    grid = np.round(grid / 40.0) * 40.0
    for i in range(1, grid.size):
        grid[i] = max(grid[i], grid[i - 1] + 40.0)
    order = np.arange(2 * n_symbols)
    # interleave so each symbol mixes a low and a high partial
    return np.stack([grid[order[:n_symbols]], grid[order[n_symbols:]]], axis=1)


def _render(symbol_ids, spec: SynthSpec, rng: np.random.Generator):
    sr = spec.sample_rate
    unit_len = int(round(spec.unit_duration_ms * sr / 1000))
    n = unit_len * len(symbol_ids)
    t = np.arange(n) / sr
    freqs = symbol_frequencies(spec.n_symbols)
    warp = 1.0 + (rng.uniform(-spec.speaker_warp, spec.speaker_warp) if spec.speaker_warp else 0.0)
    gain = rng.uniform(0.6, 1.0)
    ramp = min(unit_len // 2, int(0.005 * sr))
    env = np.ones(unit_len)
    if ramp:
        edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] = edge
        env[-ramp:] = edge[::-1]
    x = np.zeros(n)
    for i, s in enumerate(symbol_ids):
        sl = slice(i * unit_len, (i + 1) * unit_len)
        for f in freqs[s]:
            x[sl] += 0.25 * np.sin(2 * np.pi * f * warp * t[sl])
        x[sl] *= env
    x *= gain
    if spec.background_level:
        hum_f = rng.uniform(200.0, 3800.0)
        hum_phase = rng.uniform(0, 2 * np.pi)
        level = spec.background_level * rng.uniform(0.5, 1.0)
        x += level * np.sin(2 * np.pi * hum_f * t + hum_phase)
    if spec.noise_level:
        x += spec.noise_level * rng.standard_normal(n)
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return x


def reference_units(symbol_ids, unit_duration_ms: float, n_samples: int, sample_rate: int,
                    window_ms: float = 25.0) -> np.ndarray:
    """Unit active at the centre of each 10 ms analysis frame."""
    n_frames = int(math.ceil(n_samples / sample_rate / REF_HOP_S - 1e-9))
    centres = np.arange(n_frames) * REF_HOP_S + window_ms / 2000.0
    pos = np.minimum((centres * 1000.0 // unit_duration_ms).astype(np.int64), len(symbol_ids) - 1)
    return np.asarray(symbol_ids, dtype=np.int64)[pos]


def _draw_symbols(rng, n: int, spec: SynthSpec) -> np.ndarray:
    if spec.allow_repeats:
        return rng.integers(0, spec.n_symbols, size=n)
    # shift by 1..n_symbols-1 so neighbours always differ
    ids = np.empty(n, dtype=np.int64)
    ids[0] = rng.integers(0, spec.n_symbols)
    steps = rng.integers(1, spec.n_symbols, size=n - 1)
    for i in range(1, n):
        ids[i] = (ids[i - 1] + steps[i - 1]) % spec.n_symbols
    return ids


def synth_corpus(spec: SynthSpec, out_dir) -> dict:
    """Generate pretrain/finetune/test splits under ``out_dir``.

    Writes ``<split>/<id>.wav``, ``<split>.jsonl`` manifests and
    ``<split>.align.jsonl`` frame-level unit references. Returns the three
    manifests keyed by split. Output is a pure function of ``spec``.
    """
    out_dir = Path(out_dir)
    lo, hi = spec.utterance_length_range
    unit_s = spec.unit_duration_ms / 1000.0
    hours = {"pretrain": spec.hours_pretrain, "finetune": spec.hours_finetune, "test": spec.hours_test}
    for split, h in hours.items():
        if h * 3600.0 < lo * unit_s * (1 - 1e-9):
            raise ConfigError(
                f"{split}: {h} h is shorter than one minimum-length utterance ({lo * unit_s:.2f} s)"
            )
    streams = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    symbols = spec.symbols
    manifests = {}
    for split, ss in zip(SPLITS, streams):
        rng = np.random.default_rng(ss)
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        target = hours[split] * 3600.0
        total = 0.0
        utts, aligns = [], []
        i = 0
        while total < target * (1 - 1e-9):
            n_sym = int(rng.integers(lo, hi + 1))
            ids = _draw_symbols(rng, n_sym, spec)
            audio = _render(ids, spec, rng)
            uid = f"{split}-{i:05d}"
            rel = f"{split}/{uid}.wav"
            write_wav(AudioBuffer(audio, spec.sample_rate), out_dir / rel)
            dur = audio.size / spec.sample_rate
            text = " ".join(symbols[s] for s in ids) if split != "pretrain" else None
            utts.append(Utterance(uid, rel, dur, text))
            units = reference_units(ids, spec.unit_duration_ms, audio.size, spec.sample_rate)
            aligns.append({"id": uid, "units": units.tolist()})
            total += dur
            i += 1
        man = Manifest(utts, split, root=out_dir)
        save_manifest(man, out_dir / f"{split}.jsonl")
        with open(out_dir / f"{split}.align.jsonl", "w") as f:
            for rec in aligns:
                f.write(json.dumps(rec, separators=(",", ":")) + "\n")
        manifests[split] = man
    return manifests


def synth_utterance(symbol_ids, spec: SynthSpec, seed: int = 0):
    """Render one utterance in memory: ``(AudioBuffer, reference units)``."""
    rng = np.random.default_rng(seed)
    audio = _render(np.asarray(symbol_ids), spec, rng)
    units = reference_units(symbol_ids, spec.unit_duration_ms, audio.size, spec.sample_rate)
    return AudioBuffer(audio, spec.sample_rate), units
