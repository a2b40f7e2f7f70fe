"""Iterative pseudo-label pipeline: seed ASR, label extraction, pre-training, fine-tuning.

Stage 1 trains a transducer on the labeled split only. Each iteration then
clusters features from a source model (the Stage-1 encoder first, the
previous iteration's fine-tuned encoder afterwards, or a spectral front end
for the HuBERT-style baseline), pre-trains a fresh encoder on the cluster
labels and fine-tunes it with the transducer loss.

Every artifact lives under one work directory. ``state.json`` records, per
stage, the checksums of its inputs and outputs so an interrupted run resumes
at the first stage whose inputs changed or whose outputs are missing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .codebook import Codebook, codebook_quality, extract_labels_for_corpus, kmeans_fit, subsample_frames
from .config import build, format_kv, to_kv
from .corpus import SynthSpec, load_alignments, load_manifest, synth_corpus
from .data import corpus_features, make_batches, pad_batch
from .encoder import (EncoderConfig, EncoderModel, encoder_from_params, forward, init_encoder,
                      save_params, streaming_plan)
from .errors import ConfigError, SslAsrError
from .evaluate import WerReport, score_set
from .features import FeatureMatrix, mfcc
from .formats import LabelStore, atomic_write, canonical_json, file_sha256, read_checkpoint_file
from .masking import MaskConfig
from .optim import Adam
from .pretrain import PretrainHead, all_params, pretrain_epoch, select_labels
from .tokenizer import SPECIALS, BpeModel, _word_symbols, bpe_train
from .transducer import (TransducerConfig, TransducerModel, decode_corpus, finetune_epoch, init_transducer,
                         load_transducer, save_transducer)

log = logging.getLogger(__name__)

STATE_VERSION = 1
SPECTRAL_SOURCES = ("fbank", "mfcc")
LABEL_SOURCES = ("asr",) + SPECTRAL_SOURCES
FULL = math.inf


class PipelineStateError(SslAsrError):
    """The work directory's state file or artifacts cannot be trusted."""


@dataclass(frozen=True)
class PredictorConfig:
    """Transducer settings other than the vocabulary, which the tokenizer fixes."""

    context_size: int = 2
    embed_dim: int = 32
    pred_hidden: int = 64
    joint_hidden: int = 64

    def for_vocab(self, vocab_size: int) -> TransducerConfig:
        return TransducerConfig(vocab_size, **dataclasses.asdict(self))


@dataclass
class PipelineConfig:
    workdir: str = "work"
    # Directory holding the manifests; "none" synthesizes a corpus from synth.* keys.
    data_dir: Optional[str] = None
    pretrain_manifest: str = "pretrain.jsonl"
    finetune_manifest: str = "finetune.jsonl"
    test_manifests: tuple[str, ...] = ("test.jsonl",)
    pretrain_alignments: Optional[str] = "pretrain.align.jsonl"
    iterations: int = 1
    label_source: str = "asr"
    selectors: tuple[str, ...] = ("final",)
    stage1_epochs: int = 9
    pretrain_epochs: tuple[int, ...] = (9, 18)
    finetune_epochs: tuple[int, ...] = (9,)
    run_stage1: bool = True
    fresh_init: bool = True
    k: int = 32
    kmeans_iters: int = 100
    kmeans_max_frames: int = 200_000
    bpe_vocab_size: int = 0
    batch_frames: int = 6000
    finetune_batch_frames: int = 2000
    pretrain_lr: float = 2e-3
    finetune_lr: float = 2e-3
    warmup_steps: int = 100
    clip_norm: float = 5.0
    beam: int = 4
    seed: int = 0
    streaming: bool = False
    chunk_choices_ms: tuple[float, ...] = (320.0, 640.0, 1280.0, FULL)
    context_choices_ms: tuple[float, ...] = (1280.0, 2560.0, 5120.0, FULL)
    decode_chunk_ms: float = 640.0
    decode_context_ms: float = 5120.0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    mask: MaskConfig = field(default_factory=MaskConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)

    NESTED = {"encoder": EncoderConfig, "predictor": PredictorConfig, "mask": MaskConfig, "synth": SynthSpec}

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.label_source not in LABEL_SOURCES:
            raise ConfigError(f"label_source must be one of {LABEL_SOURCES}")
        for name in ("pretrain_epochs", "finetune_epochs", "selectors"):
            if not getattr(self, name):
                raise ConfigError(f"{name} needs at least one entry")
        if min(self.pretrain_epochs + self.finetune_epochs + (self.stage1_epochs,)) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.k < 2 or self.beam < 1 or min(self.batch_frames, self.finetune_batch_frames) < 1:
            raise ConfigError("k >= 2, beam >= 1 and batch_frames >= 1 required")
        if self.streaming and not self.encoder.causal:
            raise ConfigError("streaming training needs encoder.causal = true")
        if not self.chunk_choices_ms or not self.context_choices_ms:
            raise ConfigError("chunk and context choice lists must be non-empty")

    # per-iteration schedules repeat their last entry
    def _pick(self, seq, it):
        return seq[min(it, len(seq)) - 1]

    def pretrain_epochs_at(self, it: int) -> int:
        return self._pick(self.pretrain_epochs, it)

    def finetune_epochs_at(self, it: int) -> int:
        return self._pick(self.finetune_epochs, it)

    def selector_at(self, it: int) -> str:
        return self._pick(self.selectors, it)

    def source_at(self, it: int) -> str:
        """Label source of iteration ``it``: a spectral kind or the previous stage's encoder."""
        if it == 1:
            return self.label_source
        return f"it{it - 1}/stage4"

    @property
    def needs_stage1(self) -> bool:
        return self.label_source == "asr" or self.run_stage1

    @classmethod
    def from_kv(cls, values: dict) -> "PipelineConfig":
        flat, nested = {}, {k: {} for k in cls.NESTED}
        for key, value in values.items():
            head, _, rest = key.partition(".")
            if rest and head in cls.NESTED:
                nested[head][rest] = value
            elif rest:
                raise ConfigError(f"unknown config section {head!r} in key {key!r}")
            else:
                flat[key] = value
        for name in cls.NESTED:
            if name in flat:
                raise ConfigError(f"{name} is a section; set {name}.<field> instead")
        kwargs = {name: build(tp, nested[name]) for name, tp in cls.NESTED.items()}
        base = build(_FlatView, flat)
        return cls(**dataclasses.asdict(base), **kwargs)

    def to_kv(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name in self.NESTED:
                out.update(to_kv(v, f.name + "."))
            elif isinstance(v, tuple):
                out[f.name] = ",".join(_fmt(x) for x in v)
            else:
                out[f.name] = "none" if v is None else _fmt(v)
        return out

    def describe(self) -> str:
        return format_kv(self.to_kv())


def _fmt(v) -> str:
    if isinstance(v, float) and math.isinf(v):
        return "full"
    return str(v)


def _flat_view():
    """Dataclass with the scalar fields of PipelineConfig, used for key parsing."""
    skip = set(PipelineConfig.NESTED)
    hints = typing.get_type_hints(PipelineConfig)
    fields = [(f.name, hints[f.name], field(default=f.default))
              for f in dataclasses.fields(PipelineConfig) if f.name not in skip]
    return dataclasses.make_dataclass("PipelineOptions", fields)


_FlatView = _flat_view()


def load_pipeline_config(path=None, overrides: Optional[dict] = None) -> PipelineConfig:
    from .config import load_kv_file

    values = load_kv_file(path) if path else {}
    values.update(overrides or {})
    return PipelineConfig.from_kv(values)


# ---------------------------------------------------------------------------
# streaming plan sampling
# ---------------------------------------------------------------------------


def plan_sampler(cfg: PipelineConfig) -> Optional[Callable]:
    """Per-batch (chunk_ms, context_ms) drawn uniformly from the configured grid."""
    if not cfg.streaming:
        return None
    chunks, contexts = cfg.chunk_choices_ms, cfg.context_choices_ms

    def sample(rng):
        return (chunks[int(rng.integers(len(chunks)))], contexts[int(rng.integers(len(contexts)))])

    return sample


def decode_plan_ms(cfg: PipelineConfig):
    return (cfg.decode_chunk_ms, cfg.decode_context_ms) if cfg.streaming else None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def checksum(path) -> str:
    """sha256 of a file, or of every file under a directory (names included)."""
    path = Path(path)
    if path.is_file():
        return file_sha256(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(p.relative_to(path).as_posix().encode())
        h.update(bytes.fromhex(file_sha256(p)))
    return h.hexdigest()


def stage_seed(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def encode_corpus(model: EncoderModel, feats: dict, selector: str = "final", batch_frames: int = 8000,
                  plan_ms=None) -> dict:
    """id -> FeatureMatrix of latent features from the selected stack."""
    n_stacks = len(model.cfg.stack_downsample)
    idx = None
    if selector != "final":
        try:
            idx = int(str(selector).removeprefix("stack"))
        except ValueError as exc:
            raise ConfigError(f"invalid selector {selector!r}") from exc
        if not 1 <= idx <= n_stacks:
            raise ConfigError(f"stack selector {idx} outside 1..{n_stacks}")
    out = {}
    lengths = {u: f.shape[0] for u, f in feats.items()}
    for batch in make_batches(lengths, batch_frames):
        x, lens = pad_batch([feats[u] for u in batch])
        plan = None
        if plan_ms is not None:
            Tb = -(-x.shape[1] // model.cfg.conv_embed_factor)
            plan = streaming_plan(Tb, plan_ms[0], plan_ms[1], model.cfg)
        with ad.no_grad():
            res = forward(model, x, plan, lens)
        if idx is None:
            data, n, rate = res.final.data, res.lengths, res.output_rate
        else:
            data, n, rate = res.stacks[idx - 1].data, res.stack_lengths[idx - 1], res.stack_rates[idx - 1]
        for i, u in enumerate(batch):
            out[u] = FeatureMatrix(data[i, : int(n[i])].copy(), rate, "latent")
    return out


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------


class Pipeline:
    """Runs the stages of one configuration inside ``cfg.workdir``."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.state_path = self.root / "state.json"
        self.lock_path = self.root / "pipeline.lock"
        self.state = None
        self._feats = {}
        self._tokenizer = None
        self.executed = []  # stage names actually computed in this run

    # -- state -----------------------------------------------------------
    def _load_state(self) -> dict:
        if not self.state_path.exists():
            return {"version": STATE_VERSION, "stages": {}}
        hint = (f"recover by restoring {self.state_path} or deleting it together with the "
                f"stage directories to rebuild from scratch")
        try:
            state = json.loads(self.state_path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise PipelineStateError(f"state file {self.state_path} is unreadable ({exc}); {hint}") from exc
        ok = (isinstance(state, dict) and state.get("version") == STATE_VERSION
              and isinstance(state.get("stages"), dict)
              and all(isinstance(r, dict) and isinstance(r.get("outputs"), dict)
                      and isinstance(r.get("inputs"), dict) for r in state["stages"].values()))
        if not ok:
            raise PipelineStateError(f"state file {self.state_path} has an unexpected layout; {hint}")
        for name, rec in state["stages"].items():
            for rel, digest in rec["outputs"].items():
                p = self.root / rel
                if p.exists() and checksum(p) != digest:
                    raise PipelineStateError(
                        f"artifact {p} of stage {name} does not match its recorded checksum; {hint}")
        return state

    def _save_state(self):
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write(self.state_path, (json.dumps(self.state, indent=1, sort_keys=True) + "\n").encode())

    def _acquire(self):
        self.root.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise PipelineStateError(
                f"{self.lock_path} exists: another run is using this work directory "
                f"(delete the lock if no run is active)") from exc
        with os.fdopen(fd, "w") as f:
            f.write(f"{os.getpid()}\n")

    def _release(self):
        try:
            self.lock_path.unlink()
        except FileNotFoundError:
            pass

    def _stage(self, name: str, inputs: dict, fn: Callable[[], tuple]) -> dict:
        """Run ``fn`` unless a record with the same inputs and intact outputs exists.

        ``fn`` returns ``(outputs, info)`` where outputs are paths relative to
        the work directory.
        """
        rec = self.state["stages"].get(name)
        if rec and rec["inputs"] == inputs and all((self.root / p).exists() for p in rec["outputs"]):
            log.info("stage %s: up to date", name)
            return rec
        log.info("stage %s: running", name)
        outputs, info = fn()
        rec = {"inputs": inputs, "outputs": {p: checksum(self.root / p) for p in outputs}, "info": info}
        self.state["stages"][name] = rec
        self._save_state()
        self.executed.append(name)
        return rec

    def _digest(self, name: str) -> str:
        """Combined checksum of a completed stage's outputs."""
        rec = self.state["stages"][name]
        return hashlib.sha256(canonical_json(rec["outputs"]).encode()).hexdigest()

    def _config_digest(self, *fields) -> str:
        kv = self.cfg.to_kv()
        keep = {k: v for k, v in kv.items() if any(k == f or k.startswith(f + ".") for f in fields)}
        return hashlib.sha256(canonical_json(keep).encode()).hexdigest()

    # -- data ------------------------------------------------------------
    @property
    def data_dir(self) -> Path:
        return Path(self.cfg.data_dir) if self.cfg.data_dir else self.root / "data"

    def _manifest(self, name):
        return load_manifest(self.data_dir / name)

    def stage_data(self) -> dict:
        if self.cfg.data_dir:
            d = self.data_dir
            names = [self.cfg.pretrain_manifest, self.cfg.finetune_manifest, *self.cfg.test_manifests]
            missing = [n for n in names if not (d / n).exists()]
            if missing:
                raise ConfigError(f"missing manifests in {d}: {', '.join(missing)}")
            return {"inputs": {}, "outputs": {}}

        def run():
            mans = synth_corpus(self.cfg.synth, self.root / "data")
            return ["data"], {"utterances": {k: len(m) for k, m in mans.items()},
                              "hours": {k: round(m.hours, 4) for k, m in mans.items()}}

        return self._stage("data", {"config": self._config_digest("synth")}, run)

    def features(self, which: str) -> dict:
        """Fbank features of a manifest, cached under ``features/``."""
        if which not in self._feats:
            cache = self.root / "features" / (Path(which).stem.split(".")[0] + ".fbank.feats")
            cache.parent.mkdir(parents=True, exist_ok=True)
            errors = []
            self._feats[which] = corpus_features(self._manifest(which), "fbank", cache_path=cache, errors=errors)
            for uid, msg in errors:
                log.warning("feature extraction failed for %s: %s", uid, msg)
        return self._feats[which]

    def stage_features(self) -> dict:
        names = [self.cfg.pretrain_manifest, self.cfg.finetune_manifest, *self.cfg.test_manifests]
        inputs = {n: checksum(self.data_dir / n) for n in names}

        def run():
            for p in (self.root / "features").glob("*.feats"):
                p.unlink()
            self._feats.clear()
            outs = []
            for n in names:
                self.features(n)
                outs.append(f"features/{Path(n).stem.split('.')[0]}.fbank.feats")
            return outs, {n: len(self.features(n)) for n in names}

        rec = self._stage("features", inputs, run)
        return rec

    def targets(self) -> dict:
        tok = self.tokenizer()
        return {u.id: tok.encode(u.text) for u in self._manifest(self.cfg.finetune_manifest)
                if u.text is not None}

    def tokenizer(self) -> BpeModel:
        if self._tokenizer is None:
            self._tokenizer = BpeModel.load(self.root / "tokenizer.json")
        return self._tokenizer

    def stage_tokenizer(self) -> dict:
        def run():
            texts = [u.text for u in self._manifest(self.cfg.finetune_manifest) if u.text]
            if not texts:
                raise ConfigError("fine-tuning manifest has no transcripts")
            size = self.cfg.bpe_vocab_size
            if size <= 0:
                size = len(SPECIALS) + len({s for t in texts for w in t.split() for s in _word_symbols(w)})
            self._tokenizer = None
            bpe_train(texts, size).save(self.root / "tokenizer.json")
            return ["tokenizer.json"], {"vocab_size": self.tokenizer().vocab_size}

        inputs = {"manifest": checksum(self.data_dir / self.cfg.finetune_manifest),
                  "config": self._config_digest("bpe_vocab_size")}
        return self._stage("tokenizer", inputs, run)

    # -- evaluation ------------------------------------------------------
    def evaluate(self, model: TransducerModel, tag: str) -> tuple:
        """Decode every test set; writes hypotheses and returns (outputs, report dict)."""
        tok = self.tokenizer()
        sets, outputs = {}, []
        for name in self.cfg.test_manifests:
            set_name = Path(name).stem.split(".")[0]
            man = self._manifest(name)
            feats = self.features(name)
            ids = [u.id for u in man if u.id in feats]
            decoded = decode_corpus(model, feats, ids, beam=self.cfg.beam, plan_ms=decode_plan_ms(self.cfg))
            hyps = {u: tok.decode(decoded[u][0]) for u in ids}
            rel = f"{tag}/hyps.{set_name}.jsonl"
            lines = [canonical_json({"id": u, "text": hyps[u], "score": round(float(decoded[u][1]), 6)})
                     for u in ids]
            atomic_write(self.root / rel, ("\n".join(lines) + "\n").encode())
            outputs.append(rel)
            sets[set_name] = score_set({u.id: u.text for u in man}, hyps)
        return outputs, WerReport(sets).as_dict()

    def _train_transducer(self, model: TransducerModel, epochs: int, seed: int) -> list:
        feats = self.features(self.cfg.finetune_manifest)
        targets = self.targets()
        opt = Adam(model.all_params(), lr=self.cfg.finetune_lr, warmup_steps=self.cfg.warmup_steps,
                   clip_norm=self.cfg.clip_norm)
        history = []
        for epoch in range(epochs):
            stats = finetune_epoch(model, feats, targets, opt, self.cfg.finetune_batch_frames, seed, epoch,
                                   plan_sampler(self.cfg))
            log.info("epoch %d loss/symbol %.4f", epoch + 1, stats["loss_per_symbol"])
            history.append(round(stats["loss_per_symbol"], 6))
        return history

    # -- stages ----------------------------------------------------------
    def stage1(self) -> dict:
        name = "it0/stage1"
        inputs = {"features": self._digest("features"), "tokenizer": self._digest("tokenizer"),
                  "config": self._config_digest("encoder", "predictor", "stage1_epochs", "finetune_lr",
                                                "warmup_steps", "clip_norm", "finetune_batch_frames", "seed",
                                                "streaming", "chunk_choices_ms", "context_choices_ms",
                                                "decode_chunk_ms", "decode_context_ms", "beam")}

        def run():
            enc = init_encoder(self.cfg.encoder, stage_seed(self.cfg.seed, 0, 1))
            model = init_transducer(enc, self.cfg.predictor.for_vocab(self.tokenizer().vocab_size),
                                    stage_seed(self.cfg.seed, 0, 2))
            history = self._train_transducer(model, self.cfg.stage1_epochs, stage_seed(self.cfg.seed, 0, 3))
            rel = f"{name}.ckpt"
            (self.root / "it0").mkdir(parents=True, exist_ok=True)
            save_transducer(self.root / rel, model, self._lineage(name, inputs))
            outs, wer = self.evaluate(model, "it0")
            return [rel, *outs], {"loss_per_symbol": history, "wer": wer}

        return self._stage(name, inputs, run)

    def _lineage(self, name: str, inputs: dict) -> dict:
        return {"lineage": name, "inputs": inputs, "tokenizer": self.tokenizer().to_json()}

    def stage2(self, it: int) -> dict:
        name = f"it{it}/stage2"
        source = self.cfg.source_at(it)
        selector = self.cfg.selector_at(it)
        inputs = {"features": self._digest("features"),
                  "config": self._config_digest("k", "kmeans_iters", "kmeans_max_frames", "seed",
                                                "streaming", "decode_chunk_ms", "decode_context_ms"),
                  "selector": selector}
        if source in SPECTRAL_SOURCES:
            inputs["source"] = source
        else:
            src_stage = "it0/stage1" if source == "asr" else source
            inputs["source"] = f"{src_stage}:{self._digest(src_stage)}"
        d = self.root / f"it{it}"

        def run():
            feats = self.features(self.cfg.pretrain_manifest)
            if source == "fbank":
                latent = {u: FeatureMatrix(f, 100.0, "fbank") for u, f in feats.items()}
            elif source == "mfcc":
                latent = {u: mfcc(FeatureMatrix(f, 100.0, "fbank")) for u, f in feats.items()}
            else:
                src_stage = "it0/stage1" if source == "asr" else source
                enc = load_transducer(self.root / f"{src_stage}.ckpt").encoder
                latent = encode_corpus(enc, feats, selector, plan_ms=decode_plan_ms(self.cfg))
            kind = next(iter(latent.values())).kind
            rate = next(iter(latent.values())).frame_rate
            ids = sorted(latent)
            x = subsample_frames([latent[u].frames for u in ids], self.cfg.kmeans_max_frames,
                                 stage_seed(self.cfg.seed, it, 20))
            cb = kmeans_fit(x, self.cfg.k, self.cfg.kmeans_iters, stage_seed(self.cfg.seed, it, 21), kind, rate)
            cb.metadata["lineage"] = name
            cb.metadata["source"] = inputs["source"]
            d.mkdir(parents=True, exist_ok=True)
            cb.save(d / "codebook.bin")
            store_dir = d / "labels"
            if store_dir.exists():
                for p in store_dir.iterdir():
                    p.unlink()
            store = LabelStore(store_dir)
            man = self._manifest(self.cfg.pretrain_manifest)
            counts = extract_labels_for_corpus(lambda utt: latent[utt.id], man, cb, store, kind)
            info = {"source": source, "selector": selector, "kind": kind, "frame_rate": rate,
                    "inertia": round(cb.metadata["inertia"][-1], 4), "kmeans_iters": cb.metadata["iters"],
                    "labels": counts}
            info.update(self._purity(store))
            return [f"it{it}/codebook.bin", f"it{it}/labels"], info

        return self._stage(name, inputs, run)

    def _purity(self, store: LabelStore) -> dict:
        if not self.cfg.pretrain_alignments:
            return {}
        path = self.data_dir / self.cfg.pretrain_alignments
        if not path.exists():
            return {}
        m = codebook_quality(store, load_alignments(path))
        return {"purity": round(m.purity, 6), "pnmi": round(m.pnmi, 6)}

    def stage3(self, it: int) -> dict:
        name = f"it{it}/stage3"
        inputs = {"labels": self._digest(f"it{it}/stage2"), "features": self._digest("features"),
                  "epochs": self.cfg.pretrain_epochs_at(it),
                  "config": self._config_digest("encoder", "mask", "k", "pretrain_lr", "warmup_steps",
                                                "clip_norm", "batch_frames", "seed", "fresh_init",
                                                "streaming", "chunk_choices_ms", "context_choices_ms")}
        if not self.cfg.fresh_init:
            src = self.cfg.source_at(it)
            if src not in SPECTRAL_SOURCES:
                src = "it0/stage1" if src == "asr" else src
                inputs["warm_start"] = f"{src}:{self._digest(src)}"

        def run():
            feats = self.features(self.cfg.pretrain_manifest)
            labels, skipped = select_labels(sorted(feats), feats, LabelStore(self.root / f"it{it}" / "labels"))
            for uid, why in skipped:
                log.warning("pretrain skips %s: %s", uid, why)
            if "warm_start" in inputs:
                src = inputs["warm_start"].split(":")[0]
                model = load_transducer(self.root / f"{src}.ckpt").encoder
            else:
                model = init_encoder(self.cfg.encoder, stage_seed(self.cfg.seed, it, 30))
            head = PretrainHead(self.cfg.k, model.cfg.width, model.cfg.input_dim, seed=stage_seed(self.cfg.seed, it, 31))
            opt = Adam(all_params(model, head), lr=self.cfg.pretrain_lr, warmup_steps=self.cfg.warmup_steps,
                       clip_norm=self.cfg.clip_norm)
            history, steps = [], []
            seed = stage_seed(self.cfg.seed, it, 32)
            for epoch in range(self.cfg.pretrain_epochs_at(it)):
                stats = pretrain_epoch(model, head, labels, feats, opt, self.cfg.mask, self.cfg.batch_frames,
                                       seed, epoch, plan_sampler(self.cfg), steps)
                log.info("epoch %d loss %.4f acc %.3f", epoch + 1, stats["loss"], stats["acc"])
                history.append({"loss": round(stats["loss"], 6), "acc": round(stats["acc"], 6)})
            rel = f"{name}.ckpt"
            save_params(self.root / rel, "pretrain", {"encoder": model.cfg.to_dict(), "k": self.cfg.k},
                        all_params(model, head), {"lineage": name, "inputs": inputs})
            info = {"epochs": history, "skipped": len(skipped)}
            if steps:
                info["first_step_loss"] = round(steps[0]["loss"], 6)
            return [rel], info

        return self._stage(name, inputs, run)

    def stage4(self, it: int) -> dict:
        name = f"it{it}/stage4"
        inputs = {"encoder": self._digest(f"it{it}/stage3"), "features": self._digest("features"),
                  "tokenizer": self._digest("tokenizer"), "epochs": self.cfg.finetune_epochs_at(it),
                  "config": self._config_digest("predictor", "finetune_lr", "warmup_steps", "clip_norm",
                                                "finetune_batch_frames", "seed", "streaming", "chunk_choices_ms",
                                                "context_choices_ms", "decode_chunk_ms", "decode_context_ms",
                                                "beam")}

        def run():
            _, params = read_checkpoint_file(self.root / f"it{it}/stage3.ckpt")
            enc = encoder_from_params(self.cfg.encoder, params)
            model = init_transducer(enc, self.cfg.predictor.for_vocab(self.tokenizer().vocab_size),
                                    stage_seed(self.cfg.seed, it, 40))
            history = self._train_transducer(model, self.cfg.finetune_epochs_at(it), stage_seed(self.cfg.seed, it, 41))
            rel = f"{name}.ckpt"
            save_transducer(self.root / rel, model, self._lineage(name, inputs))
            outs, wer = self.evaluate(model, f"it{it}")
            return [rel, *outs], {"loss_per_symbol": history, "wer": wer}

        return self._stage(name, inputs, run)

    # -- driver ----------------------------------------------------------
    def run(self, iterations: Optional[int] = None, stop_after: Optional[str] = None) -> dict:
        """Run Stage 1 once and ``iterations`` rounds of Stages 2-4; returns the report.

        ``stop_after`` names a stage (e.g. ``"it1/stage3"``) after which the
        run returns early, leaving a resumable work directory.
        """
        n = self.cfg.iterations if iterations is None else iterations
        if n < 1:
            raise ConfigError("iterations must be >= 1")
        self._acquire()
        try:
            self.state = self._load_state()
            self.stage_data()
            self.stage_features()
            self.stage_tokenizer()
            plan = []
            if self.cfg.needs_stage1:
                plan.append(("it0/stage1", self.stage1))
            for it in range(1, n + 1):
                plan += [(f"it{it}/stage2", lambda it=it: self.stage2(it)),
                         (f"it{it}/stage3", lambda it=it: self.stage3(it)),
                         (f"it{it}/stage4", lambda it=it: self.stage4(it))]
            for stage_name, fn in plan:
                fn()
                if stage_name == stop_after:
                    return {}
            report = self.report(n)
            write_report(self.root, report)
            return report
        finally:
            self._release()

    def report(self, n: int) -> dict:
        st = self.state["stages"]
        rows = []
        if "it0/stage1" in st and self.cfg.needs_stage1:
            rows.append({"name": "from-scratch", "iteration": 0, "wer": st["it0/stage1"]["info"]["wer"]})
        for it in range(1, n + 1):
            s2, s4 = st[f"it{it}/stage2"]["info"], st[f"it{it}/stage4"]["info"]
            row = {"name": f"iteration {it}", "iteration": it, "source": s2["source"], "selector": s2["selector"],
                   "wer": s4["wer"]}
            for key in ("purity", "pnmi"):
                if key in s2:
                    row[key] = s2[key]
            rows.append(row)
        return {"label_source": self.cfg.label_source, "streaming": self.cfg.streaming, "rows": rows}


def format_report(report: dict) -> str:
    rows = report["rows"]
    sets = list(rows[0]["wer"]["sets"]) if rows else []
    head = ["system", "source", "purity", *sets, "avg"]
    lines = []
    for r in rows:
        wer = r["wer"]
        cells = [r["name"], r.get("source", "-"),
                 f"{r['purity']:.3f}" if "purity" in r else "-",
                 *[f"{100 * wer['sets'][s]['wer']:.2f}" for s in sets], f"{100 * wer['avg']:.2f}"]
        lines.append(cells)
    widths = [max(len(str(c)) for c in col) for col in zip(head, *lines)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*c) for c in lines]
    return "\n".join(out) + "\n"


def write_report(root, report: dict) -> None:
    root = Path(root)
    atomic_write(root / "report.json", (json.dumps(report, indent=1, sort_keys=True) + "\n").encode())
    atomic_write(root / "report.txt", format_report(report).encode())


def run_pipeline(cfg: PipelineConfig, iterations: Optional[int] = None) -> dict:
    return Pipeline(cfg).run(iterations)


def streaming_variant(cfg: PipelineConfig, iterations: Optional[int] = None) -> dict:
    """Causal encoder with per-batch chunk/context sampling and chunked decoding."""
    if not cfg.encoder.causal:
        raise ConfigError("the streaming variant needs encoder.causal = true")
    cfg = dataclasses.replace(cfg, streaming=True)
    return Pipeline(cfg).run(iterations)
