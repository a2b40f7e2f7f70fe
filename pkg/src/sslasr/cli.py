"""Command-line entry point: ``sslasr <command> [options] [key=value ...]``.

Every command resolves a pipeline configuration from ``--config`` plus
trailing ``key=value`` overrides and echoes it, with the seed, before doing
any work. Outputs go under ``--workdir`` (default ``$SSLASR_WORKDIR`` or the
current directory).

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigError, SslAsrError

log = logging.getLogger("sslasr")

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: usage: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--workdir", help="output directory (default: $SSLASR_WORKDIR or .)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--threads", type=int, help="thread cap for compiled kernels")
    p.add_argument("--log-level", default="INFO")
    p.add_argument("overrides", nargs="*", metavar="key=value")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sslasr", description="ASR-biased self-supervised pre-training toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="generate the synthetic corpus")
    p.add_argument("--out", help="target directory (default: <workdir>/data)")
    _add_common(p)

    p = sub.add_parser("vad", help="energy-based segmentation of a WAV file")
    p.add_argument("wav")
    p.add_argument("--threshold-db", type=float, default=-40.0)
    p.add_argument("--min-segment-ms", type=float, default=1000.0)
    p.add_argument("--max-segment-ms", type=float, default=30000.0)
    _add_common(p)

    p = sub.add_parser("fbank", help="compute a feature cache for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=("fbank", "mfcc"), default="fbank")
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("kmeans", help="fit a codebook")
    p.add_argument("--source", default="fbank", help="fbank, mfcc or a checkpoint path")
    p.add_argument("--manifest", help="default: <data>/pretrain.jsonl")
    p.add_argument("--k", type=int)
    p.add_argument("--selector", default="final")
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("extract-labels", help="label a manifest with a codebook")
    p.add_argument("--codebook", required=True)
    p.add_argument("--source", default="fbank", help="fbank, mfcc or a checkpoint path")
    p.add_argument("--manifest")
    p.add_argument("--selector", default="final")
    p.add_argument("--out", help="label store directory")
    _add_common(p)

    p = sub.add_parser("pretrain", help="masked prediction on stored labels")
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("finetune", help="transducer training on the labeled split")
    p.add_argument("--init", help="checkpoint whose encoder initialises the model")
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("decode", help="write hypotheses as JSON lines")
    p.add_argument("--ckpt", required=True, help="checkpoint path or a stage tag such as it2/stage4")
    p.add_argument("--manifest")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out")
    _add_common(p)

    p = sub.add_parser("evaluate", help="WER of hypothesis files")
    p.add_argument("--set", dest="sets", nargs=3, action="append", required=True,
                   metavar=("NAME", "HYPS", "REFS"))
    p.add_argument("--out", help="report JSON path")
    _add_common(p)

    p = sub.add_parser("pipeline", help="run the multi-iteration pipeline")
    p.add_argument("--iterations", type=int)
    _add_common(p)

    p = sub.add_parser("streaming-pipeline", help="pipeline with a causal encoder and chunk sampling")
    p.add_argument("--iterations", type=int)
    _add_common(p)

    p = sub.add_parser("inspect", help="print an artifact header without loading its payload")
    p.add_argument("path")
    _add_common(p)
    return parser


# ---------------------------------------------------------------------------


def resolve_config(args):
    from .config import load_kv_file, parse_overrides
    from .pipeline import PipelineConfig

    values = load_kv_file(args.config) if args.config else {}
    values.update(parse_overrides(args.overrides))
    workdir = args.workdir or os.environ.get("SSLASR_WORKDIR") or values.get("workdir") or "."
    values["workdir"] = workdir
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.command == "streaming-pipeline":
        values["streaming"] = "true"
        values.setdefault("encoder.causal", "true")
    if getattr(args, "iterations", None) is not None:
        values["iterations"] = str(args.iterations)
    return PipelineConfig.from_kv(values)


def _data_path(cfg, name):
    base = Path(cfg.data_dir) if cfg.data_dir else Path(cfg.workdir) / "data"
    return base / name


def _manifest(cfg, arg, default):
    from .corpus import load_manifest

    return load_manifest(Path(arg) if arg else _data_path(cfg, default))


def _fbank(cfg, manifest, tag=None):
    from .data import corpus_features

    cache = None
    if tag:
        cache = Path(cfg.workdir) / "features" / f"{tag}.fbank.feats"
        cache.parent.mkdir(parents=True, exist_ok=True)
    return corpus_features(manifest, "fbank", cache_path=cache)


def _source_features(cfg, source, selector, feats):
    from .encoder import load_encoder
    from .features import FeatureMatrix, mfcc
    from .pipeline import encode_corpus

    if source == "fbank":
        return {u: FeatureMatrix(f, 100.0, "fbank") for u, f in feats.items()}
    if source == "mfcc":
        return {u: mfcc(FeatureMatrix(f, 100.0, "fbank")) for u, f in feats.items()}
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"source {source!r} is neither a spectral kind nor an existing checkpoint")
    enc = load_encoder(path)
    plan = (cfg.decode_chunk_ms, cfg.decode_context_ms) if enc.cfg.causal else None
    return encode_corpus(enc, feats, selector, plan_ms=plan)


def _ckpt_path(cfg, ref):
    p = Path(ref)
    if p.exists():
        return p
    tagged = Path(cfg.workdir) / f"{ref}.ckpt"
    if tagged.exists():
        return tagged
    raise ConfigError(f"checkpoint {ref!r} not found (looked for {p} and {tagged})")


def _out(cfg, arg, default):
    p = Path(arg) if arg else Path(cfg.workdir) / default
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------


def cmd_synth_data(cfg, args):
    from .corpus import synth_corpus

    out = Path(args.out) if args.out else Path(cfg.workdir) / "data"
    mans = synth_corpus(cfg.synth, out)
    for split, m in mans.items():
        print(f"{split}: {len(m)} utterances, {m.hours:.3f} h -> {out / (split + '.jsonl')}")


def cmd_vad(cfg, args):
    from .corpus import energy_vad, read_wav

    segs = energy_vad(read_wav(args.wav), threshold_db=args.threshold_db,
                      min_segment_ms=args.min_segment_ms, max_segment_ms=args.max_segment_ms)
    for a, b in segs:
        print(json.dumps({"start": round(a, 4), "end": round(b, 4)}))


def cmd_fbank(cfg, args):
    from .data import corpus_features
    from .features import FeatureConfig

    man = _manifest(cfg, args.manifest, cfg.pretrain_manifest)
    out = _out(cfg, args.out, f"features/{Path(args.manifest).stem}.{args.kind}.feats")
    errors = []
    feats = corpus_features(man, args.kind, FeatureConfig(), cache_path=out, errors=errors)
    print(f"wrote {len(feats)} records to {out}" + (f" ({len(errors)} failed)" if errors else ""))


def cmd_kmeans(cfg, args):
    from .codebook import kmeans_fit, subsample_frames
    from .pipeline import stage_seed

    man = _manifest(cfg, args.manifest, cfg.pretrain_manifest)
    latent = _source_features(cfg, args.source, args.selector, _fbank(cfg, man))
    ids = sorted(latent)
    first = latent[ids[0]]
    x = subsample_frames([latent[u].frames for u in ids], cfg.kmeans_max_frames, stage_seed(cfg.seed, 1, 20))
    cb = kmeans_fit(x, args.k or cfg.k, cfg.kmeans_iters, stage_seed(cfg.seed, 1, 21), first.kind, first.frame_rate)
    cb.metadata["source"] = str(args.source)
    out = _out(cfg, args.out, "codebook.bin")
    cb.save(out)
    for i, v in enumerate(cb.metadata["inertia"], 1):
        log.info("lloyd iteration %d inertia %.6g", i, v)
    print(f"codebook k={cb.k} dim={cb.dim} inertia={cb.metadata['inertia'][-1]:.6g} "
          f"converged={cb.metadata['converged']} -> {out}")


def cmd_extract_labels(cfg, args):
    from .codebook import Codebook, codebook_quality, extract_labels_for_corpus
    from .corpus import load_alignments
    from .formats import LabelStore

    man = _manifest(cfg, args.manifest, cfg.pretrain_manifest)
    cb = Codebook.load(args.codebook)
    latent = _source_features(cfg, args.source, args.selector, _fbank(cfg, man))
    store = LabelStore(Path(args.out) if args.out else Path(cfg.workdir) / "labels")
    counts = extract_labels_for_corpus(lambda u: latent[u.id], man, cb, store)
    print(json.dumps(counts, sort_keys=True))
    align = Path(str(man.root)) / (Path(args.manifest or cfg.pretrain_manifest).stem + ".align.jsonl")
    if align.exists():
        m = codebook_quality(store, load_alignments(align))
        print(f"purity={m.purity:.4f} pnmi={m.pnmi:.4f}")
    if counts["failed"]:
        raise SslAsrError(f"{counts['failed']} utterances failed; see {store.root / 'errors.jsonl'}")


def cmd_pretrain(cfg, args):
    from .encoder import init_encoder, save_params
    from .formats import LabelStore
    from .optim import Adam
    from .pipeline import plan_sampler, stage_seed
    from .pretrain import PretrainHead, all_params, pretrain_epoch, select_labels

    man = _manifest(cfg, args.manifest, cfg.pretrain_manifest)
    feats = _fbank(cfg, man)
    labels, skipped = select_labels([u.id for u in man], feats, LabelStore(args.labels))
    for uid, why in skipped:
        log.warning("skipping %s: %s", uid, why)
    if not labels:
        raise ConfigError("no usable label records")
    k = max(int(y.max()) for _, y in labels.values()) + 1
    k = max(k, cfg.k)
    model = init_encoder(cfg.encoder, stage_seed(cfg.seed, 1, 30))
    head = PretrainHead(k, model.cfg.width, model.cfg.input_dim, seed=stage_seed(cfg.seed, 1, 31))
    opt = Adam(all_params(model, head), lr=cfg.pretrain_lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm)
    for epoch in range(args.epochs):
        stats = pretrain_epoch(model, head, labels, feats, opt, cfg.mask, cfg.batch_frames,
                               stage_seed(cfg.seed, 1, 32), epoch, plan_sampler(cfg))
        print(f"epoch {epoch + 1} loss {stats['loss']:.4f} acc {stats['acc']:.4f}")
    out = _out(cfg, args.out, "pretrain.ckpt")
    digest = save_params(out, "pretrain", {"encoder": model.cfg.to_dict(), "k": k}, all_params(model, head),
                         {"lineage": "cli/pretrain"})
    print(f"checkpoint {out} sha256={digest}")


def cmd_finetune(cfg, args):
    from .encoder import init_encoder, load_encoder
    from .optim import Adam
    from .pipeline import plan_sampler, stage_seed
    from .tokenizer import SPECIALS, BpeModel, _word_symbols, bpe_train
    from .transducer import finetune_epoch, init_transducer, save_transducer

    man = _manifest(cfg, args.manifest, cfg.finetune_manifest)
    texts = {u.id: u.text for u in man if u.text}
    if not texts:
        raise ConfigError("manifest has no transcripts")
    tok_path = Path(cfg.workdir) / "tokenizer.json"
    if tok_path.exists():
        tok = BpeModel.load(tok_path)
    else:
        size = cfg.bpe_vocab_size or len(SPECIALS) + len(
            {s for t in texts.values() for w in t.split() for s in _word_symbols(w)})
        tok = bpe_train(list(texts.values()), size)
        tok.save(tok_path)
    enc = load_encoder(_ckpt_path(cfg, args.init)) if args.init else init_encoder(cfg.encoder, stage_seed(cfg.seed, 0, 1))
    model = init_transducer(enc, cfg.predictor.for_vocab(tok.vocab_size), stage_seed(cfg.seed, 0, 2))
    feats = _fbank(cfg, man)
    targets = {u: tok.encode(t) for u, t in texts.items()}
    opt = Adam(model.all_params(), lr=cfg.finetune_lr, warmup_steps=cfg.warmup_steps, clip_norm=cfg.clip_norm)
    for epoch in range(args.epochs):
        stats = finetune_epoch(model, feats, targets, opt, cfg.finetune_batch_frames, stage_seed(cfg.seed, 0, 3), epoch,
                               plan_sampler(cfg))
        print(f"epoch {epoch + 1} loss/symbol {stats['loss_per_symbol']:.4f}")
    out = _out(cfg, args.out, "finetune.ckpt")
    digest = save_transducer(out, model, {"lineage": "cli/finetune", "tokenizer": tok.to_json()})
    print(f"checkpoint {out} sha256={digest}")


def _tokenizer_for(cfg, header):
    from .tokenizer import BpeModel

    if "tokenizer" in header:
        d = json.loads(header["tokenizer"])
        return BpeModel(d["merges"], d["vocab"])
    path = Path(cfg.workdir) / "tokenizer.json"
    if not path.exists():
        raise ConfigError("checkpoint carries no tokenizer and <workdir>/tokenizer.json is missing")
    return BpeModel.load(path)


def cmd_decode(cfg, args):
    from .formats import canonical_json, read_checkpoint_file
    from .transducer import decode_corpus, load_transducer

    path = _ckpt_path(cfg, args.ckpt)
    header, _ = read_checkpoint_file(path, header_only=True)
    tok = _tokenizer_for(cfg, header)
    model = load_transducer(path)
    man = _manifest(cfg, args.manifest, cfg.test_manifests[0])
    feats = _fbank(cfg, man)
    # causal models decode with the streaming plan
    plan = (cfg.decode_chunk_ms, cfg.decode_context_ms) if model.encoder.cfg.causal else None
    ids = [u.id for u in man if u.id in feats]
    res = decode_corpus(model, feats, ids, beam=args.beam, plan_ms=plan)
    out = _out(cfg, args.out, f"hyps.{Path(args.manifest or cfg.test_manifests[0]).stem}.jsonl")
    with open(out, "w", encoding="utf-8") as f:
        for u in ids:
            f.write(canonical_json({"id": u, "text": tok.decode(res[u][0]), "score": round(float(res[u][1]), 6)}) + "\n")
    print(f"wrote {len(ids)} hypotheses to {out}")


def _read_hyps(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if line.strip():
                rec = json.loads(line)
                if "id" not in rec or "text" not in rec:
                    raise ConfigError(f"{path}:{lineno}: hypothesis needs 'id' and 'text'")
                out[rec["id"]] = rec["text"]
    return out


def cmd_evaluate(cfg, args):
    from .corpus import load_manifest
    from .evaluate import wer

    sets = {name: (load_manifest(refs), _read_hyps(hyps)) for name, hyps, refs in args.sets}
    try:
        report = wer(sets)
    except KeyError as exc:
        raise SslAsrError(str(exc.args[0])) from exc
    print(report.table())
    if args.out:
        out = _out(cfg, args.out, "wer.json")
        out.write_text(json.dumps(report.as_dict(), indent=1, sort_keys=True) + "\n")


def cmd_pipeline(cfg, args):
    from .pipeline import Pipeline, format_report

    report = Pipeline(cfg).run()
    print(format_report(report), end="")
    print(f"report: {Path(cfg.workdir) / 'report.json'}")


def cmd_inspect(cfg, args):
    from .formats import inspect_header

    print(json.dumps(inspect_header(args.path), indent=1, sort_keys=True, default=str))


COMMANDS = {
    "synth-data": cmd_synth_data, "vad": cmd_vad, "fbank": cmd_fbank, "kmeans": cmd_kmeans,
    "extract-labels": cmd_extract_labels, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "decode": cmd_decode, "evaluate": cmd_evaluate, "pipeline": cmd_pipeline,
    "streaming-pipeline": cmd_pipeline, "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        if args.threads:
            from . import _kernels

            _kernels.set_threads(args.threads)
        print(f"# sslasr {args.command}")
        print(cfg.describe())
        print(f"# seed = {cfg.seed}", flush=True)
        COMMANDS[args.command](cfg, args)
        return 0
    except ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (SslAsrError, OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: runtime: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME


def _setup_logging(level: str) -> None:
    # one handler on the package logger, bound to the current stderr
    for h in list(log.handlers):
        if getattr(h, "_sslasr_cli", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler._sslasr_cli = True
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
