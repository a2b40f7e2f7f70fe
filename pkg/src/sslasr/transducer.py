"""RNN-T head: stateless predictor, additive joiner, exact lattice loss and decoders."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .data import make_batches, pad_batch
from .encoder import EncoderConfig, EncoderModel, encoder_from_params, forward, init_encoder, streaming_plan
from .errors import ConfigError
from .formats import read_checkpoint_file, write_checkpoint_file

log = logging.getLogger(__name__)

BLANK = 0


@dataclass(frozen=True)
class TransducerConfig:
    vocab_size: int  # output units including blank (id 0)
    context_size: int = 2
    embed_dim: int = 32
    pred_hidden: int = 64
    joint_hidden: int = 64

    def __post_init__(self):
        if self.context_size < 1:
            raise ConfigError("context_size must be >= 1")
        if self.vocab_size < 2:
            raise ConfigError("vocabulary needs blank plus at least one unit")


class TransducerModel:
    def __init__(self, encoder: EncoderModel, cfg: TransducerConfig, params: dict):
        self.encoder = encoder
        self.cfg = cfg
        self.params = params

    def all_params(self) -> dict:
        p = {f"encoder.{k}": v for k, v in self.encoder.params.items()}
        p.update(self.params)
        return p


def init_transducer(encoder: EncoderModel, cfg: TransducerConfig, seed: int = 0) -> TransducerModel:
    rng = np.random.default_rng(seed)
    V1, E, H, J = cfg.vocab_size, cfg.embed_dim, cfg.pred_hidden, cfg.joint_hidden
    D = encoder.cfg.width
    P = {
        "pred.emb": ad.parameter((V1, E), rng, scale=1.0),
        "pred.w": ad.parameter((cfg.context_size * E, H), rng),
        "pred.b": ad.parameter((H,), rng, scale=0),
        "join.enc": ad.parameter((D, J), rng),
        "join.pred": ad.parameter((H, J), rng),
        "join.b": ad.parameter((J,), rng, scale=0),
        "join.out": ad.parameter((J, V1), rng),
        "join.out_b": ad.parameter((V1,), rng, scale=0),
    }
    return TransducerModel(encoder, cfg, P)


# ---------------------------------------------------------------------------
# predictor and joiner
# ---------------------------------------------------------------------------


def contexts_for(labels, context_size: int) -> np.ndarray:
    """(U+1, context) windows: row u holds the last labels before position u, blank padded."""
    labels = np.asarray(labels, dtype=np.int64)
    padded = np.concatenate([np.full(context_size, BLANK, dtype=np.int64), labels])
    return np.stack([padded[u : u + context_size] for u in range(len(labels) + 1)])


def predictor_forward(model: TransducerModel, contexts):
    """(..., context) label windows -> (..., pred_hidden)."""
    P = model.params
    contexts = np.asarray(contexts, dtype=np.int64)
    if contexts.shape[-1] != model.cfg.context_size:
        raise ConfigError(f"context windows must have length {model.cfg.context_size}")
    emb = ad.embedding_lookup(P["pred.emb"], contexts)  # (..., ctx, E)
    flat = ad.reshape(emb, contexts.shape[:-1] + (model.cfg.context_size * model.cfg.embed_dim,))
    return ad.swish(ad.linear(flat, P["pred.w"], P["pred.b"]))


def project_encoder(model: TransducerModel, enc):
    return ad.matmul(enc, model.params["join.enc"])


def project_predictor(model: TransducerModel, g):
    return ad.linear(g, model.params["join.pred"], model.params["join.b"])


def joiner(model: TransducerModel, enc_proj, pred_proj):
    """Broadcast-add projected encoder and predictor states, swish, project to V+1 logits."""
    h = ad.swish(ad.add(enc_proj, pred_proj))
    return ad.linear(h, model.params["join.out"], model.params["join.out_b"])


def lattice_log_probs(model: TransducerModel, enc, labels, u_lens):
    """(B, T, U+1, V+1) log-probabilities for padded encoder outputs and labels."""
    labels = np.asarray(labels, dtype=np.int64)
    B, U = labels.shape
    ctx = np.stack([contexts_for(labels[b], model.cfg.context_size) for b in range(B)])  # (B, U+1, c)
    g = project_predictor(model, predictor_forward(model, ctx))  # (B, U+1, J)
    e = project_encoder(model, enc)  # (B, T, J)
    B_, T, J = e.shape
    logits = joiner(model, ad.reshape(e, (B, T, 1, J)), ad.reshape(g, (B, 1, U + 1, J)))
    return ad.log_softmax(logits, axis=-1)


def transducer_loss(model: TransducerModel, enc, t_lens, labels, u_lens):
    """Per-utterance -log P(y | x) for a padded batch."""
    labels = np.asarray(labels, dtype=np.int64)
    V1 = model.cfg.vocab_size
    for b, n in enumerate(np.asarray(u_lens)):
        y = labels[b, :n]
        if y.size and (y.min() < 1 or y.max() >= V1):
            raise ConfigError("labels must lie in 1..V (blank excluded)")
    lp = lattice_log_probs(model, enc, labels, u_lens)
    return ad.rnnt_loss(lp, labels, t_lens, u_lens)


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------

MAX_ENUMERATION = 100_000


def alignment_count(T: int, U: int) -> int:
    """Monotone alignments with the final step a blank: C(T + U - 1, U)."""
    return math.comb(T + U - 1, U)


def brute_force_transducer(log_probs, y) -> float:
    """-log P(y|x) by explicit enumeration of every alignment of a (T, U+1, V+1) lattice."""
    log_probs = np.asarray(log_probs, dtype=np.float64)
    T, U1, _ = log_probs.shape
    U = U1 - 1
    y = list(y)
    if len(y) != U:
        raise ValueError("label length does not match the lattice")
    if alignment_count(T, U) > MAX_ENUMERATION:
        raise ValueError(f"{alignment_count(T, U)} alignments exceed the enumeration limit")
    scores = []
    n = T + U - 1  # the last step is always the final blank
    for emit_slots in itertools.combinations(range(n), U):
        emit_slots = set(emit_slots)
        t = u = 0
        s = 0.0
        for step in range(n):
            if step in emit_slots:
                s += log_probs[t, u, y[u]]
                u += 1
            else:
                s += log_probs[t, u, BLANK]
                t += 1
        s += log_probs[T - 1, U, BLANK]
        scores.append(s)
    return float(-np.logaddexp.reduce(scores))


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


class _Scorer:
    """Per-utterance cache of projected predictor states keyed by context."""

    def __init__(self, model: TransducerModel, enc_frames):
        self.model = model
        with ad.no_grad():
            self.e = project_encoder(model, ad.Tensor(np.asarray(enc_frames))).data.astype(np.float64)
        self.cache = {}
        P = model.params
        self.w_out = P["join.out"].data.astype(np.float64)
        self.b_out = P["join.out_b"].data.astype(np.float64)

    def _pred(self, ctx):
        if ctx not in self.cache:
            with ad.no_grad():
                g = project_predictor(self.model, predictor_forward(self.model, np.array([ctx])))
            self.cache[ctx] = g.data[0].astype(np.float64)
        return self.cache[ctx]

    def log_probs(self, t: int, ctx: tuple) -> np.ndarray:
        h = self.e[t] + self._pred(ctx)
        h = h / (1.0 + np.exp(-h))
        z = h @ self.w_out + self.b_out
        z = z - z.max()
        return z - np.log(np.exp(z).sum())


def _ctx(hyp, c):
    tail = hyp[-c:] if hyp else ()
    return (BLANK,) * (c - len(tail)) + tuple(tail)


def greedy_decode(model: TransducerModel, enc_frames, max_symbols_per_frame: int = 5):
    """Frame-synchronous argmax decoding; returns ``(tokens, log-score)``.

    At each frame tokens are emitted while the argmax is not blank, up to the
    cap; the frame is then left and its blank log-probability added.
    """
    sc = _Scorer(model, enc_frames)
    c = model.cfg.context_size
    hyp: list = []
    score = 0.0
    for t in range(sc.e.shape[0]):
        for n in range(max_symbols_per_frame + 1):
            lp = sc.log_probs(t, _ctx(hyp, c))
            k = int(np.argmax(lp))
            if k == BLANK or n == max_symbols_per_frame:
                score += lp[BLANK]
                break
            hyp.append(k)
            score += lp[k]
    return hyp, float(score)


def beam_decode(model: TransducerModel, enc_frames, beam: int = 4, max_symbols_per_frame: int = 5):
    """Frame-synchronous beam search with prefix merging; returns ``(tokens, log-score)``.

    Within a frame each expansion step scores, for every live hypothesis,
    its blank continuation (which finishes the frame) and every token
    continuation. Candidates are ranked by score, blank first then tokens
    by id on ties, identical prefixes merged with log-sum-exp, and only the
    top ``beam`` survive the step. Finished hypotheses carry into the next
    frame, again pruned to ``beam``. A hypothesis that has emitted the cap
    for this frame may only finish it.
    """
    if beam < 1:
        raise ConfigError("beam must be >= 1")
    sc = _Scorer(model, enc_frames)
    c = model.cfg.context_size
    hyps = {(): 0.0}
    for t in range(sc.e.shape[0]):
        finished: dict = {}
        live = [(h, s, 0) for h, s in hyps.items()]
        while live:
            pool = []  # (score, order, kind, prefix, emitted)
            for order, (h, s, n) in enumerate(live):
                lp = sc.log_probs(t, _ctx(h, c))
                pool.append((s + lp[BLANK], (order, 0), "done", h, n))
                if n < max_symbols_per_frame:
                    for k in range(1, lp.shape[0]):
                        pool.append((s + lp[k], (order, k), "live", h + (k,), n + 1))
            merged: dict = {}
            for sc_, order, kind, h, n in pool:
                key = (kind, h)
                if key in merged:
                    prev = merged[key]
                    merged[key] = (np.logaddexp(prev[0], sc_), prev[1], kind, h, max(prev[4], n))
                else:
                    merged[key] = (sc_, order, kind, h, n)
            ranked = sorted(merged.values(), key=lambda r: (-r[0], r[1]))[:beam]
            live = []
            for sc_, _, kind, h, n in ranked:
                if kind == "done":
                    finished[h] = np.logaddexp(finished[h], sc_) if h in finished else sc_
                else:
                    live.append((h, sc_, n))
        best = sorted(finished.items(), key=lambda kv: (-kv[1], len(kv[0]), kv[0]))[:beam]
        hyps = dict(best)
    h, s = max(hyps.items(), key=lambda kv: (kv[1], -len(kv[0])))
    return list(h), float(s)


def path_score(model: TransducerModel, enc_frames, tokens, max_symbols_per_frame: int = 5) -> float:
    """Log-probability of ``tokens`` summed over alignments obeying the per-frame cap."""
    sc = _Scorer(model, enc_frames)
    c = model.cfg.context_size
    tokens = list(tokens)
    U = len(tokens)
    T = sc.e.shape[0]
    # alpha[u] at the start of frame t, split by emissions already made in the frame
    alpha = np.full(U + 1, -np.inf)
    alpha[0] = 0.0
    for t in range(T):
        nxt = np.full(U + 1, -np.inf)
        cur = alpha.copy()
        for n in range(max_symbols_per_frame + 1):
            step = np.full(U + 1, -np.inf)
            for u in range(U + 1):
                if cur[u] == -np.inf:
                    continue
                lp = sc.log_probs(t, _ctx(tuple(tokens[:u]), c))
                nxt[u] = np.logaddexp(nxt[u], cur[u] + lp[BLANK])
                if u < U and n < max_symbols_per_frame:
                    step[u + 1] = np.logaddexp(step[u + 1], cur[u] + lp[tokens[u]])
            cur = step
        alpha = nxt
    return float(alpha[U])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def encode_batch(model: TransducerModel, feats: list, plan_ms=None):
    x, lengths = pad_batch(feats)
    plan = None
    if plan_ms is not None:
        Tb = -(-x.shape[1] // model.encoder.cfg.conv_embed_factor)
        plan = streaming_plan(Tb, plan_ms[0], plan_ms[1], model.encoder.cfg)
    return forward(model.encoder, x, plan, lengths)


def batch_loss(model: TransducerModel, feats: list, targets: list, plan_ms=None):
    """Mean per-utterance transducer loss and total symbol count."""
    out = encode_batch(model, feats, plan_ms)
    u_lens = np.array([len(y) for y in targets], dtype=np.int64)
    U = max(int(u_lens.max()), 0)
    labels = np.zeros((len(targets), U), dtype=np.int64)
    for i, y in enumerate(targets):
        labels[i, : len(y)] = y
    losses = transducer_loss(model, out.final, out.lengths, labels, u_lens)
    return ad.mean(losses), losses


def finetune_epoch(model: TransducerModel, feats: dict, targets: dict, opt, batch_frames: int, seed: int,
                   epoch: int, plan_sampler: Optional[Callable] = None, step_log: Optional[list] = None) -> dict:
    """One pass over ``targets`` (id -> token ids); returns loss per symbol."""
    rng = np.random.default_rng([seed, epoch, 1])
    ids = [u for u in targets if u in feats]
    lengths = {u: feats[u].shape[0] for u in ids}
    tot_loss = 0.0
    tot_sym = tot_utt = 0
    for batch in make_batches(lengths, batch_frames, rng):
        plan_ms = plan_sampler(rng) if plan_sampler else None
        loss, per = batch_loss(model, [feats[u] for u in batch], [targets[u] for u in batch], plan_ms)
        ad.backward(loss)
        info = opt.step()
        n_sym = sum(len(targets[u]) for u in batch)
        tot_loss += float(per.data.sum())
        tot_sym += n_sym
        tot_utt += len(batch)
        if step_log is not None:
            rec = {"epoch": epoch, "step": opt.step_count, "loss": float(loss.data), "lr": info["lr"]}
            if plan_ms is not None:
                rec["chunk_ms"], rec["context_ms"] = plan_ms
            step_log.append(rec)
    return {"loss_per_symbol": tot_loss / max(tot_sym, 1), "loss_per_utt": tot_loss / max(tot_utt, 1)}


def decode_corpus(model: TransducerModel, feats: dict, ids, beam: int = 1, batch_frames: int = 8000,
                  max_symbols_per_frame: int = 5, plan_ms=None) -> dict:
    """id -> (tokens, score); ``beam=1`` uses greedy search."""
    out = {}
    lengths = {u: feats[u].shape[0] for u in ids}
    for batch in make_batches(lengths, batch_frames):
        with ad.no_grad():
            enc = encode_batch(model, [feats[u] for u in batch], plan_ms)
        for i, u in enumerate(batch):
            frames = enc.final.data[i, : enc.lengths[i]]
            if beam == 1:
                out[u] = greedy_decode(model, frames, max_symbols_per_frame)
            else:
                out[u] = beam_decode(model, frames, beam, max_symbols_per_frame)
    return {u: out[u] for u in ids if u in out}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_transducer(path, model: TransducerModel, extra: Optional[dict] = None) -> str:
    header = {"kind": "transducer",
              "config": {"encoder": model.encoder.cfg.to_dict(), "transducer": asdict(model.cfg)},
              **(extra or {})}
    return write_checkpoint_file(path, header, {k: v.data for k, v in model.all_params().items()})


def load_transducer(path) -> TransducerModel:
    header, params = read_checkpoint_file(path)
    if header.get("kind") != "transducer":
        raise ConfigError(f"{path} holds a {header.get('kind')} checkpoint, not a transducer")
    enc = encoder_from_params(EncoderConfig.from_dict(header["config"]["encoder"]), params)
    cfg = TransducerConfig(**header["config"]["transducer"])
    model = init_transducer(enc, cfg, 0)
    for k in model.params:
        model.params[k] = ad.Tensor(np.array(params[k], dtype=np.float32), requires_grad=True)
    return model
