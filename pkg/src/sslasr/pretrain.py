"""Masked-prediction pre-training with k-means targets.

For encoder outputs o_t the head scores classes with z_t = A o_t / tau and
the loss is the cross-entropy of the target cluster, averaged over masked
output frames only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .data import make_batches, pad_batch
from .encoder import EncoderModel, chunked_attention_plan, forward, output_length, streaming_plan
from .errors import ConfigError
from .masking import MaskConfig, reduce_mask_and_labels, sample_mask

log = logging.getLogger(__name__)


class PretrainHead:
    def __init__(self, n_classes: int, d_model: int, input_dim: int = 80, tau: float = 0.1, seed: int = 0):
        if tau <= 0:
            raise ConfigError("tau must be positive")
        if n_classes < 1:
            raise ConfigError("need at least one class")
        rng = np.random.default_rng(seed)
        self.tau = tau
        self.params = {
            "A": ad.parameter((n_classes, d_model), rng, scale=1.0 / math.sqrt(d_model)),
            "mask_emb": ad.parameter((input_dim,), rng, scale=0.1),
        }

    @property
    def A(self):
        return self.params["A"]

    @property
    def mask_emb(self):
        return self.params["mask_emb"]

    @property
    def n_classes(self) -> int:
        return self.A.shape[0]

    def logits(self, o):
        """z = A o / tau for (..., D) outputs."""
        return ad.scalar_mul(ad.matmul(o, ad.transpose(self.A, (1, 0))), 1.0 / self.tau)


def apply_mask(x, mask, mask_emb):
    """Replace frames where ``mask`` is true by the learned embedding."""
    x = ad.as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape[:-1]:
        raise ConfigError(f"mask shape {mask.shape} does not match features {x.shape[:-1]}")
    return ad.where(mask[..., None], mask_emb, x)


@dataclass
class MaskedBatch:
    ids: list
    x: np.ndarray  # (B, T, 80) unmasked, zero padded
    lengths: np.ndarray
    input_mask: np.ndarray  # (B, T)
    output_mask: np.ndarray  # (B, T_out), false on padding
    labels: np.ndarray  # (B, T_out)

    @property
    def n_masked(self) -> int:
        return int(self.output_mask.sum())


def expected_label_frames(n_fbank: int, label_rate: float, fbank_rate: float = 100.0) -> int:
    return int(math.ceil(n_fbank * label_rate / fbank_rate - 1e-9))


def build_batch(ids, feats: dict, labels: dict, mask_cfg: MaskConfig, rng, model_cfg,
                fbank_rate: float = 100.0, out_rate: Optional[float] = None) -> MaskedBatch:
    """``labels`` maps id -> (rate, label array)."""
    x, lengths = pad_batch([feats[u] for u in ids])
    B, T, _ = x.shape
    T_out = output_length(T, model_cfg)
    out_rate = out_rate or fbank_rate / model_cfg.total_downsample
    in_mask = np.zeros((B, T), dtype=bool)
    out_mask = np.zeros((B, T_out), dtype=bool)
    lab = np.zeros((B, T_out), dtype=np.int64)
    for i, u in enumerate(ids):
        n = int(lengths[i])
        n_out = output_length(n, model_cfg)
        m = sample_mask(n, mask_cfg, rng)
        in_mask[i, :n] = m
        rate, y = labels[u]
        om, ol = reduce_mask_and_labels(m, fbank_rate, y, rate, out_rate, n_out)
        out_mask[i, :n_out] = om
        lab[i, :n_out] = ol
    return MaskedBatch(list(ids), x, lengths, in_mask, out_mask, lab)


def pretrain_loss(o, head: PretrainHead, output_mask, labels, reduction: str = "mean"):
    """Cross-entropy of z_t = A o_t / tau at masked frames (mean over them by default)."""
    output_mask = np.asarray(output_mask, dtype=bool)
    if not output_mask.any():
        raise ValueError("no masked output frames in batch")
    sel = ad.masked_select(ad.as_tensor(o), output_mask)
    return ad.cross_entropy(head.logits(sel), np.asarray(labels)[output_mask], reduction=reduction)


def masked_accuracy(o, head: PretrainHead, output_mask, labels) -> float:
    z = head.logits(ad.as_tensor(o)).data
    pred = z.argmax(axis=-1)
    m = np.asarray(output_mask, dtype=bool)
    return float((pred[m] == np.asarray(labels)[m]).mean())


def batch_forward(model: EncoderModel, head: PretrainHead, batch: MaskedBatch, plan_ms=None):
    """Mask, encode and score one batch; returns (loss tensor, outputs)."""
    xm = apply_mask(batch.x, batch.input_mask, head.mask_emb)
    plan = None
    if plan_ms is not None:
        Tb = -(-batch.x.shape[1] // model.cfg.conv_embed_factor)
        plan = streaming_plan(Tb, plan_ms[0], plan_ms[1], model.cfg)
    out = forward(model, xm, plan, batch.lengths)
    return pretrain_loss(out.final, head, batch.output_mask, batch.labels), out


def select_labels(ids, feats: dict, store, fbank_rate: float = 100.0):
    """Read label records, dropping utterances whose length does not match."""
    labels, skipped = {}, []
    for u in ids:
        if u not in feats:
            continue
        if u not in store:
            skipped.append((u, "no label record"))
            continue
        rate, y = store.read(u)
        want = expected_label_frames(feats[u].shape[0], rate, fbank_rate)
        if abs(len(y) - want) > 1:
            skipped.append((u, f"{len(y)} labels at {rate} Hz, expected {want}"))
            continue
        labels[u] = (rate, y)
    return labels, skipped


def pretrain_epoch(model: EncoderModel, head: PretrainHead, labels: dict, feats: dict, opt,
                   mask_cfg: MaskConfig, batch_frames: int, seed: int, epoch: int,
                   plan_sampler: Optional[Callable] = None, step_log: Optional[list] = None) -> dict:
    """One pass over ``labels`` (id -> (rate, labels)) with a fresh mask per utterance.

    ``plan_sampler(rng)`` returns a ``(chunk_ms, context_ms)`` pair per batch
    for streaming training. Returns frame-weighted loss and masked accuracy.
    """
    rng = np.random.default_rng([seed, epoch])
    lengths = {u: feats[u].shape[0] for u in labels}
    tot_loss = tot_acc = 0.0
    tot_n = 0
    for ids in make_batches(lengths, batch_frames, rng):
        batch = build_batch(ids, feats, labels, mask_cfg, rng, model.cfg)
        if batch.n_masked == 0:
            continue
        plan_ms = plan_sampler(rng) if plan_sampler else None
        loss, out = batch_forward(model, head, batch, plan_ms)
        acc = masked_accuracy(out.final, head, batch.output_mask, batch.labels)
        ad.backward(loss)
        info = opt.step()
        n = batch.n_masked
        tot_loss += float(loss.data) * n
        tot_acc += acc * n
        tot_n += n
        if step_log is not None:
            rec = {"epoch": epoch, "step": opt.step_count, "loss": float(loss.data), "acc": acc,
                   "masked": n, "lr": info["lr"]}
            if plan_ms is not None:
                rec["chunk_ms"], rec["context_ms"] = plan_ms
            step_log.append(rec)
    if tot_n == 0:
        return {"loss": float("nan"), "acc": float("nan"), "masked_frames": 0}
    return {"loss": tot_loss / tot_n, "acc": tot_acc / tot_n, "masked_frames": tot_n}


def evaluate_pretrain(model: EncoderModel, head: PretrainHead, labels: dict, feats: dict,
                      mask_cfg: MaskConfig, batch_frames: int, seed: int, epoch: int = 0) -> dict:
    """Loss and accuracy with the masks an epoch of the same seed would draw."""
    rng = np.random.default_rng([seed, epoch])
    lengths = {u: feats[u].shape[0] for u in labels}
    tot_loss = tot_acc = 0.0
    tot_n = 0
    with ad.no_grad():
        for ids in make_batches(lengths, batch_frames, rng):
            batch = build_batch(ids, feats, labels, mask_cfg, rng, model.cfg)
            if batch.n_masked == 0:
                continue
            loss, out = batch_forward(model, head, batch)
            n = batch.n_masked
            tot_loss += float(loss.data) * n
            tot_acc += masked_accuracy(out.final, head, batch.output_mask, batch.labels) * n
            tot_n += n
    return {"loss": tot_loss / max(tot_n, 1), "acc": tot_acc / max(tot_n, 1), "masked_frames": tot_n}


def all_params(model: EncoderModel, head: PretrainHead) -> dict:
    p = {f"encoder.{k}": v for k, v in model.params.items()}
    p.update({f"head.{k}": v for k, v in head.params.items()})
    return p
