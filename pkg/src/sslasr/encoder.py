"""U-Net style speech encoder: Conv-Embed, multi-rate attention stacks, chunked masks.

Length bookkeeping (Fbank frames T, default factors):

* Conv-Embed (kernel f+1, stride f, f=2): base length ``ceil(T / 2)``; the
  full-context variant pads one frame on each side, the causal one pads two
  frames on the left.
* stack s runs at ``ceil(base / ds_s)`` frames; its residual update is
  upsampled by repetition back to the base length.
* output downsample (average pooling by 2): ``ceil(base / 2)``, so 1000
  Fbank frames (10 s) become 250 output frames at 25 Hz.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .features import FeatureMatrix
from .formats import read_checkpoint_file, write_checkpoint_file

FULL = None  # chunk / context sentinel meaning "unbounded"


@dataclass(frozen=True)
class EncoderConfig:
    d_model: tuple = (48,)  # one entry, or one per stack
    n_heads: int = 4
    ff_multiplier: float = 2.0
    stack_downsample: tuple = (1, 2, 4, 8, 4, 2)
    conv_embed_factor: int = 2
    output_downsample_factor: int = 2
    n_blocks_per_stack: int = 1
    causal: bool = False
    input_dim: int = 80
    max_positions: int = 2048

    def __post_init__(self):
        d = self.d_model
        if isinstance(d, int):
            d = (d,)
        object.__setattr__(self, "d_model", tuple(int(x) for x in d))
        object.__setattr__(self, "stack_downsample", tuple(int(x) for x in self.stack_downsample))
        self.validate()

    def validate(self):
        def pow2(x):
            return x >= 1 and (x & (x - 1)) == 0

        if not self.stack_downsample:
            raise ConfigError("need at least one stack")
        if len(self.d_model) not in (1, len(self.stack_downsample)):
            raise ConfigError("d_model needs one entry or one per stack")
        for d in self.d_model:
            if d < 1 or d % self.n_heads:
                raise ConfigError(f"d_model={d} must be a positive multiple of n_heads={self.n_heads}")
        if not all(pow2(x) for x in self.stack_downsample + (self.conv_embed_factor, self.output_downsample_factor)):
            raise ConfigError("all downsampling factors must be powers of two")
        if self.n_blocks_per_stack < 1 or self.ff_multiplier <= 0:
            raise ConfigError("n_blocks_per_stack >= 1 and ff_multiplier > 0 required")

    @property
    def stack_dims(self) -> tuple:
        if len(self.d_model) == 1:
            return self.d_model * len(self.stack_downsample)
        return self.d_model

    @property
    def width(self) -> int:
        """Dimension of the base-rate trunk (the widest stack)."""
        return max(self.stack_dims)

    @property
    def total_downsample(self) -> int:
        return self.conv_embed_factor * self.output_downsample_factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["d_model"] = list(self.d_model)
        d["stack_downsample"] = list(self.stack_downsample)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["d_model"] = tuple(d["d_model"]) if isinstance(d["d_model"], (list, tuple)) else d["d_model"]
        d["stack_downsample"] = tuple(d["stack_downsample"])
        return cls(**d)


def _ff_dim(cfg: EncoderConfig, d: int) -> int:
    return max(1, int(round(cfg.ff_multiplier * d)))


def block_param_count(d: int, f: int) -> int:
    # two layer norms (4d), qkv (3d^2 + 3d), output (d^2 + d), feed-forward (2df + f + d)
    return 4 * d * d + 2 * d * f + 9 * d + f


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form number of scalar parameters of ``init_encoder(cfg)``."""
    D = cfg.width
    k = cfg.conv_embed_factor + 1
    n = cfg.input_dim * k * D + D  # conv-embed
    n += cfg.max_positions * D  # learned absolute positions
    for d in cfg.stack_dims:
        n += cfg.n_blocks_per_stack * block_param_count(d, _ff_dim(cfg, d))
        if d != D:
            n += 2 * D * d  # bias-free projections into and out of the stack
    n += 2 * D + D * D + D  # final norm and projection
    return n


class EncoderModel:
    def __init__(self, cfg: EncoderConfig, params: dict):
        self.cfg = cfg
        self.params = params

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict:
        return {k: p.data for k, p in self.params.items()}


def init_encoder(cfg: EncoderConfig, seed: int = 0) -> EncoderModel:
    cfg.validate()
    rng = np.random.default_rng(seed)
    D = cfg.width
    k = cfg.conv_embed_factor + 1
    P = {}
    P["embed.w"] = ad.parameter((D, cfg.input_dim, k), rng, scale=1.0 / math.sqrt(cfg.input_dim * k))
    P["embed.b"] = ad.parameter((D,), rng, scale=0)
    P["pos"] = ad.parameter((cfg.max_positions, D), rng, scale=0.02)
    for s, d in enumerate(cfg.stack_dims):
        f = _ff_dim(cfg, d)
        if d != D:
            P[f"s{s}.proj_in"] = ad.parameter((D, d), rng)
            P[f"s{s}.proj_out"] = ad.parameter((d, D), rng)
        for b in range(cfg.n_blocks_per_stack):
            pre = f"s{s}.b{b}."
            P[pre + "ln1.g"] = ad.Tensor(np.ones(d, np.float32), requires_grad=True)
            P[pre + "ln1.b"] = ad.parameter((d,), rng, scale=0)
            P[pre + "qkv.w"] = ad.parameter((d, 3 * d), rng)
            P[pre + "qkv.b"] = ad.parameter((3 * d,), rng, scale=0)
            P[pre + "out.w"] = ad.parameter((d, d), rng)
            P[pre + "out.b"] = ad.parameter((d,), rng, scale=0)
            P[pre + "ln2.g"] = ad.Tensor(np.ones(d, np.float32), requires_grad=True)
            P[pre + "ln2.b"] = ad.parameter((d,), rng, scale=0)
            P[pre + "ff1.w"] = ad.parameter((d, f), rng)
            P[pre + "ff1.b"] = ad.parameter((f,), rng, scale=0)
            P[pre + "ff2.w"] = ad.parameter((f, d), rng)
            P[pre + "ff2.b"] = ad.parameter((d,), rng, scale=0)
    P["final.ln.g"] = ad.Tensor(np.ones(D, np.float32), requires_grad=True)
    P["final.ln.b"] = ad.parameter((D,), rng, scale=0)
    P["final.w"] = ad.parameter((D, D), rng)
    P["final.b"] = ad.parameter((D,), rng, scale=0)
    return EncoderModel(cfg, P)


# ---------------------------------------------------------------------------
# attention plans
# ---------------------------------------------------------------------------


@dataclass
class AttentionPlan:
    """Per-query allowed key range ``[lo[t], hi[t]]`` (inclusive)."""

    T: int
    lo: np.ndarray
    hi: np.ndarray
    chunk: Optional[int] = FULL
    left: Optional[int] = FULL

    @property
    def is_full(self) -> bool:
        return self.chunk is FULL and self.left is FULL

    def mask(self) -> np.ndarray:
        k = np.arange(self.T)
        return (k[None, :] >= self.lo[:, None]) & (k[None, :] <= self.hi[:, None])

    def scaled(self, T: int, factor: int) -> "AttentionPlan":
        """The same plan expressed at a rate ``factor`` times coarser."""
        def div(x, what):
            if x is FULL:
                return FULL
            if x % factor:
                raise ConfigError(f"{what} of {x} frames is not divisible by downsample factor {factor}")
            return x // factor

        return chunked_attention_plan(T, div(self.chunk, "chunk"), div(self.left, "left context"))


def _is_full(x) -> bool:
    return x is FULL or (isinstance(x, float) and math.isinf(x))


def chunked_attention_plan(T: int, chunk_frames=FULL, left_context_frames=FULL) -> AttentionPlan:
    """Position t sees ``[max(0, start - left), end - 1]`` of its chunk."""
    t = np.arange(T)
    chunk = FULL if _is_full(chunk_frames) else int(chunk_frames)
    left = FULL if _is_full(left_context_frames) else int(left_context_frames)
    if chunk is not FULL and chunk < 1:
        raise ConfigError("chunk_frames must be >= 1")
    if chunk is FULL:
        start = np.zeros(T, dtype=np.int64)
        end = np.full(T, T, dtype=np.int64)
    else:
        start = (t // chunk) * chunk
        end = np.minimum(start + chunk, T)
    lo = np.zeros(T, dtype=np.int64) if left is FULL else np.maximum(0, start - left)
    return AttentionPlan(T, lo, end - 1, chunk, left)


def full_plan(T: int) -> AttentionPlan:
    return chunked_attention_plan(T)


def ms_to_base_frames(ms, cfg: EncoderConfig, fbank_rate: float = 100.0):
    """Convert a duration to base-rate (post Conv-Embed) frames; ``None`` stays full."""
    if _is_full(ms):
        return FULL
    frames = ms * fbank_rate / 1000.0 / cfg.conv_embed_factor
    if abs(frames - round(frames)) > 1e-9:
        raise ConfigError(f"{ms} ms is not a whole number of base frames")
    return int(round(frames))


def streaming_plan(T_base: int, chunk_ms, context_ms, cfg: EncoderConfig) -> AttentionPlan:
    return chunked_attention_plan(T_base, ms_to_base_frames(chunk_ms, cfg), ms_to_base_frames(context_ms, cfg))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def base_length(T: int, cfg: EncoderConfig) -> int:
    return -(-T // cfg.conv_embed_factor)


def output_length(T: int, cfg: EncoderConfig) -> int:
    return -(-base_length(T, cfg) // cfg.output_downsample_factor)


def conv_embed(model: EncoderModel, x, lengths=None):
    """(B, T, 80) Fbank -> (B, ceil(T / f), D) with a swish nonlinearity."""
    cfg = model.cfg
    x = ad.as_tensor(x)
    f = cfg.conv_embed_factor
    k = f + 1
    if x.shape[1] < k:
        raise ConfigError(f"input of {x.shape[1]} frames is shorter than the {k}-frame Conv-Embed kernel")
    if x.shape[2] != cfg.input_dim:
        raise ConfigError(f"expected {cfg.input_dim}-dim features, got {x.shape[2]}")
    if cfg.causal:
        pl, pr = f, 0
    else:
        pl, pr = f // 2, f - f // 2
    if lengths is not None:
        # zero padded frames so the kernel overlapping an item's end sees zeros
        valid = np.arange(x.shape[1])[None, :] < np.asarray(lengths)[:, None]
        x = ad.where(valid[..., None], x, ad.Tensor(np.zeros((), x.dtype)))
    h = ad.conv1d(x, model.params["embed.w"], model.params["embed.b"], stride=f, pad_left=pl, pad_right=pr)
    return ad.swish(h)


def _block(P, pre, x, mask, n_heads):
    B, T, d = x.shape
    dh = d // n_heads
    y = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
    qkv = ad.linear(y, P[pre + "qkv.w"], P[pre + "qkv.b"])
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, n_heads, dh)), (2, 0, 3, 1, 4))  # (3, B, H, T, dh)
    q = ad.slice_(qkv, (0,))
    k = ad.slice_(qkv, (1,))
    v = ad.slice_(qkv, (2,))
    scores = ad.scalar_mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.softmax(scores, axis=-1, mask=mask[:, None, :, :])
    ctx = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, d))
    x = ad.add(x, ad.linear(ctx, P[pre + "out.w"], P[pre + "out.b"]))
    y = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
    h = ad.swish(ad.linear(y, P[pre + "ff1.w"], P[pre + "ff1.b"]))
    return ad.add(x, ad.linear(h, P[pre + "ff2.w"], P[pre + "ff2.b"]))


def _attention_mask(plan: AttentionPlan, lengths):
    """(B, T, T) allowed keys: inside the plan, and valid (or the query itself)."""
    T = plan.T
    m = plan.mask()
    key_ok = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return m[None] & (key_ok[:, None, :] | np.eye(T, dtype=bool)[None])


@dataclass
class StackOutputs:
    stacks: list  # per-stack hidden Tensor (B, T_s, d_s)
    stack_rates: list
    stack_lengths: list  # per-stack (B,) valid lengths
    final: ad.Tensor  # (B, T_out, D)
    output_rate: float
    lengths: np.ndarray  # (B,) valid output lengths


def forward(model: EncoderModel, x, plan: Optional[AttentionPlan] = None, lengths=None,
            input_rate: float = 100.0) -> StackOutputs:
    """Encode a padded (B, T, 80) batch (or one FeatureMatrix).

    ``plan`` is expressed at the base rate (after Conv-Embed); ``None``
    means full context. Each stack uses the plan rescaled to its own rate.
    """
    cfg = model.cfg
    P = model.params
    if isinstance(x, FeatureMatrix):
        if x.kind != "fbank":
            raise ConfigError(f"encoder expects fbank input, got {x.kind}")
        input_rate = x.frame_rate
        x = x.frames[None]
    x = ad.as_tensor(x)
    B, T, _ = x.shape
    lengths = np.full(B, T, dtype=np.int64) if lengths is None else np.asarray(lengths, dtype=np.int64)
    h = conv_embed(model, x, lengths)
    Tb = h.shape[1]
    if Tb > cfg.max_positions:
        raise ConfigError(f"{Tb} base frames exceed max_positions={cfg.max_positions}")
    if plan is None:
        plan = full_plan(Tb)
    if plan.T != Tb:
        raise ConfigError(f"attention plan covers {plan.T} frames, sequence has {Tb}")
    base_len = -(-lengths // cfg.conv_embed_factor)
    base_rate = input_rate / cfg.conv_embed_factor
    h = ad.add(h, ad.slice_(P["pos"], (slice(0, Tb),)))
    D = cfg.width
    stacks, rates, lens = [], [], []
    for s, (ds, d) in enumerate(zip(cfg.stack_downsample, cfg.stack_dims)):
        x_in = ad.avg_downsample(h, ds, base_len)
        Ts = x_in.shape[1]
        s_len = -(-base_len // ds)
        mask = _attention_mask(plan.scaled(Ts, ds) if ds > 1 else plan, s_len)
        if d != D:
            x_in = ad.matmul(x_in, P[f"s{s}.proj_in"])
        y = x_in
        for b in range(cfg.n_blocks_per_stack):
            y = _block(P, f"s{s}.b{b}.", y, mask, cfg.n_heads)
        stacks.append(y)
        rates.append(base_rate / ds)
        lens.append(s_len)
        delta = ad.sub(y, x_in)
        if d != D:
            delta = ad.matmul(delta, P[f"s{s}.proj_out"])
        h = ad.add(h, ad.nearest_upsample(delta, ds, Tb))
    k = cfg.output_downsample_factor
    if plan.chunk is not FULL and plan.chunk % k:
        raise ConfigError(f"chunk of {plan.chunk} base frames is not divisible by output factor {k}")
    out = ad.avg_downsample(h, k, base_len)
    out = ad.layer_norm(out, P["final.ln.g"], P["final.ln.b"])
    out = ad.linear(out, P["final.w"], P["final.b"])
    return StackOutputs(stacks, rates, lens, out, base_rate / k, -(-base_len // k))


def extract_features(model: EncoderModel, feats: FeatureMatrix, selector="final",
                     plan: Optional[AttentionPlan] = None) -> FeatureMatrix:
    """Latent features for clustering; ``selector`` is "final" or a 1-based stack number."""
    n_stacks = len(model.cfg.stack_downsample)
    if selector != "final":
        try:
            idx = int(str(selector).removeprefix("stack"))
        except ValueError as exc:
            raise ConfigError(f"invalid selector {selector!r}") from exc
        if not 1 <= idx <= n_stacks:
            raise ConfigError(f"stack selector {idx} outside 1..{n_stacks}")
    with ad.no_grad():
        out = forward(model, feats, plan)
    if selector == "final":
        return FeatureMatrix(out.final.data[0].copy(), out.output_rate, "latent")
    return FeatureMatrix(out.stacks[idx - 1].data[0].copy(), out.stack_rates[idx - 1], "latent")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_params(path, kind: str, configs: dict, params: dict, extra: Optional[dict] = None) -> str:
    header = {"kind": kind, "config": configs, **(extra or {})}
    return write_checkpoint_file(path, header, {k: p.data if isinstance(p, ad.Tensor) else p
                                                for k, p in params.items()})


def save_encoder(path, model: EncoderModel, extra: Optional[dict] = None) -> str:
    return save_params(path, "encoder", {"encoder": model.cfg.to_dict()},
                       {f"encoder.{k}": v for k, v in model.params.items()}, extra)


def encoder_from_params(cfg: EncoderConfig, params: dict, prefix: str = "encoder.") -> EncoderModel:
    model = init_encoder(cfg, 0)
    for k in model.params:
        arr = params.get(prefix + k)
        if arr is None or arr.shape != model.params[k].shape:
            raise ConfigError(f"checkpoint lacks a matching parameter {prefix + k}")
        model.params[k] = ad.Tensor(np.array(arr, dtype=np.float32), requires_grad=True)
    return model


def load_encoder(path) -> EncoderModel:
    """Load the encoder part of an encoder or transducer checkpoint."""
    header, params = read_checkpoint_file(path)
    cfg = EncoderConfig.from_dict(header["config"]["encoder"])
    return encoder_from_params(cfg, params)
