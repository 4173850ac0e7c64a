"""Transformer building blocks shared by the teacher and the student."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PAD, BOS, EOS, UNK = 0, 1, 2, 3


class ConfigError(ValueError):
    """Invalid or mutually inconsistent configuration."""


@dataclass
class ModelConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    d_model: int = 32
    d_ff: int = 64
    src_vocab: int = 36
    tgt_vocab: int = 36
    max_len: int = 64
    d_k: int = 0
    d_v: int = 0
    # "d_k" scales scores by 1/sqrt(d_k); "d_model" uses 1/sqrt(d_model)
    attn_scale: str = "d_k"
    dtype: str = "float64"

    def __post_init__(self):
        if not self.d_k:
            self.d_k = self.d_model // self.heads
        if not self.d_v:
            self.d_v = self.d_model // self.heads
        self.validate()

    def validate(self) -> None:
        for name in ("enc_layers", "dec_layers", "heads", "d_model", "d_ff",
                     "src_vocab", "tgt_vocab", "max_len", "d_k", "d_v"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.attn_scale not in ("d_k", "d_model"):
            raise ConfigError("attn_scale must be 'd_k' or 'd_model'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def score_scale(self) -> float:
        width = self.d_k if self.attn_scale == "d_k" else self.d_model
        return 1.0 / math.sqrt(width)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttentionOutput:
    values: Tensor   # (B, T_q, d_model)
    weights: Tensor  # (B, H, T_q, T_kv)


def positional_encoding(length: int, width: int) -> np.ndarray:
    """Sinusoidal table: sin(j / 10000^(k/d)) on even k, cos on odd k."""
    j = np.arange(length, dtype=np.float64)[:, None]
    k = np.arange(width, dtype=np.float64)[None, :]
    angle = j / np.power(10000.0, k / width)
    return np.where(np.arange(width) % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------- parameters


class ParamStore(dict):
    """Ordered name -> Tensor mapping of trainable parameters."""

    def __init__(self, dtype=np.float64):
        super().__init__()
        self.dtype = np.dtype(dtype)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)
        self[name] = t
        return t

    def xavier(self, name: str, fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return self.add(name, rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self.add(name, np.ones(shape))

    def num_values(self) -> int:
        return sum(t.data.size for t in self.values())


def init_attention(ps: ParamStore, prefix: str, cfg: ModelConfig, rng) -> None:
    d, h = cfg.d_model, cfg.heads
    ps.xavier(f"{prefix}.wq", d, h * cfg.d_k, rng)
    ps.xavier(f"{prefix}.wk", d, h * cfg.d_k, rng)
    ps.xavier(f"{prefix}.wv", d, h * cfg.d_v, rng)
    ps.xavier(f"{prefix}.wo", h * cfg.d_v, d, rng)
    ps.zeros(f"{prefix}.bo", d)


def init_ffn(ps: ParamStore, prefix: str, cfg: ModelConfig, rng) -> None:
    ps.xavier(f"{prefix}.w1", cfg.d_model, cfg.d_ff, rng)
    ps.zeros(f"{prefix}.b1", cfg.d_ff)
    ps.xavier(f"{prefix}.w2", cfg.d_ff, cfg.d_model, rng)
    ps.zeros(f"{prefix}.b2", cfg.d_model)


def init_norm(ps: ParamStore, prefix: str, cfg: ModelConfig) -> None:
    ps.ones(f"{prefix}.gain", cfg.d_model)
    ps.zeros(f"{prefix}.bias", cfg.d_model)


def init_embedding(ps: ParamStore, name: str, vocab: int, cfg: ModelConfig, rng) -> None:
    ps.add(name, rng.normal(0.0, cfg.d_model ** -0.5, size=(vocab, cfg.d_model)))


# ---------------------------------------------------------------- blocks


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, w = x.shape
    return x.reshape(b, t, heads, w // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, w = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * w)


def attention(ps: ParamStore, prefix: str, cfg: ModelConfig, q_in: Tensor, k_in: Tensor,
              v_in: Tensor, key_pad: np.ndarray | None = None, causal: bool = False,
              drop_rate: float = 0.0, rng: np.random.Generator | None = None) -> AttentionOutput:
    """Multi-head scaled dot-product attention with output projection.

    ``key_pad`` is a (B, T_kv) boolean array, True on padding keys.
    """
    if q_in.shape[-1] != cfg.d_model or k_in.shape[-1] != cfg.d_model or v_in.shape[-1] != cfg.d_model:
        raise ad.ShapeError("attention inputs must have width d_model")
    if k_in.shape[-2] != v_in.shape[-2]:
        raise ad.ShapeError("keys and values must have the same length")
    t_q, t_kv = q_in.shape[-2], k_in.shape[-2]
    if causal and t_q != t_kv:
        raise ad.ContractError("causal mask requires equal query and key lengths")
    h = cfg.heads
    q = _split_heads(q_in @ ps[f"{prefix}.wq"], h)
    k = _split_heads(k_in @ ps[f"{prefix}.wk"], h)
    v = _split_heads(v_in @ ps[f"{prefix}.wv"], h)
    scores = (q @ ad.swap_last(k)) * cfg.score_scale
    mask = None
    if causal:
        mask = np.triu(np.ones((t_q, t_kv), dtype=bool), k=1)[None, None]
    if key_pad is not None:
        kp = np.asarray(key_pad, dtype=bool)[:, None, None, :]
        mask = kp if mask is None else (mask | kp)
    weights = ad.softmax(scores, mask=mask)
    mixed = _merge_heads(ad.dropout(weights, drop_rate, rng) @ v)
    out = mixed @ ps[f"{prefix}.wo"] + ps[f"{prefix}.bo"]
    return AttentionOutput(out, weights)


def positional_attention(ps: ParamStore, prefix: str, cfg: ModelConfig, prev: Tensor,
                         key_pad: np.ndarray | None = None, drop_rate: float = 0.0,
                         rng=None) -> AttentionOutput:
    """Attention whose queries and keys are the sinusoidal position table."""
    b, t, _ = prev.shape
    pe = Tensor(np.broadcast_to(positional_encoding(t, cfg.d_model).astype(prev.dtype),
                                (b, t, cfg.d_model)))
    return attention(ps, prefix, cfg, pe, pe, prev, key_pad=key_pad,
                     drop_rate=drop_rate, rng=rng)


def ffn(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    hidden = ad.relu(x @ ps[f"{prefix}.w1"] + ps[f"{prefix}.b1"])
    return hidden @ ps[f"{prefix}.w2"] + ps[f"{prefix}.b2"]


def layer_norm(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, ps[f"{prefix}.gain"], ps[f"{prefix}.bias"])


def sublayer(ps: ParamStore, prefix: str, x: Tensor, f: Callable[[Tensor], Tensor],
             drop_rate: float = 0.0, rng=None) -> Tensor:
    """Post-norm residual wrapper: norm(x + f(x))."""
    y = f(x)
    if y.shape != x.shape:
        raise ad.ShapeError("sublayer function must preserve shape")
    return layer_norm(ps, prefix, x + ad.dropout(y, drop_rate, rng))


@dataclass
class RunContext:
    """Per-call switches: dropout rate and its generator (None = eval)."""

    drop_rate: float = 0.0
    rng: np.random.Generator | None = None
    steps: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.drop_rate if self.rng is not None else 0.0


EVAL = RunContext()


def embed(ps: ParamStore, table: str, ids: np.ndarray, cfg: ModelConfig) -> Tensor:
    """Scaled token embedding plus sinusoidal position table."""
    e = ad.embedding(ps[table], ids) * math.sqrt(cfg.d_model)
    return add_positions(e, cfg)


def add_positions(x: Tensor, cfg: ModelConfig) -> Tensor:
    t = x.shape[-2]
    return x + positional_encoding(t, cfg.d_model).astype(x.dtype)


def init_encoder(ps: ParamStore, cfg: ModelConfig, rng) -> None:
    init_embedding(ps, "enc.embed", cfg.src_vocab, cfg, rng)
    for l in range(cfg.enc_layers):
        init_attention(ps, f"enc.{l}.self", cfg, rng)
        init_norm(ps, f"enc.{l}.norm1", cfg)
        init_ffn(ps, f"enc.{l}.ffn", cfg, rng)
        init_norm(ps, f"enc.{l}.norm2", cfg)


def run_encoder(ps: ParamStore, cfg: ModelConfig, src: np.ndarray, ctx: RunContext = EVAL) -> Tensor:
    """Encode padded source ids (B, T_x) into context states (B, T_x, d_model)."""
    pad = src == PAD
    x = ad.dropout(embed(ps, "enc.embed", src, cfg), ctx.rate, ctx.rng)
    for l in range(cfg.enc_layers):
        x = sublayer(ps, f"enc.{l}.norm1", x,
                     lambda h: attention(ps, f"enc.{l}.self", cfg, h, h, h, key_pad=pad,
                                         drop_rate=ctx.rate, rng=ctx.rng).values,
                     ctx.rate, ctx.rng)
        x = sublayer(ps, f"enc.{l}.norm2", x, lambda h: ffn(ps, f"enc.{l}.ffn", h),
                     ctx.rate, ctx.rng)
    return x


def check_tokens(ids: np.ndarray, vocab: int, max_len: int, what: str) -> None:
    if ids.ndim != 2:
        raise ValueError(f"{what} must be a (batch, length) id array")
    if ids.shape[1] < 1:
        raise ValueError(f"{what} is empty")
    if ids.shape[1] > max_len:
        raise ValueError(f"{what} length {ids.shape[1]} exceeds max_len {max_len}")
    if ids.min() < 0 or ids.max() >= vocab:
        raise ValueError(f"{what} contains an out-of-vocabulary id")
