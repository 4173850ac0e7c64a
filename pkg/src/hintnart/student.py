"""Non-autoregressive student: soft-copied decoder inputs, one-shot decoding."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (EVAL, PAD, ConfigError, ModelConfig, ParamStore, RunContext, add_positions,
                 attention, check_tokens, ffn, init_attention, init_encoder, init_ffn,
                 init_norm, positional_attention, run_encoder, sublayer)
from .teacher import DecoderTrace, _as_batch

# the student trace has the same layout as the teacher's
StudentTrace = DecoderTrace


def soft_copy_logits(t_x: int, t_y: int, tau: float) -> np.ndarray:
    """Log of the unnormalized kernel, -(j - (T_y/T_x) * i)^2 / tau, 1-based i, j."""
    if tau <= 0:
        raise ConfigError("soft-copy sharpness tau must be positive")
    if t_x < 1 or t_y < 1:
        raise ValueError("lengths must be >= 1")
    i = np.arange(1, t_x + 1, dtype=np.float64)[:, None]
    j = np.arange(1, t_y + 1, dtype=np.float64)[None, :]
    return -((j - (t_y / t_x) * i) ** 2) / tau


def soft_copy_weights(t_x: int, t_y: int, tau: float) -> np.ndarray:
    """(T_x, T_y) weights; column j is a distribution over source positions."""
    logits = soft_copy_logits(t_x, t_y, tau)
    logits -= logits.max(axis=0, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=0, keepdims=True)


def predict_tokens(trace: DecoderTrace) -> list[list[int]]:
    """Independent per-position argmax; ties go to the smallest id."""
    ids = np.argmax(trace.logits.data, axis=-1)
    return [ids[b, trace.tgt_mask[b]].tolist() for b in range(ids.shape[0])]


class Student:
    """Encoder plus a decoder with unmasked self-attention and positional attention."""

    kind = "student"

    def __init__(self, cfg: ModelConfig, tau: float = 0.3, seed: int = 0,
                 params: ParamStore | None = None):
        if tau <= 0:
            raise ConfigError("soft-copy sharpness tau must be positive")
        self.cfg = cfg
        self.tau = float(tau)
        self.decoder_steps = 0
        if params is None:
            rng = np.random.Generator(np.random.Philox(seed))
            params = ParamStore(cfg.np_dtype)
            init_encoder(params, cfg, rng)
            for l in range(cfg.dec_layers):
                init_attention(params, f"dec.{l}.self", cfg, rng)
                init_norm(params, f"dec.{l}.norm1", cfg)
                init_attention(params, f"dec.{l}.pos", cfg, rng)
                init_norm(params, f"dec.{l}.norm2", cfg)
                init_attention(params, f"dec.{l}.cross", cfg, rng)
                init_norm(params, f"dec.{l}.norm3", cfg)
                init_ffn(params, f"dec.{l}.ffn", cfg, rng)
                init_norm(params, f"dec.{l}.norm4", cfg)
            params.xavier("out.w", cfg.d_model, cfg.tgt_vocab, rng)
            params.zeros("out.b", cfg.tgt_vocab)
        self.params = params

    def encode(self, src, ctx: RunContext = EVAL) -> Tensor:
        src = _as_batch(src)
        check_tokens(src, self.cfg.src_vocab, self.cfg.max_len, "source")
        return run_encoder(self.params, self.cfg, src, ctx)

    def copy_matrix(self, src: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """(B, T_y_max, T_x_max) soft-copy weights; rows of padded positions are zero."""
        b, tx_max = src.shape
        out = np.zeros((b, int(lengths.max()), tx_max), dtype=self.cfg.np_dtype)
        for k in range(b):
            tx = int((src[k] != PAD).sum())
            ty = int(lengths[k])
            out[k, :ty, :tx] = soft_copy_weights(tx, ty, self.tau).T
        return out

    def build_decoder_input(self, src, lengths) -> Tensor:
        """z_j = sum_i w_ij e(x_i) from the unscaled source embeddings."""
        src = _as_batch(src)
        lengths = self._lengths(lengths, src.shape[0])
        emb = ad.embedding(self.params["enc.embed"], src)
        return Tensor(self.copy_matrix(src, lengths)) @ emb

    def _lengths(self, lengths, batch: int) -> np.ndarray:
        lengths = np.atleast_1d(np.asarray(lengths, dtype=np.int64))
        if lengths.shape[0] == 1 and batch > 1:
            lengths = np.repeat(lengths, batch)
        if lengths.shape[0] != batch:
            raise ValueError("one target length per source sentence is required")
        if lengths.min() < 1:
            raise ValueError("target length must be >= 1")
        if lengths.max() > self.cfg.max_len:
            raise ValueError(f"target length exceeds max_len {self.cfg.max_len}")
        return lengths

    def parallel_decode_forward(self, src, lengths, ctx: RunContext = EVAL) -> DecoderTrace:
        """Emit logits for every target position in a single decoder pass."""
        ps, cfg = self.params, self.cfg
        src = _as_batch(src)
        check_tokens(src, cfg.src_vocab, cfg.max_len, "source")
        lengths = self._lengths(lengths, src.shape[0])
        context = run_encoder(ps, cfg, src, ctx)
        t_y = int(lengths.max())
        tgt_mask = np.arange(t_y)[None, :] < lengths[:, None]
        src_pad = src == PAD
        tgt_pad = ~tgt_mask
        z = self.build_decoder_input(src, lengths)
        x = ad.dropout(add_positions(z * math.sqrt(cfg.d_model), cfg), ctx.rate, ctx.rng)
        hidden, attn = [], []
        for l in range(cfg.dec_layers):
            x = sublayer(ps, f"dec.{l}.norm1", x,
                         lambda h: attention(ps, f"dec.{l}.self", cfg, h, h, h, key_pad=tgt_pad,
                                             drop_rate=ctx.rate, rng=ctx.rng).values,
                         ctx.rate, ctx.rng)
            x = sublayer(ps, f"dec.{l}.norm2", x,
                         lambda h: positional_attention(ps, f"dec.{l}.pos", cfg, h, key_pad=tgt_pad,
                                                        drop_rate=ctx.rate, rng=ctx.rng).values,
                         ctx.rate, ctx.rng)
            cross = attention(ps, f"dec.{l}.cross", cfg, x, context, context, key_pad=src_pad,
                              drop_rate=ctx.rate, rng=ctx.rng)
            x = sublayer(ps, f"dec.{l}.norm3", x, lambda h: cross.values, ctx.rate, ctx.rng)
            x = sublayer(ps, f"dec.{l}.norm4", x, lambda h: ffn(ps, f"dec.{l}.ffn", h),
                         ctx.rate, ctx.rng)
            hidden.append(x)
            attn.append(cross.weights)
        logits = x @ ps["out.w"] + ps["out.b"]
        self.decoder_steps += 1
        return DecoderTrace(hidden, attn, logits, tgt_mask, ~src_pad)

    def decode(self, src, lengths) -> list[list[int]]:
        with ad.no_grad():
            return predict_tokens(self.parallel_decode_forward(src, lengths))
