"""Autoregressive Transformer teacher."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import (BOS, EOS, EVAL, PAD, ModelConfig, ParamStore, RunContext, attention,
                 check_tokens, embed, ffn, init_attention, init_embedding, init_encoder,
                 init_ffn, init_norm, run_encoder, sublayer)


@dataclass
class DecoderTrace:
    """Per-layer decoder states and encoder-decoder attention of one forward pass.

    ``hidden[l]`` is (B, T_y, d_model) after layer l's FFN sublayer,
    ``attn[l]`` is (B, H, T_y, T_x), ``logits`` is (B, T_y, V_tgt).
    """

    hidden: list[Tensor]
    attn: list[Tensor]
    logits: Tensor
    tgt_mask: np.ndarray  # (B, T_y) True on real positions
    src_mask: np.ndarray  # (B, T_x) True on real positions

    def sentence(self, b: int) -> dict[str, np.ndarray]:
        """Unpadded numpy view of sentence ``b``: N x T_y x d, N x H x T_y x T_x, T_y x V."""
        ty = int(self.tgt_mask[b].sum())
        tx = int(self.src_mask[b].sum())
        return {
            "hidden": np.stack([h.data[b, :ty] for h in self.hidden]),
            "attn": np.stack([a.data[b, :, :ty, :tx] for a in self.attn]),
            "logits": self.logits.data[b, :ty],
        }


def pad_batch(seqs, dtype=np.int64) -> np.ndarray:
    """Right-pad a list of id sequences with PAD into a (B, T) array."""
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), PAD, dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def _as_batch(x) -> np.ndarray:
    if isinstance(x, np.ndarray) and x.ndim == 2:
        return x.astype(np.int64, copy=False)
    if len(x) and np.ndim(x[0]) == 0:
        return np.asarray([x], dtype=np.int64)
    return pad_batch(x)


class Teacher:
    """Encoder-decoder with causal decoder self-attention."""

    kind = "teacher"

    def __init__(self, cfg: ModelConfig, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.decoder_steps = 0
        if params is None:
            rng = np.random.Generator(np.random.Philox(seed))
            params = ParamStore(cfg.np_dtype)
            init_encoder(params, cfg, rng)
            init_embedding(params, "dec.embed", cfg.tgt_vocab, cfg, rng)
            for l in range(cfg.dec_layers):
                init_attention(params, f"dec.{l}.self", cfg, rng)
                init_norm(params, f"dec.{l}.norm1", cfg)
                init_attention(params, f"dec.{l}.cross", cfg, rng)
                init_norm(params, f"dec.{l}.norm2", cfg)
                init_ffn(params, f"dec.{l}.ffn", cfg, rng)
                init_norm(params, f"dec.{l}.norm3", cfg)
            params.xavier("out.w", cfg.d_model, cfg.tgt_vocab, rng)
            params.zeros("out.b", cfg.tgt_vocab)
        self.params = params

    def encode(self, src, ctx: RunContext = EVAL) -> Tensor:
        src = _as_batch(src)
        check_tokens(src, self.cfg.src_vocab, self.cfg.max_len, "source")
        return run_encoder(self.params, self.cfg, src, ctx)

    def _decode(self, src: np.ndarray, context: Tensor, dec_in: np.ndarray,
                ctx: RunContext) -> tuple[list[Tensor], list[Tensor], Tensor]:
        ps, cfg = self.params, self.cfg
        src_pad = src == PAD
        in_pad = dec_in == PAD
        x = ad.dropout(embed(ps, "dec.embed", dec_in, cfg), ctx.rate, ctx.rng)
        hidden, attn = [], []
        for l in range(cfg.dec_layers):
            x = sublayer(ps, f"dec.{l}.norm1", x,
                         lambda h: attention(ps, f"dec.{l}.self", cfg, h, h, h, key_pad=in_pad,
                                             causal=True, drop_rate=ctx.rate, rng=ctx.rng).values,
                         ctx.rate, ctx.rng)
            cross = attention(ps, f"dec.{l}.cross", cfg, x, context, context, key_pad=src_pad,
                              drop_rate=ctx.rate, rng=ctx.rng)
            x = sublayer(ps, f"dec.{l}.norm2", x, lambda h: cross.values, ctx.rate, ctx.rng)
            x = sublayer(ps, f"dec.{l}.norm3", x, lambda h: ffn(ps, f"dec.{l}.ffn", h),
                         ctx.rate, ctx.rng)
            hidden.append(x)
            attn.append(cross.weights)
        logits = x @ ps["out.w"] + ps["out.b"]
        return hidden, attn, logits

    def forced_decode(self, src, tgt, ctx: RunContext = EVAL) -> DecoderTrace:
        """Teacher-forced pass over ``tgt``; position t sees only tgt[:t]."""
        src = _as_batch(src)
        tgt = _as_batch(tgt)
        check_tokens(src, self.cfg.src_vocab, self.cfg.max_len, "source")
        if tgt.shape[1] < 1 or not np.any(tgt != PAD):
            raise ValueError("target is empty")
        check_tokens(tgt, self.cfg.tgt_vocab, self.cfg.max_len, "target")
        if tgt.shape[0] != src.shape[0]:
            raise ValueError("source and target batch sizes differ")
        dec_in = np.concatenate([np.full((tgt.shape[0], 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
        # positions after the end of a shorter target stay padding
        dec_in[:, 1:][tgt[:, :-1] == PAD] = PAD
        context = run_encoder(self.params, self.cfg, src, ctx)
        hidden, attn, logits = self._decode(src, context, dec_in, ctx)
        return DecoderTrace(hidden, attn, logits, tgt != PAD, src != PAD)

    def score_sequence(self, src, tgt) -> np.ndarray:
        """Sum of log P(y_t | y_<t, x) per sentence, from one parallel pass."""
        tgt = _as_batch(tgt)
        with ad.no_grad():
            trace = self.forced_decode(src, tgt)
            logp = ad.log_softmax(trace.logits).data
        picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
        return np.where(tgt != PAD, picked, 0.0).sum(axis=1)

    def greedy_decode(self, src, max_len: int | None = None) -> list[list[int]]:
        """Left-to-right argmax decoding, batched over sentences.

        ``decoder_steps`` grows by one per decoder forward pass; the returned
        ``last_steps`` list records the passes each sentence consumed (its
        emitted tokens plus the terminating EOS, when one was produced).
        """
        src = _as_batch(src)
        limit = self.cfg.max_len if max_len is None else min(max_len, self.cfg.max_len)
        b = src.shape[0]
        out = [[] for _ in range(b)]
        steps = [0] * b
        done = np.zeros(b, dtype=bool)
        with ad.no_grad():
            context = self.encode(src)
            dec_in = np.full((b, 1), BOS, dtype=np.int64)
            while not done.all() and dec_in.shape[1] <= limit:
                _, _, logits = self._decode(src, context, dec_in, EVAL)
                self.decoder_steps += 1
                nxt = np.argmax(logits.data[:, -1], axis=-1)
                for i in np.flatnonzero(~done):
                    steps[i] += 1
                    if nxt[i] == EOS:
                        done[i] = True
                    else:
                        out[i].append(int(nxt[i]))
                        if len(out[i]) >= limit:
                            done[i] = True
                nxt = np.where(done, PAD, nxt)
                dec_in = np.concatenate([dec_in, nxt[:, None]], axis=1)
        self.last_steps = steps
        return out
