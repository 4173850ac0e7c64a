"""Training objective: smoothed NLL plus hidden-state and alignment hints."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ConfigError

COS_CLAMP = 1.0 - 1e-7
KL_FLOOR = 1e-9

# count of zero-norm hidden vectors met by the cosine guard
degenerate_vectors = 0


class TrainingStepError(RuntimeError):
    """A loss component became non-finite; ``diagnostics`` holds the dump."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class HintConfig:
    gamma_st: float = 0.1
    gamma_tr: float = 0.9
    lam: float = 5.0
    mu: float = 1.0
    label_smoothing: float = 0.1
    # "log" charges -log(1 - d_st); "exp" charges exp(d_st)
    penalty: str = "log"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (-1.0 <= self.gamma_st <= 1.0 and -1.0 <= self.gamma_tr <= 1.0):
            raise ConfigError("similarity thresholds must lie in [-1, 1]")
        if self.lam < 0 or self.mu < 0:
            raise ConfigError("hint weights must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label smoothing must lie in [0, 1)")
        if self.penalty not in ("log", "exp"):
            raise ConfigError("penalty must be 'log' or 'exp'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    nll: float
    hid: float
    align: float
    total: float

    def as_row(self) -> list[float]:
        return [self.nll, self.hid, self.align, self.total]


# ---------------------------------------------------------------- scalar helpers


def cosine(u, v) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 when either vector has zero norm."""
    global degenerate_vectors
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        degenerate_vectors += 1
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def phi(d_st: float, d_tr: float, cfg: HintConfig | None = None) -> float:
    """Penalty for a student pair that is similar while the teacher pair is not."""
    cfg = cfg or HintConfig()
    if not (d_st >= cfg.gamma_st and d_tr <= cfg.gamma_tr):
        return 0.0
    d = min(d_st, COS_CLAMP)
    return -math.log(1.0 - d) if cfg.penalty == "log" else math.exp(d)


# ---------------------------------------------------------------- batched losses


def _per_layer(x) -> list:
    """Accept a per-layer list of (B, T, ...) or a single-sentence N x T x ... stack."""
    if isinstance(x, (list, tuple)):
        return list(x)
    if isinstance(x, Tensor):
        return [x[l][None] for l in range(x.shape[0])]
    x = np.asarray(x)
    return [x[l][None] for l in range(x.shape[0])]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _full_mask(first_layer, mask) -> np.ndarray:
    shape = _data(first_layer).shape
    if mask is None:
        b, t = shape[0], shape[-2]
        return np.ones((b, t), dtype=bool)
    return np.asarray(mask, dtype=bool)


def cosine_matrix(h: Tensor) -> Tensor:
    """(B, T, T) pairwise cosine similarities of the rows of a (B, T, d) tensor."""
    global degenerate_vectors
    h = h if isinstance(h, Tensor) else Tensor(h)
    sq = (h * h).sum(axis=-1, keepdims=True)
    zero = sq.data == 0.0
    if zero.any():
        degenerate_vectors += int(zero.sum())
        sq = sq + zero.astype(h.dtype)
    unit = h / ad.sqrt(sq)
    return ad.clamp(unit @ ad.swap_last(unit), -1.0, 1.0)


def cosine_gap_matrix(h: Tensor) -> Tensor:
    """(B, T, T) values of 1 - cos, as half the squared distance of unit vectors.

    Same quantity as 1 - cosine_matrix(h), but without the cancellation that
    loses precision when two states are nearly parallel.
    """
    h = h if isinstance(h, Tensor) else Tensor(h)
    sq = (h * h).sum(axis=-1, keepdims=True)
    zero = sq.data == 0.0
    if zero.any():
        sq = sq + zero.astype(h.dtype)
    unit = h / ad.sqrt(sq)
    b, t, d = unit.shape
    diff = unit.reshape(b, t, 1, d) - unit.reshape(b, 1, t, d)
    return (diff * diff).sum(axis=-1) * 0.5


def _cosine_numpy(h: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    unit = h / np.where(norm == 0.0, 1.0, norm)
    return np.clip(unit @ np.swapaxes(unit, -1, -2), -1.0, 1.0)


def loss_hid(student_hidden, teacher_hidden, cfg: HintConfig, mask=None) -> Tensor:
    """Mean penalty over unordered position pairs s < t and decoder layers.

    Teacher states are constants. Sentences shorter than two tokens add 0.
    """
    s_layers = _per_layer(student_hidden)
    t_layers = [_data(t) for t in _per_layer(teacher_hidden)]
    if len(s_layers) != len(t_layers):
        raise ValueError("student and teacher traces have different depth")
    mask = _full_mask(s_layers[0], mask)
    b, t = mask.shape
    lengths = mask.sum(axis=1)
    pairs = np.triu(np.ones((t, t), dtype=bool), k=1)[None] & mask[:, :, None] & mask[:, None, :]
    n_pairs = lengths * (lengths - 1) / 2.0
    norm = np.where(n_pairs > 0, 1.0 / np.maximum(n_pairs, 1.0) / len(s_layers), 0.0)
    total = None
    for s_h, t_h in zip(s_layers, t_layers):
        s_h = s_h if isinstance(s_h, Tensor) else Tensor(s_h)
        if s_h.shape != t_h.shape:
            raise ValueError("student and teacher hidden shapes differ")
        d_st = cosine_matrix(s_h)
        d_tr = _cosine_numpy(t_h)
        active = pairs & (d_st.data >= cfg.gamma_st) & (d_tr <= cfg.gamma_tr)
        if cfg.penalty == "log":
            pen = -ad.log(ad.clamp(cosine_gap_matrix(s_h), lo=1.0 - COS_CLAMP))
        else:
            pen = ad.exp(ad.clamp(d_st, hi=COS_CLAMP))
        weight = active * norm[:, None, None]
        term = (pen * weight.astype(s_h.dtype)).sum()
        total = term if total is None else total + term
    return total * (1.0 / b)


def loss_hidden_l2(student_hidden, teacher_hidden, mask=None) -> Tensor:
    """Direct squared-distance regression onto teacher states (negative control)."""
    s_layers = _per_layer(student_hidden)
    t_layers = [_data(t) for t in _per_layer(teacher_hidden)]
    mask = _full_mask(s_layers[0], mask)
    lengths = mask.sum(axis=1)
    w = (mask / lengths[:, None] / len(s_layers) / mask.shape[0])[..., None]
    total = None
    for s_h, t_h in zip(s_layers, t_layers):
        s_h = s_h if isinstance(s_h, Tensor) else Tensor(s_h)
        diff = s_h - t_h
        term = (diff * diff * w.astype(diff.dtype)).sum()
        total = term if total is None else total + term
    return total


def loss_align(student_attn, teacher_attn, mask=None) -> Tensor:
    """Mean KL(teacher || student) over attention rows, layers and heads."""
    s_layers = _per_layer(student_attn)
    t_layers = [_data(t) for t in _per_layer(teacher_attn)]
    if len(s_layers) != len(t_layers):
        raise ValueError("student and teacher traces have different depth")
    mask = _full_mask(s_layers[0], mask)
    b = mask.shape[0]
    lengths = mask.sum(axis=1)
    total = None
    for s_a, t_a in zip(s_layers, t_layers):
        s_a = s_a if isinstance(s_a, Tensor) else Tensor(s_a)
        if s_a.shape != t_a.shape:
            raise ValueError("student and teacher attention shapes differ")
        heads = s_a.shape[1]
        row_w = (mask / np.maximum(lengths, 1)[:, None] / heads / len(s_layers) / b)
        weight = t_a * row_w[:, None, :, None]
        safe_t = np.where(t_a > 0, t_a, 1.0)
        const = float(np.sum(weight * np.log(safe_t)))
        cross = (ad.log(ad.clamp(s_a, lo=KL_FLOOR)) * weight.astype(s_a.dtype)).sum()
        term = const - cross
        total = term if total is None else total + term
    return total


def smoothed_targets(y: np.ndarray, vocab: int, eps: float, dtype=np.float64) -> np.ndarray:
    q = np.full(y.shape + (vocab,), eps / vocab, dtype=dtype)
    np.put_along_axis(q, y[..., None], 1.0 - eps + eps / vocab, axis=-1)
    return q


def loss_nll(logits, y, eps: float = 0.1, mask=None) -> Tensor:
    """Cross-entropy to the label-smoothed target, mean over real positions then batch."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(y, dtype=np.int64)
    if logits.ndim == 2:
        logits = logits.reshape(1, *logits.shape)
        y = y[None]
        mask = None if mask is None else np.asarray(mask)[None]
    vocab = logits.shape[-1]
    if y.min() < 0 or y.max() >= vocab:
        raise ValueError("target id outside the vocabulary")
    mask = np.ones(y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    lengths = mask.sum(axis=1)
    if np.any(lengths == 0):
        raise ValueError("target sentence has no non-pad position")
    q = smoothed_targets(y, vocab, eps, logits.dtype)
    q *= (mask / lengths[:, None] / y.shape[0])[..., None]
    return -(ad.log_softmax(logits) * q).sum()


def loss_total(nll, hid, align, cfg: HintConfig) -> tuple[Tensor, LossBreakdown]:
    """nll + lam * hid + mu * align, with a scalar breakdown."""
    parts = {"nll": nll, "hid": hid, "align": align}
    values = {k: (0.0 if v is None else float(_data(v))) for k, v in parts.items()}
    bad = [k for k, v in values.items() if not math.isfinite(v)]
    if bad:
        raise TrainingStepError(f"non-finite loss component(s): {', '.join(bad)}",
                                dict(values, lam=cfg.lam, mu=cfg.mu))
    total = nll if isinstance(nll, Tensor) else Tensor(np.asarray(nll, dtype=np.float64))
    if hid is not None and cfg.lam != 0.0:
        total = total + hid * cfg.lam
    if align is not None and cfg.mu != 0.0:
        total = total + align * cfg.mu
    breakdown = LossBreakdown(values["nll"], values["hid"], values["align"], float(total.data))
    return total, breakdown
