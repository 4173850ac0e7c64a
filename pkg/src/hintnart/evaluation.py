"""BLEU, repetition statistics, hidden-state similarity and attention exports."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

THRESHOLDS = (0.25, 0.5)
QUANTILE_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))


def _ngrams(tokens: Sequence[Hashable], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references, max_n: int = 4) -> dict:
    """Corpus n-gram match/total counts and lengths."""
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    if not hypotheses:
        raise ValueError("empty hypothesis set")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    return {"matches": matches, "totals": totals, "hyp_len": hyp_len, "ref_len": ref_len}


def bleu(hypotheses, references, max_n: int = 4) -> float:
    """Corpus BLEU in [0, 1].

    Orders with no hypothesis n-grams are left out of the geometric mean.
    If any remaining precision is zero, orders n >= 2 get add-one smoothing.
    """
    st = bleu_stats(hypotheses, references, max_n)
    c, r = st["hyp_len"], st["ref_len"]
    if c == 0:
        return 0.0
    orders = [n for n in range(max_n) if st["totals"][n] > 0]
    m = [st["matches"][n] for n in orders]
    t = [st["totals"][n] for n in orders]
    if m[0] == 0:
        return 0.0
    if any(x == 0 for x in m):
        m = [m[0]] + [x + 1 for x in m[1:]]
        t = [t[0]] + [x + 1 for x in t[1:]]
    log_p = sum(math.log(a / b) for a, b in zip(m, t)) / len(orders)
    bp = math.exp(min(0.0, 1.0 - r / c))
    return min(1.0, bp * math.exp(log_p))


def repetition_rate(tokens: Sequence[Hashable]) -> float:
    """Fraction of positions repeating their immediate predecessor."""
    if len(tokens) == 0:
        raise ValueError("repetition rate of an empty sentence")
    reps = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return reps / len(tokens)


def duplicate_rate(tokens: Sequence[Hashable]) -> float:
    """Fraction of positions whose token already occurred earlier in the sentence."""
    if len(tokens) == 0:
        raise ValueError("repetition rate of an empty sentence")
    return (len(tokens) - len(set(tokens))) / len(tokens)


# ---------------------------------------------------------------- similarity


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (T_y, T_y)
    layer: int          # 1-based
    tag: str = "teacher"

    def off_diagonal(self) -> np.ndarray:
        return self.values[np.triu_indices(self.values.shape[0], k=1)]


def cosine_similarity_matrix(hidden: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(hidden, axis=-1, keepdims=True)
    unit = hidden / np.where(norm == 0.0, 1.0, norm)
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


def _sentence_view(trace, b: int) -> dict:
    if isinstance(trace, dict):
        return trace
    return trace.sentence(b)


def similarity_matrix(trace, layer: int | None = None, tag: str = "teacher", b: int = 0) -> SimilarityMatrix:
    """Pairwise cosine similarity of one decoder layer's states (default: last layer)."""
    hidden = _sentence_view(trace, b)["hidden"]
    n_layers = hidden.shape[0]
    layer = n_layers if layer is None else layer
    if not 1 <= layer <= n_layers:
        raise IndexError(f"layer must be in 1..{n_layers}")
    return SimilarityMatrix(cosine_similarity_matrix(hidden[layer - 1].astype(np.float64)), layer, tag)


def similarity_quantiles(matrices: Sequence[SimilarityMatrix]) -> dict[str, float]:
    """Share of strict-upper-triangle entries below each threshold, plus a quantile grid."""
    if not matrices:
        raise ValueError("no similarity matrices")
    vals = np.concatenate([m.off_diagonal() for m in matrices])
    out: dict[str, float] = {}
    if vals.size == 0:
        return out
    for th in THRESHOLDS:
        out[f"below_{th:g}"] = float(np.mean(vals < th))
    for q in QUANTILE_GRID:
        out[f"q{int(round(q * 100)):02d}"] = float(np.quantile(vals, q))
    return out


def mean_off_diagonal(matrices: Sequence[SimilarityMatrix]) -> float:
    vals = np.concatenate([m.off_diagonal() for m in matrices])
    return float(vals.mean()) if vals.size else 0.0


def attention_entropy(attn: np.ndarray) -> np.ndarray:
    """Mean row entropy per (layer, head) of an N x H x T_y x T_x stack."""
    p = np.clip(attn, 1e-12, 1.0)
    return -(attn * np.log(p)).sum(axis=-1).mean(axis=-1)


# ---------------------------------------------------------------- grid export


def format_grid(values: np.ndarray, row_labels: Sequence[str], col_labels: Sequence[str],
                layer: int, head: int, tag: str) -> str:
    rows, cols = values.shape
    if len(row_labels) != rows or len(col_labels) != cols:
        raise ValueError("label counts do not match the matrix")
    lines = [f"# rows={rows} cols={cols} layer={layer} head={head} model={tag}",
             "\t".join(col_labels)]
    for label, row in zip(row_labels, values):
        lines.append("\t".join([label] + [f"{v:.6f}" for v in row]))
    return "\n".join(lines) + "\n"


@dataclass
class Grid:
    values: np.ndarray
    row_labels: list[str]
    col_labels: list[str]
    meta: dict[str, str] = field(default_factory=dict)


def parse_grid(text: str) -> Grid:
    lines = text.rstrip("\n").split("\n")
    if not lines or not lines[0].startswith("# "):
        raise ValueError("grid header missing")
    meta = dict(item.split("=", 1) for item in lines[0][2:].split())
    cols = lines[1].split("\t") if len(lines) > 1 else []
    rows, values = [], []
    for line in lines[2:]:
        parts = line.split("\t")
        rows.append(parts[0])
        values.append([float(v) for v in parts[1:]])
    arr = np.asarray(values, dtype=np.float64).reshape(int(meta["rows"]), int(meta["cols"]))
    return Grid(arr, rows, cols, meta)


def export_attention(trace, layer: int, head: int, src_tokens: Sequence[str],
                     tgt_tokens: Sequence[str], tag: str = "teacher", b: int = 0) -> str:
    """Grid text of one head's encoder-decoder attention (1-based layer and head)."""
    attn = _sentence_view(trace, b)["attn"]
    n_layers, n_heads = attn.shape[:2]
    if not 1 <= layer <= n_layers:
        raise IndexError(f"layer must be in 1..{n_layers}")
    if not 1 <= head <= n_heads:
        raise IndexError(f"head must be in 1..{n_heads}")
    return format_grid(attn[layer - 1, head - 1], tgt_tokens, src_tokens, layer, head, tag)


def export_similarity(sim: SimilarityMatrix, tokens: Sequence[str]) -> str:
    return format_grid(sim.values, tokens, tokens, sim.layer, 0, sim.tag)


def diagonal_offset(attn_row_argmax: np.ndarray, t_x: int, t_y: int) -> float:
    """Mean |argmax(row t) - t * T_x / T_y| (0-based t)."""
    t = np.arange(t_y)
    return float(np.mean(np.abs(attn_row_argmax - t * t_x / t_y)))


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    bleu: float
    repetition: list[float]
    duplicates: list[float]
    similarity: dict[str, float] = field(default_factory=dict)
    quantiles: dict[str, dict[str, float]] = field(default_factory=dict)
    entropy: dict[str, list[float]] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def mean_repetition(self) -> float:
        return float(np.mean(self.repetition)) if self.repetition else 0.0

    @property
    def mean_duplicates(self) -> float:
        return float(np.mean(self.duplicates)) if self.duplicates else 0.0

    def to_text(self) -> str:
        rows = [("bleu", f"{100.0 * self.bleu:.2f}"),
                ("sentences", str(len(self.repetition))),
                ("repetition_rate", f"{self.mean_repetition:.6f}"),
                ("duplicate_rate", f"{self.mean_duplicates:.6f}")]
        for tag, v in self.similarity.items():
            rows.append((f"mean_similarity.{tag}", f"{v:.6f}"))
        for tag, table in self.quantiles.items():
            for k, v in table.items():
                rows.append((f"similarity.{tag}.{k}", f"{v:.6f}"))
        for tag, ent in self.entropy.items():
            rows.append((f"attention_entropy.{tag}", " ".join(f"{x:.4f}" for x in ent)))
        for k, v in self.extra.items():
            rows.append((k, f"{v:.6f}" if isinstance(v, float) else str(v)))
        rows.append(("repetition_rates", " ".join(f"{x:.4f}" for x in self.repetition)))
        return "".join(f"{k}\t{v}\n" for k, v in rows)


def evaluate_outputs(hypotheses, references) -> EvalReport:
    return EvalReport(bleu=bleu(hypotheses, references),
                      repetition=[repetition_rate(h) if h else 0.0 for h in hypotheses],
                      duplicates=[duplicate_rate(h) if h else 0.0 for h in hypotheses])
