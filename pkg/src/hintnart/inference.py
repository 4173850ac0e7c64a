"""Length-candidate decoding with the student and optional teacher rescoring."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .nn import EOS, ConfigError
from .student import Student
from .teacher import Teacher


@dataclass
class InferenceConfig:
    length_bias: int = 0          # C
    halfwidth: int = 4            # B
    rescore: bool = True
    # divide teacher scores by scored length before comparing
    length_normalize: bool = False
    # score each candidate followed by EOS, so the teacher also judges its length
    score_eos: bool = True

    def __post_init__(self):
        if self.halfwidth < 0:
            raise ConfigError("halfwidth B must be >= 0")


@dataclass
class Candidate:
    length: int
    tokens: list[int]
    student_logprobs: list[float]
    teacher_score: float | None = None

    @property
    def output(self) -> list[int]:
        """Tokens up to (excluding) the first EOS."""
        return self.tokens[:self.tokens.index(EOS)] if EOS in self.tokens else list(self.tokens)


@dataclass
class Translation:
    chosen: Candidate
    candidates: list[Candidate]
    student_steps: int
    teacher_scorings: int


def predict_length(t_x: int, c: int) -> int:
    if t_x < 1:
        raise ValueError("source length must be >= 1")
    return max(1, t_x + c)


def candidate_lengths(t_x: int, c: int, b: int) -> list[int]:
    """Sorted distinct lengths in [T_x + C - B, T_x + C + B], floored at 1."""
    if b < 0:
        raise ValueError("halfwidth must be >= 0")
    centre = t_x + c
    return sorted({max(1, n) for n in range(centre - b, centre + b + 1)})


def _pick(candidates: Sequence[Candidate], normalize: bool) -> Candidate:
    def key(cand: Candidate):
        score = cand.teacher_score
        if normalize:
            score = score / max(1, len(cand.output) + 1)
        return (-score, cand.length, cand.tokens)
    return min(candidates, key=key)


def student_candidates(student: Student, src: Sequence[int], lengths: Sequence[int]) -> list[Candidate]:
    """One independent student forward per length."""
    out = []
    with ad.no_grad():
        for n in lengths:
            trace = student.parallel_decode_forward([list(src)], [n])
            logp = ad.log_softmax(trace.logits).data[0]
            ids = np.argmax(logp, axis=-1)
            out.append(Candidate(n, ids.tolist(), logp.max(axis=-1).tolist()))
    return out


def rescore(teacher: Teacher, src: Sequence[int], candidates: Sequence[Candidate],
            score_eos: bool = True) -> None:
    """Fill ``teacher_score`` with the teacher's parallel log-probability."""
    seqs = []
    for cand in candidates:
        seq = cand.output + ([EOS] if score_eos else [])
        seqs.append(seq if seq else [EOS])
    scores = teacher.score_sequence([list(src)] * len(seqs), seqs)
    for cand, s in zip(candidates, scores):
        cand.teacher_score = float(s)


def translate(src: Sequence[int], student: Student, teacher: Teacher | None,
              cfg: InferenceConfig) -> Translation:
    if cfg.rescore and teacher is None:
        raise ConfigError("rescoring requires a teacher model")
    t_x = len(src)
    if cfg.rescore:
        lengths = candidate_lengths(t_x, cfg.length_bias, cfg.halfwidth)
    else:
        lengths = [predict_length(t_x, cfg.length_bias)]
    cands = student_candidates(student, src, lengths)
    if cfg.rescore:
        rescore(teacher, src, cands, cfg.score_eos)
        chosen = _pick(cands, cfg.length_normalize)
    else:
        chosen = cands[0]
    return Translation(chosen, cands, len(lengths), len(cands) if cfg.rescore else 0)


def translate_corpus(sources: Sequence[Sequence[int]], student: Student, teacher: Teacher | None,
                     cfg: InferenceConfig) -> list[Translation]:
    return [translate(s, student, teacher, cfg) for s in sources]


def decode_fixed_bias(student: Student, sources: Sequence[Sequence[int]], c: int,
                      batch_size: int = 64) -> list[list[int]]:
    """Batched B=0 decoding at T_y = T_x + C, EOS-truncated."""
    out: list[list[int]] = []
    for lo in range(0, len(sources), batch_size):
        chunk = [list(s) for s in sources[lo:lo + batch_size]]
        lengths = [predict_length(len(s), c) for s in chunk]
        for toks in student.decode(chunk, lengths):
            out.append(toks[:toks.index(EOS)] if EOS in toks else toks)
    return out


# ---------------------------------------------------------------- latency


@dataclass
class LatencyReport:
    sentences: int
    teacher_mean_ms: float
    teacher_median_ms: float
    student_mean_ms: float
    student_median_ms: float
    teacher_steps: list[int] = field(default_factory=list)
    student_steps: list[int] = field(default_factory=list)
    halfwidth: int = 0
    rescore: bool = False

    @property
    def speedup(self) -> float:
        return self.teacher_mean_ms / self.student_mean_ms if self.student_mean_ms > 0 else float("inf")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speedup"] = self.speedup
        d["teacher_mean_steps"] = float(np.mean(self.teacher_steps)) if self.teacher_steps else 0.0
        d["student_mean_steps"] = float(np.mean(self.student_steps)) if self.student_steps else 0.0
        return d

    def to_text(self) -> str:
        d = self.to_dict()
        keys = ["sentences", "teacher_mean_ms", "teacher_median_ms", "student_mean_ms",
                "student_median_ms", "teacher_mean_steps", "student_mean_steps", "speedup",
                "halfwidth", "rescore"]
        lines = []
        for k in keys:
            v = d[k]
            lines.append(f"{k}\t{v:.4f}" if isinstance(v, float) else f"{k}\t{v}")
        return "\n".join(lines) + "\n"


def latency_report(teacher: Teacher, student: Student, sources: Sequence[Sequence[int]],
                   cfg: InferenceConfig, max_len: int | None = None, repeats: int = 1) -> LatencyReport:
    """Batch-1 wall-clock and sequential decoder-step counts, sentence by sentence."""
    if not sources:
        raise ValueError("latency corpus is empty")
    t_times, s_times, t_steps, s_steps = [], [], [], []
    for src in sources:
        best_t = best_s = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            teacher.greedy_decode([list(src)], max_len)
            best_t = min(best_t, time.perf_counter() - t0)
            t0 = time.perf_counter()
            res = translate(src, student, teacher if cfg.rescore else None, cfg)
            best_s = min(best_s, time.perf_counter() - t0)
        t_steps.append(teacher.last_steps[0])
        s_steps.append(res.student_steps)
        t_times.append(best_t * 1000.0)
        s_times.append(best_s * 1000.0)
    return LatencyReport(len(sources), statistics.fmean(t_times), statistics.median(t_times),
                         statistics.fmean(s_times), statistics.median(s_times), t_steps, s_steps,
                         cfg.halfwidth if cfg.rescore else 0, cfg.rescore)
