"""Training recipes: teacher, sequence-level distillation, hinted student."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .losses import (HintConfig, LossBreakdown, TrainingStepError, loss_align, loss_hid,
                     loss_hidden_l2, loss_nll, loss_total)
from .nn import EOS, PAD, ConfigError, ModelConfig, ParamStore, RunContext
from .student import Student
from .teacher import Teacher, pad_batch

log = logging.getLogger(__name__)

ABLATIONS = ("nll", "nll+align", "nll+align+hid", "nll+l2")

IdPair = tuple[list[int], list[int]]


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 16
    warmup: int = 400
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    dropout: float = 0.1
    clip_norm: float = 1.0
    seed: int = 0
    ablation: str = "nll+align+hid"
    tau: float = 0.3
    cache_teacher: bool = False
    hints: HintConfig = field(default_factory=HintConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.warmup < 1:
            raise ConfigError("warmup must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {', '.join(ABLATIONS)}")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        self.hints.validate()

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(step: int, d_model: int, warmup: int, scale: float = 1.0) -> float:
    """scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1."""
    return scale * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


class Adam:
    """Adam with bias correction over a ParamStore; single writer."""

    def __init__(self, params: ParamStore, beta1=0.9, beta2=0.98, eps=1e-9,
                 m: dict | None = None, v: dict | None = None, step: int = 0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        # moments are updated in place, so never alias the caller's arrays
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()} if not m else {k: a.copy() for k, a in m.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()} if not v else {k: a.copy() for k, a in v.items()}
        self.t = step

    def step(self, lr: float, clip_norm: float | None = None) -> float:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if clip_norm and norm > clip_norm:
            scale = clip_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k] * scale if scale != 1.0 else grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            p.grad = None
        return norm


def length_batches(lengths: Sequence[int], batch_size: int) -> list[np.ndarray]:
    """Fixed batches of similar-length examples (stable sort, then chunk)."""
    order = np.argsort(np.asarray(lengths), kind="stable")
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def batch_for_step(batches: list[np.ndarray], step: int, seed: int) -> tuple[int, np.ndarray]:
    """The batch used at 1-based ``step``; order is reshuffled every epoch."""
    n = len(batches)
    epoch, pos = divmod(step - 1, n)
    perm = np.random.Generator(np.random.Philox(key=[seed, epoch])).permutation(n)
    k = int(perm[pos])
    return k, batches[k]


def step_context(seed: int, step: int, rate: float) -> RunContext:
    """Dropout generator keyed by (seed, step), so resumed runs replay exactly."""
    if rate <= 0.0:
        return RunContext()
    gen = np.random.Generator(np.random.Philox(key=[seed, 1 << 20 | step]))
    return RunContext(rate, gen)


def format_log_row(step: int, lr: float, b: LossBreakdown) -> str:
    return "\t".join([str(step), f"{lr:.6e}"] + [f"{x:.6f}" for x in b.as_row()])


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[LossBreakdown]
    log_lines: list[str]
    teacher_calls: int = 0


def _check_corpus(corpus: Sequence[IdPair]) -> None:
    if not corpus:
        raise ValueError("training corpus is empty")


def _resumed_params(resume: Checkpoint) -> ParamStore:
    """Fresh copy of a checkpoint's parameters; training must not mutate the checkpoint."""
    params = ParamStore(resume.params.dtype)
    for k, t in resume.params.items():
        params.add(k, t.data.copy())
    return params


def _init_opt(params: ParamStore, cfg: TrainConfig, resume: Checkpoint | None) -> Adam:
    if resume is None:
        return Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, resume.adam_m, resume.adam_v, resume.step)


def train_teacher(corpus: Sequence[IdPair], model_cfg: ModelConfig, cfg: TrainConfig,
                  vocab: Sequence[str] = (), resume: Checkpoint | None = None,
                  on_step: Callable[[str], None] | None = None) -> TrainResult:
    """Teacher-forced label-smoothed NLL on ``target + EOS``."""
    _check_corpus(corpus)
    if resume is not None:
        teacher = Teacher(resume.model_cfg, params=_resumed_params(resume))
        model_cfg = resume.model_cfg
    else:
        teacher = Teacher(model_cfg, seed=cfg.seed)
    opt = _init_opt(teacher.params, cfg, resume)
    batches = length_batches([len(t) for _, t in corpus], cfg.batch_size)
    history, lines = [], []
    last_good, good_step = _snapshot(teacher.params), opt.t
    for step in range(opt.t + 1, cfg.steps + 1):
        _, idx = batch_for_step(batches, step, cfg.seed)
        src = pad_batch([corpus[i][0] for i in idx])
        tgt = pad_batch([list(corpus[i][1]) + [EOS] for i in idx])
        ctx = step_context(cfg.seed, step, cfg.dropout)
        trace = teacher.forced_decode(src, tgt, ctx)
        nll = loss_nll(trace.logits, tgt, cfg.hints.label_smoothing, tgt != PAD)
        try:
            total, bd = loss_total(nll, None, None, cfg.hints)
        except TrainingStepError as exc:
            _restore(teacher.params, last_good)
            exc.checkpoint = Checkpoint("teacher", model_cfg, teacher.params, step=good_step,
                                        seed=cfg.seed, vocab=list(vocab))
            raise
        ad.backward(total)
        lr = learning_rate(step, model_cfg.d_model, cfg.warmup, cfg.lr_scale)
        opt.step(lr, cfg.clip_norm)
        history.append(bd)
        lines.append(format_log_row(step, lr, bd))
        if on_step:
            on_step(lines[-1])
        if step % 100 == 0:
            last_good, good_step = _snapshot(teacher.params), step
            log.debug("teacher step %d nll %.4f", step, bd.nll)
    ck = Checkpoint("teacher", model_cfg, teacher.params, step=opt.t, seed=cfg.seed,
                    tau=cfg.tau, vocab=list(vocab), adam_m=opt.m, adam_v=opt.v)
    return TrainResult(ck, history, lines)


def _snapshot(params: ParamStore) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in params.items()}


def _restore(params: ParamStore, snap: dict[str, np.ndarray]) -> None:
    for k, t in params.items():
        t.data = snap[k].copy()


@dataclass
class DistillResult:
    pairs: list[IdPair]
    originals: list[IdPair]
    dropped: int


def distill_corpus(teacher: Teacher, corpus: Sequence[IdPair], batch_size: int = 64,
                   max_len: int | None = None) -> DistillResult:
    """Replace each target by the teacher's greedy decode; empty decodes are dropped."""
    out, originals, dropped = [], [], 0
    order = np.argsort([len(s) for s, _ in corpus], kind="stable")
    decoded: dict[int, list[int]] = {}
    for lo in range(0, len(order), batch_size):
        idx = order[lo:lo + batch_size]
        hyps = teacher.greedy_decode(pad_batch([corpus[i][0] for i in idx]), max_len)
        for i, h in zip(idx, hyps):
            decoded[int(i)] = h
    for i, (src, tgt) in enumerate(corpus):
        if not decoded[i]:
            dropped += 1
            continue
        out.append((list(src), decoded[i]))
        originals.append((list(src), list(tgt)))
    return DistillResult(out, originals, dropped)


def check_compatible(teacher_cfg: ModelConfig, student_cfg: ModelConfig) -> None:
    for name in ("enc_layers", "dec_layers", "heads", "d_model"):
        if getattr(teacher_cfg, name) != getattr(student_cfg, name):
            raise ConfigError(f"teacher and student disagree on {name}")
    if teacher_cfg.max_len < student_cfg.max_len:
        raise ConfigError("teacher max_len is shorter than the student's")


class HintSource:
    """Teacher traces for a batch; counts how often the teacher is run."""

    def __init__(self, teacher: Teacher, cache: bool = False):
        self.teacher = teacher
        self.calls = 0
        self.cache = {} if cache else None

    def __call__(self, key, src: np.ndarray, tgt: np.ndarray):
        if self.cache is not None and key in self.cache:
            return self.cache[key]
        self.calls += 1
        with ad.no_grad():
            trace = self.teacher.forced_decode(src, tgt)
        result = ([h.data for h in trace.hidden], [a.data for a in trace.attn])
        if self.cache is not None:
            self.cache[key] = result
        return result


def student_losses(student: Student, hints: HintSource | None, src: np.ndarray, tgt: np.ndarray,
                   cfg: TrainConfig, ctx: RunContext, key=None):
    """Forward the student at the reference lengths and assemble the loss."""
    mask = tgt != PAD
    lengths = mask.sum(axis=1)
    trace = student.parallel_decode_forward(src, lengths, ctx)
    nll = loss_nll(trace.logits, tgt, cfg.hints.label_smoothing, mask)
    hid = align = None
    hcfg = cfg.hints
    if cfg.ablation == "nll":
        hcfg = HintConfig(**{**hcfg.to_dict(), "lam": 0.0, "mu": 0.0})
    else:
        t_hidden, t_attn = hints(key, src, tgt)
        if cfg.ablation in ("nll+align", "nll+align+hid"):
            align = loss_align(trace.attn, t_attn, mask)
        if cfg.ablation == "nll+align+hid":
            hid = loss_hid(trace.hidden, t_hidden, hcfg, mask)
        elif cfg.ablation == "nll+l2":
            hid = loss_hidden_l2(trace.hidden, t_hidden, mask)
        if cfg.ablation == "nll+align":
            hcfg = HintConfig(**{**hcfg.to_dict(), "lam": 0.0})
        elif cfg.ablation == "nll+l2":
            hcfg = HintConfig(**{**hcfg.to_dict(), "mu": 0.0})
    return loss_total(nll, hid, align, hcfg)


def train_student(teacher: Teacher, corpus: Sequence[IdPair], model_cfg: ModelConfig,
                  cfg: TrainConfig, vocab: Sequence[str] = (), resume: Checkpoint | None = None,
                  on_step: Callable[[str], None] | None = None) -> TrainResult:
    """Train a student on (distilled) pairs with the configured hint losses."""
    _check_corpus(corpus)
    if resume is not None:
        model_cfg = resume.model_cfg
        student = Student(model_cfg, tau=resume.tau, params=_resumed_params(resume))
    else:
        student = Student(model_cfg, tau=cfg.tau, seed=cfg.seed)
    check_compatible(teacher.cfg, model_cfg)
    hints = HintSource(teacher, cfg.cache_teacher) if cfg.ablation != "nll" else None
    opt = _init_opt(student.params, cfg, resume)
    batches = length_batches([len(t) for _, t in corpus], cfg.batch_size)
    history, lines = [], []
    for step in range(opt.t + 1, cfg.steps + 1):
        k, idx = batch_for_step(batches, step, cfg.seed)
        src = pad_batch([corpus[i][0] for i in idx])
        tgt = pad_batch([corpus[i][1] for i in idx])
        ctx = step_context(cfg.seed, step, cfg.dropout)
        total, bd = student_losses(student, hints, src, tgt, cfg, ctx, key=k)
        ad.backward(total)
        lr = learning_rate(step, model_cfg.d_model, cfg.warmup, cfg.lr_scale)
        opt.step(lr, cfg.clip_norm)
        history.append(bd)
        lines.append(format_log_row(step, lr, bd))
        if on_step:
            on_step(lines[-1])
    ck = Checkpoint("student", model_cfg, student.params, step=opt.t, seed=cfg.seed,
                    tau=student.tau, vocab=list(vocab), adam_m=opt.m, adam_v=opt.v,
                    extra={"ablation": cfg.ablation})
    return TrainResult(ck, history, lines, hints.calls if hints is not None else 0)
