"""Command-line workflow: gen-data -> train-teacher -> distill -> train-student -> evaluate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides, dump_config, load_config
from .data import (CorpusParseError, Vocabulary, atomic_write_text, generate_synthetic,
                   load_corpus, load_vocab, mean_length_difference, save_corpus, save_vocab)
from .evaluation import (EvalReport, attention_entropy, bleu, duplicate_rate, export_attention,
                         export_similarity, mean_off_diagonal, repetition_rate, similarity_matrix,
                         similarity_quantiles)
from .inference import InferenceConfig, latency_report, translate_corpus
from .losses import TrainingStepError
from .nn import ConfigError
from .training import ABLATIONS, distill_corpus, train_student, train_teacher

log = logging.getLogger("hintnart")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("gen-data", "train-teacher", "distill", "train-student", "translate", "evaluate",
            "diagnose", "bench-latency")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    def globals_(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without defaults, so values given
        # before the subcommand name are not overwritten
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = _Parser(add_help=False)
        g.add_argument("--config", default=dflt(None), help="experiment config file ([section] key = value)")
        g.add_argument("--seed", type=int, default=dflt(None), help="seed for data generation and training")
        g.add_argument("--out", default=dflt("."), help="output directory (default: .)")
        g.add_argument("--set", action="append", default=dflt([]), metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")
        return g

    common = globals_(True)
    p = _Parser(prog="hintnart", description=__doc__, parents=[globals_(False)])
    p.add_argument("--dump-config", action="store_true", help="print the default config and exit")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic parallel corpus")
    g.add_argument("--identity", action="store_true", help="copy task (no substitution)")

    t = sub.add_parser("train-teacher", parents=[common], help="train the autoregressive teacher")
    t.add_argument("--train", help="training corpus (default: OUT/train.tsv)")
    t.add_argument("--vocab", help="vocabulary file (default: OUT/vocab.txt)")
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", help="continue from this checkpoint")

    d = sub.add_parser("distill", parents=[common], help="replace targets by teacher greedy decodes")
    d.add_argument("--teacher", help="default: OUT/teacher.ckpt")
    d.add_argument("--train", help="default: OUT/train.tsv")

    s = sub.add_parser("train-student", parents=[common], help="train the non-autoregressive student")
    s.add_argument("--teacher", help="default: OUT/teacher.ckpt")
    s.add_argument("--train", help="default: OUT/distilled.tsv")
    s.add_argument("--ablation", choices=["nll", "align", "full", "l2", *ABLATIONS])
    s.add_argument("--steps", type=int)
    s.add_argument("--name", default="student", help="checkpoint/log basename")
    s.add_argument("--resume", help="continue from this checkpoint")

    tr = sub.add_parser("translate", parents=[common], help="decode a corpus with the student")
    tr.add_argument("--student", help="default: OUT/student.ckpt")
    tr.add_argument("--teacher", help="default: OUT/teacher.ckpt")
    tr.add_argument("--input", help="corpus or source-only file (default: OUT/test.tsv)")
    tr.add_argument("--no-rescore", action="store_true", help="single candidate at T_x + C")
    tr.add_argument("--halfwidth", type=int)
    tr.add_argument("--length-bias", type=int)
    tr.add_argument("--output", help="default: OUT/hyp.txt")

    e = sub.add_parser("evaluate", parents=[common], help="BLEU and repetition statistics")
    e.add_argument("--hyp", help="one hypothesis per line (default: OUT/hyp.txt)")
    e.add_argument("--ref", help="reference corpus or file (default: OUT/test.tsv)")

    dg = sub.add_parser("diagnose", parents=[common], help="similarity and attention exports")
    dg.add_argument("--teacher", help="default: OUT/teacher.ckpt")
    dg.add_argument("--student", help="optional student checkpoint")
    dg.add_argument("--data", help="default: OUT/test.tsv")
    dg.add_argument("--layer", type=int, help="similarity layer, 1-based (default: last)")
    dg.add_argument("--limit", type=int, default=3, help="sentences exported as grids")

    b = sub.add_parser("bench-latency", parents=[common], help="batch-1 decoding latency")
    b.add_argument("--teacher", help="default: OUT/teacher.ckpt")
    b.add_argument("--student", help="default: OUT/student.ckpt")
    b.add_argument("--data", help="default: OUT/test.tsv")
    b.add_argument("--limit", type=int, default=100)
    b.add_argument("--rescore", action="store_true", help="include 2B+1 candidates and rescoring")
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else load_config()
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        apply_overrides(cfg, section.strip(), {name.strip(): value})
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.teacher.seed = args.seed
        cfg.student.seed = args.seed
    cfg.sync()
    return cfg


def _path(arg, out: Path, default: str) -> Path:
    return Path(arg) if arg else out / default


def _encoded(path: Path, vocab: Vocabulary):
    pairs, skipped = load_corpus(path)
    if skipped:
        log.info("%s: skipped %d pair(s) with an empty side", path, skipped)
    return pairs, [(vocab.encode(s), vocab.encode(t)) for s, t in pairs]


def _vocab_of(ck) -> Vocabulary:
    return Vocabulary(ck.vocab)


def _write_log(path: Path, lines) -> None:
    atomic_write_text(path, "step\tlr\tnll\thid\talign\ttotal\n" + "".join(l + "\n" for l in lines))


def cmd_gen_data(args, cfg: ExperimentConfig, out: Path) -> int:
    if args.identity:
        cfg.data.identity_map = True
    train, valid, test = generate_synthetic(cfg.data, cfg.model.max_len)
    save_corpus(out / "train.tsv", train)
    save_corpus(out / "valid.tsv", valid)
    save_corpus(out / "test.tsv", test)
    vocab = Vocabulary.from_pairs(train + valid + test)
    save_vocab(out / "vocab.txt", vocab)
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} pairs, vocabulary {len(vocab)} to {out}")
    return EXIT_OK


def _model_cfg(cfg: ExperimentConfig, vocab: Vocabulary):
    cfg.model.src_vocab = cfg.model.tgt_vocab = len(vocab)
    cfg.model.validate()
    return cfg.model


def cmd_train_teacher(args, cfg: ExperimentConfig, out: Path) -> int:
    vocab = load_vocab(_path(args.vocab, out, "vocab.txt"))
    _, corpus = _encoded(_path(args.train, out, "train.tsv"), vocab)
    if args.steps:
        cfg.teacher.steps = args.steps
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        res = train_teacher(corpus, _model_cfg(cfg, vocab), cfg.teacher, vocab.tokens(), resume=resume)
    except TrainingStepError as exc:
        save_checkpoint(out / "teacher.last-good.ckpt", exc.checkpoint)
        raise
    save_checkpoint(out / "teacher.ckpt", res.checkpoint)
    _write_log(out / "teacher.log", res.log_lines)
    print(f"teacher trained for {res.checkpoint.step} steps, final nll {res.history[-1].nll:.4f}")
    return EXIT_OK


def cmd_distill(args, cfg: ExperimentConfig, out: Path) -> int:
    ck = load_checkpoint(_path(args.teacher, out, "teacher.ckpt"))
    vocab = _vocab_of(ck)
    _, corpus = _encoded(_path(args.train, out, "train.tsv"), vocab)
    res = distill_corpus(ck.model(), corpus)
    dec = lambda ps: [(vocab.decode(s), vocab.decode(t)) for s, t in ps]
    save_corpus(out / "distilled.tsv", dec(res.pairs))
    save_corpus(out / "distilled.orig.tsv", dec(res.originals))
    print(f"distilled {len(res.pairs)} pairs, dropped {res.dropped} empty decodes")
    return EXIT_OK


_ABLATION_ALIASES = {"nll": "nll", "align": "nll+align", "full": "nll+align+hid", "l2": "nll+l2"}


def cmd_train_student(args, cfg: ExperimentConfig, out: Path) -> int:
    tck = load_checkpoint(_path(args.teacher, out, "teacher.ckpt"))
    vocab = _vocab_of(tck)
    _, corpus = _encoded(_path(args.train, out, "distilled.tsv"), vocab)
    if args.ablation:
        cfg.student.ablation = _ABLATION_ALIASES.get(args.ablation, args.ablation)
    if args.steps:
        cfg.student.steps = args.steps
    cfg.student.validate()
    resume = load_checkpoint(args.resume) if args.resume else None
    model_cfg = _model_cfg(cfg, vocab)
    res = train_student(tck.model(), corpus, model_cfg, cfg.student, vocab.tokens(), resume=resume)
    save_checkpoint(out / f"{args.name}.ckpt", res.checkpoint)
    _write_log(out / f"{args.name}.log", res.log_lines)
    last = res.history[-1]
    print(f"student ({cfg.student.ablation}) trained for {res.checkpoint.step} steps: "
          f"nll {last.nll:.4f} hid {last.hid:.4f} align {last.align:.4f}")
    return EXIT_OK


def _read_sources(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        lines = [l.rstrip("\r\n") for l in fh]
    if lines and all("\t" in l for l in lines if l):
        return [s for s, _ in load_corpus(path)[0]]
    return [l.split() for l in lines if l.strip()]


def _read_refs(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        lines = [l.rstrip("\r\n") for l in fh]
    if lines and all("\t" in l for l in lines if l):
        return [t for _, t in load_corpus(path)[0]]
    return [l.split(" ") if l else [] for l in lines]


def _inference_cfg(args, cfg: ExperimentConfig, train_pairs_path: Path | None) -> InferenceConfig:
    inf = cfg.inference
    if getattr(args, "halfwidth", None) is not None:
        inf.halfwidth = args.halfwidth
    if getattr(args, "no_rescore", False):
        inf.rescore = False
    if getattr(args, "length_bias", None) is not None:
        inf.length_bias = args.length_bias
    elif cfg.length_bias == "auto":
        pairs = load_corpus(train_pairs_path)[0] if train_pairs_path and train_pairs_path.exists() else []
        inf.length_bias = mean_length_difference(pairs)
    else:
        inf.length_bias = int(cfg.length_bias)
    return inf


def cmd_translate(args, cfg: ExperimentConfig, out: Path) -> int:
    sck = load_checkpoint(_path(args.student, out, "student.ckpt"))
    vocab = _vocab_of(sck)
    inf = _inference_cfg(args, cfg, out / "train.tsv")
    teacher = None
    if inf.rescore:
        teacher = load_checkpoint(_path(args.teacher, out, "teacher.ckpt")).model()
    sources = [vocab.encode(s) for s in _read_sources(_path(args.input, out, "test.tsv"))]
    results = translate_corpus(sources, sck.model(), teacher, inf)
    text = "".join(" ".join(vocab.decode(r.chosen.output)) + "\n" for r in results)
    atomic_write_text(_path(args.output, out, "hyp.txt"), text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args, cfg: ExperimentConfig, out: Path) -> int:
    hyps = _read_refs(_path(args.hyp, out, "hyp.txt"))
    refs = _read_refs(_path(args.ref, out, "test.tsv"))
    report = EvalReport(bleu=bleu(hyps, refs),
                        repetition=[repetition_rate(h) if h else 0.0 for h in hyps],
                        duplicates=[duplicate_rate(h) if h else 0.0 for h in hyps])
    text = report.to_text()
    atomic_write_text(out / "eval.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_diagnose(args, cfg: ExperimentConfig, out: Path) -> int:
    tck = load_checkpoint(_path(args.teacher, out, "teacher.ckpt"))
    vocab = _vocab_of(tck)
    pairs, corpus = _encoded(_path(args.data, out, "test.tsv"), vocab)
    models = [("teacher", tck.model())]
    if args.student:
        sck = load_checkpoint(args.student)
        models.append((f"student-{sck.extra.get('ablation', 'student')}", sck.model()))
    diag = out / "diag"
    report = EvalReport(bleu=0.0, repetition=[], duplicates=[])
    for tag, model in models:
        sims, entropies = [], []
        for k, (src, tgt) in enumerate(corpus):
            with ad.no_grad():
                if model.kind == "teacher":
                    trace = model.forced_decode([src], [tgt])
                else:
                    trace = model.parallel_decode_forward([src], [len(tgt)])
            view = trace.sentence(0)
            sim = similarity_matrix(view, args.layer, tag)
            sims.append(sim)
            entropies.append(attention_entropy(view["attn"]))
            if k < args.limit:
                s_tok, t_tok = pairs[k]
                atomic_write_text(diag / f"{tag}.sim.{k}.tsv", export_similarity(sim, t_tok))
                n_layers, n_heads = view["attn"].shape[:2]
                for l in range(1, n_layers + 1):
                    for h in range(1, n_heads + 1):
                        atomic_write_text(diag / f"{tag}.attn.{k}.l{l}.h{h}.tsv",
                                          export_attention(view, l, h, s_tok, t_tok, tag))
        report.similarity[tag] = mean_off_diagonal(sims)
        report.quantiles[tag] = similarity_quantiles(sims)
        report.entropy[tag] = np.mean(entropies, axis=0).reshape(-1).tolist()
    text = report.to_text()
    atomic_write_text(diag / "report.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bench_latency(args, cfg: ExperimentConfig, out: Path) -> int:
    tck = load_checkpoint(_path(args.teacher, out, "teacher.ckpt"))
    sck = load_checkpoint(_path(args.student, out, "student.ckpt"))
    vocab = _vocab_of(tck)
    _, corpus = _encoded(_path(args.data, out, "test.tsv"), vocab)
    inf = _inference_cfg(args, cfg, out / "train.tsv")
    inf.rescore = bool(args.rescore)
    report = latency_report(tck.model(), sck.model(), [s for s, _ in corpus[:args.limit]], inf)
    text = report.to_text()
    atomic_write_text(out / "latency.txt", text)
    atomic_write_text(out / "latency.json", json.dumps(report.to_dict(), indent=2) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "train-student": cmd_train_student,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
    "bench-latency": cmd_bench_latency,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.dump_config:
            sys.stdout.write(dump_config())
            return EXIT_OK
        if args.command is None:
            raise UsageError(parser.format_help())
        cfg = _config(args)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_USAGE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        return HANDLERS[args.command](args, cfg, out)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (ConfigError, CheckpointError, CorpusParseError, TrainingStepError, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
