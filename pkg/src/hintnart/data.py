"""Vocabulary, synthetic translation tasks, and parallel-corpus files."""

from __future__ import annotations

import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .nn import BOS, EOS, PAD, UNK, ConfigError

RESERVED = ("<pad>", "<s>", "</s>", "<unk>")
FUNCTION_TOKEN = "fn"

Pair = tuple[list[str], list[str]]


class CorpusParseError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class Vocabulary:
    """Token <-> id table shared by source and target.

    Ids 0-3 are pad, bos, eos, unk; the rest are ordered by descending
    frequency, then token.
    """

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("vocabulary tokens must be unique")

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]]) -> "Vocabulary":
        counts = Counter(tok for sent in sentences for tok in sent)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Pair]) -> "Vocabulary":
        return cls.build(side for pair in pairs for side in pair)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def tokens(self) -> list[str]:
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]


# ---------------------------------------------------------------- synthetic task


@dataclass
class SyntheticTaskSpec:
    vocab_size: int = 32
    min_len: int = 3
    max_len: int = 12
    mapping_seed: int = 7
    # adjacent blocks of this size are reversed; 1 leaves order unchanged
    window: int = 2
    # "append": insert the function token after every `length_every` outputs;
    # "drop": delete every `length_every`-th output; "none": keep length
    length_rule: str = "append"
    length_every: int = 4
    identity_map: bool = False
    train_size: int = 3000
    valid_size: int = 200
    test_size: int = 200
    seed: int = 1

    def validate(self, model_max_len: int | None = None) -> None:
        if self.vocab_size < 8:
            raise ConfigError("synthetic vocab_size must be >= 8")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError("need 1 <= min_len <= max_len")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.length_rule not in ("append", "drop", "none"):
            raise ConfigError("length_rule must be append, drop or none")
        if self.length_rule != "none" and self.length_every < 1:
            raise ConfigError("length_every must be >= 1")
        if model_max_len is not None and self.max_target_len() > model_max_len:
            raise ConfigError(f"synthetic lengths up to {self.max_target_len()} exceed model max_len {model_max_len}")

    def max_target_len(self) -> int:
        if self.length_rule == "append":
            return self.max_len + self.max_len // self.length_every
        return self.max_len

    def to_dict(self) -> dict:
        return asdict(self)


def word_tokens(spec: SyntheticTaskSpec) -> list[str]:
    n = spec.vocab_size - (1 if spec.length_rule == "append" else 0)
    return [f"w{i:02d}" for i in range(n)]


def task_mapping(spec: SyntheticTaskSpec) -> dict[str, str]:
    words = word_tokens(spec)
    if spec.identity_map:
        return {w: w for w in words}
    perm = np.random.Generator(np.random.Philox(spec.mapping_seed)).permutation(len(words))
    return {w: words[j] for w, j in zip(words, perm)}


def reorder(tokens: Sequence[str], window: int) -> list[str]:
    out: list[str] = []
    for i in range(0, len(tokens), window):
        out.extend(reversed(tokens[i:i + window]))
    return out


def apply_length_rule(tokens: Sequence[str], rule: str, every: int) -> list[str]:
    if rule == "none":
        return list(tokens)
    out: list[str] = []
    for i, tok in enumerate(tokens, start=1):
        if rule == "drop" and i % every == 0:
            continue
        out.append(tok)
        if rule == "append" and i % every == 0:
            out.append(FUNCTION_TOKEN)
    return out or [tokens[0]]


def translate_synthetic(source: Sequence[str], spec: SyntheticTaskSpec,
                        mapping: dict[str, str] | None = None) -> list[str]:
    mapping = mapping or task_mapping(spec)
    return apply_length_rule(reorder([mapping[t] for t in source], spec.window),
                             spec.length_rule, spec.length_every)


def generate_synthetic(spec: SyntheticTaskSpec, model_max_len: int | None = None
                       ) -> tuple[list[Pair], list[Pair], list[Pair]]:
    """Deterministic (train, valid, test) splits with pairwise-disjoint sources."""
    spec.validate(model_max_len)
    words = word_tokens(spec)
    mapping = task_mapping(spec)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    wanted = spec.train_size + spec.valid_size + spec.test_size
    seen: set[tuple[str, ...]] = set()
    sources: list[list[str]] = []
    attempts = 0
    while len(sources) < wanted:
        attempts += 1
        if attempts > 50 * wanted + 1000:
            raise ConfigError("cannot draw enough distinct sentences for this spec")
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        sent = tuple(words[k] for k in rng.integers(0, len(words), size=n))
        if sent in seen:
            continue
        seen.add(sent)
        sources.append(list(sent))
    pairs = [(s, translate_synthetic(s, spec, mapping)) for s in sources]
    a, b = spec.train_size, spec.train_size + spec.valid_size
    return pairs[:a], pairs[a:b], pairs[b:]


# ---------------------------------------------------------------- corpus files


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_corpus(pairs: Iterable[Pair]) -> str:
    return "".join(f"{' '.join(s)}\t{' '.join(t)}\n" for s, t in pairs)


def save_corpus(path, pairs: Iterable[Pair]) -> None:
    atomic_write_text(path, format_corpus(pairs))


def load_corpus(path) -> tuple[list[Pair], int]:
    """Read ``source<TAB>target`` lines; returns (pairs, skipped-empty count)."""
    pairs: list[Pair] = []
    skipped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if "\t" not in line:
                raise CorpusParseError(path, lineno, "expected source<TAB>target")
            src, tgt = line.split("\t", 1)
            src_toks = [t for t in src.split(" ") if t]
            tgt_toks = [t for t in tgt.split(" ") if t]
            if not src_toks or not tgt_toks:
                skipped += 1
                continue
            pairs.append((src_toks, tgt_toks))
    return pairs, skipped


def save_vocab(path, vocab: Vocabulary) -> None:
    atomic_write_text(path, "".join(t + "\n" for t in vocab.tokens()))


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return Vocabulary([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def mean_length_difference(pairs: Sequence[Pair]) -> int:
    """round(mean(|y| - |x|)), the default length bias."""
    if not pairs:
        return 0
    return int(round(float(np.mean([len(t) - len(s) for s, t in pairs]))))
