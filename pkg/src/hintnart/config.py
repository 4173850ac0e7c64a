"""Flat ``[section]`` / ``key = value`` experiment configuration."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from typing import Any

from .data import SyntheticTaskSpec
from .inference import InferenceConfig
from .losses import HintConfig
from .nn import ConfigError, ModelConfig
from .training import TrainConfig

# length_bias may be "auto": derive C from the training corpus
AUTO = "auto"


def _teacher_defaults() -> TrainConfig:
    return TrainConfig(steps=3000, dropout=0.1, ablation="nll")


def _student_defaults() -> TrainConfig:
    return TrainConfig(steps=1500, dropout=0.1, ablation="nll+align+hid")


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher: TrainConfig = field(default_factory=_teacher_defaults)
    student: TrainConfig = field(default_factory=_student_defaults)
    hints: HintConfig = field(default_factory=HintConfig)
    data: SyntheticTaskSpec = field(default_factory=SyntheticTaskSpec)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    length_bias: str = AUTO

    def resolved_length_bias(self, corpus_default: int) -> int:
        return corpus_default if self.length_bias == AUTO else int(self.length_bias)

    def sync(self) -> None:
        """Propagate the shared hint block into both training configs."""
        self.teacher.hints = self.hints
        self.student.hints = self.hints


SECTIONS = ("model", "teacher", "student", "hints", "data", "inference")
_SKIP = {"teacher": {"hints"}, "student": {"hints"}, "inference": {"length_bias"}}


def _convert(raw: str, ftype, where: str) -> Any:
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if t == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {t}") from exc
    return raw.strip()


def _fields(obj, section: str) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(obj) if f.name not in _SKIP.get(section, set())}


def apply_overrides(cfg: ExperimentConfig, section: str, values: dict[str, str]) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    target = getattr(cfg, section)
    known = _fields(target, section)
    for key, raw in values.items():
        if section == "inference" and key == "length_bias":
            cfg.length_bias = raw.strip()
            if cfg.length_bias != AUTO:
                _convert(cfg.length_bias, "int", "inference.length_bias")
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(target, key, _convert(raw, known[key].type, f"{section}.{key}"))
    validate = getattr(target, "validate", None) or getattr(target, "__post_init__", None)
    if validate:
        validate()


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is None and text is None:
        cfg.sync()
        return cfg
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
    parser.optionxform = str
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if parser.defaults():
        raise ConfigError("keys outside a [section] are not allowed")
    for section in parser.sections():
        apply_overrides(cfg, section, dict(parser.items(section)))
    cfg.sync()
    return cfg


def dump_config(cfg: ExperimentConfig | None = None) -> str:
    cfg = cfg or ExperimentConfig()
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for name in _fields(obj, section):
            value = getattr(obj, name)
            lines.append(f"{name} = {str(value).lower() if isinstance(value, bool) else value}")
        if section == "inference":
            lines.append(f"length_bias = {cfg.length_bias}")
        lines.append("")
    return "\n".join(lines)
