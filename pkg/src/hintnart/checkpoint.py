"""Binary checkpoint files.

Layout (little-endian)::

    b"HNRT" | u32 version | u32 meta_len | meta (UTF-8 "key = value" lines)
    u32 n_entries | n_entries x (u16 name_len, name, u8 rank, rank x u32, u64 offset)
    raw parameter data, dtype named by the ``dtype`` metadata key

Offsets are relative to the start of the raw data block.
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .nn import ConfigError, ModelConfig, ParamStore

MAGIC = b"HNRT"
VERSION = 1


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    kind: str                      # "teacher" or "student"
    model_cfg: ModelConfig
    params: ParamStore
    step: int = 0
    seed: int = 0
    tau: float = 0.3
    vocab: list[str] = field(default_factory=list)
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict[str, str] = field(default_factory=dict)

    def model(self):
        from .student import Student
        from .teacher import Teacher
        if self.kind == "teacher":
            return Teacher(self.model_cfg, params=self.params)
        if self.kind == "student":
            return Student(self.model_cfg, tau=self.tau, params=self.params)
        raise CheckpointError(f"unknown model kind {self.kind!r}")


def _meta_lines(ck: Checkpoint) -> str:
    meta = {
        "kind": ck.kind,
        "step": str(ck.step),
        "seed": str(ck.seed),
        "tau": repr(float(ck.tau)),
        "dtype": ck.model_cfg.dtype,
        "vocab": " ".join(ck.vocab),
    }
    for f in fields(ModelConfig):
        meta[f"model.{f.name}"] = str(getattr(ck.model_cfg, f.name))
    for k, v in ck.extra.items():
        meta[f"extra.{k}"] = str(v)
    for k, v in meta.items():
        if "\n" in v:
            raise CheckpointError(f"metadata value for {k} contains a newline")
    return "".join(f"{k} = {meta[k]}\n" for k in sorted(meta))


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line:
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            key, value = line.rstrip(" ="), ""
        out[key] = value
    return out


def _model_cfg(meta: dict[str, str]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        raw = meta.get(f"model.{f.name}")
        if raw is None:
            raise CheckpointError(f"metadata lacks model.{f.name}")
        kwargs[f.name] = raw if f.type in ("str", str) else int(raw)
    try:
        return ModelConfig(**kwargs)
    except ConfigError as exc:
        raise CheckpointError(f"invalid model config in checkpoint: {exc}") from exc


def to_bytes(ck: Checkpoint) -> bytes:
    dtype = np.dtype(ck.model_cfg.dtype).newbyteorder("<")
    tensors: list[tuple[str, np.ndarray]] = [(k, t.data) for k, t in ck.params.items()]
    tensors += [(f"adam.m.{k}", v) for k, v in ck.adam_m.items()]
    tensors += [(f"adam.v.{k}", v) for k, v in ck.adam_v.items()]
    meta = _meta_lines(ck).encode("utf-8")
    head = io.BytesIO()
    head.write(MAGIC)
    head.write(struct.pack("<II", VERSION, len(meta)))
    head.write(meta)
    head.write(struct.pack("<I", len(tensors)))
    body = io.BytesIO()
    for name, arr in tensors:
        raw = name.encode("utf-8")
        head.write(struct.pack("<H", len(raw)))
        head.write(raw)
        head.write(struct.pack("<B", arr.ndim))
        head.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        head.write(struct.pack("<Q", body.tell()))
        body.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    return head.getvalue() + body.getvalue()


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ck)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _expected_shapes(kind: str, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    from .student import Student
    from .teacher import Teacher
    model = Teacher(cfg) if kind == "teacher" else Student(cfg)
    return {k: t.shape for k, t in model.params.items()}


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a checkpoint file (bad magic)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported")
    try:
        meta = _parse_meta(r.take(meta_len).decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise CheckpointError("metadata block is not valid UTF-8") from exc
    cfg = _model_cfg(meta)
    kind = meta.get("kind", "")
    if kind not in ("teacher", "student"):
        raise CheckpointError(f"unknown model kind {kind!r}")
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        (offset,) = r.unpack("<Q")
        table.append((name, tuple(shape), offset))
    base = r.pos
    dtype = np.dtype(meta.get("dtype", "float32")).newbyteorder("<")
    expected = _expected_shapes(kind, cfg)
    params = ParamStore(cfg.np_dtype)
    adam_m, adam_v = {}, {}
    for name, shape, offset in table:
        plain = name.split(".", 2)[2] if name.startswith("adam.") else name
        if plain not in expected:
            raise ShapeMismatchError(f"unexpected tensor {name}")
        if expected[plain] != shape:
            raise ShapeMismatchError(f"{name}: stored shape {shape}, model expects {expected[plain]}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        start = base + offset
        if start + nbytes > len(buf):
            raise TruncatedCheckpointError(f"tensor {name} runs past the end of the file")
        arr = np.frombuffer(buf, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        arr = arr.reshape(shape).astype(cfg.np_dtype)
        if name.startswith("adam.m."):
            adam_m[plain] = arr
        elif name.startswith("adam.v."):
            adam_v[plain] = arr
        else:
            params.add(name, arr)
    missing = set(expected) - set(params)
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks tensors: {sorted(missing)[:3]}")
    # keep the parameter order of a freshly built model
    ordered = ParamStore(cfg.np_dtype)
    for k in expected:
        ordered[k] = params[k]
    extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
    vocab = meta.get("vocab", "").split()
    return Checkpoint(kind, cfg, ordered, step=int(meta.get("step", 0)), seed=int(meta.get("seed", 0)),
                      tau=float(meta.get("tau", 0.3)), vocab=vocab, adam_m=adam_m, adam_v=adam_v,
                      extra=extra)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
