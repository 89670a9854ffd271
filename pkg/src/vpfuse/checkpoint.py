"""Binary checkpoint format.

Layout (all integers little-endian):

    magic   4 bytes  "OCTO"
    u32     version (currently 1)
    u64     config blob length, then that many bytes of UTF-8 config text
    u64     tensor count
    per tensor, sorted by name:
        u32     name length, then name bytes (UTF-8)
        u8      dtype code (0 = float64 little-endian)
        u32     rank
        u64[rank] dims
        raw row-major float64 values

The config blob is the canonical config serialization plus a trailing
`# stage: <name>` comment recording which training stage produced the file.
Round-trips are bitwise: save -> load -> save yields identical bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .config import Config, parse_config
from .model import FusionModel

MAGIC = b"OCTO"
VERSION = 1
DTYPE_F64 = 0
_STAGE_PREFIX = "# stage: "


class CheckpointError(ValueError):
    """Bad magic, version, truncation, or mismatch against the config."""


def _config_blob(cfg: Config, stage: Optional[str]) -> str:
    text = cfg.serialize()
    if stage is not None:
        text += f"{_STAGE_PREFIX}{stage}\n"
    return text


def save_checkpoint(model: FusionModel, path, stage: Optional[str] = None,
                    config_blob: Optional[str] = None) -> None:
    """Write the model's parameters and config; bitwise deterministic.

    With no explicit stage, a model that came from ``load_checkpoint`` is
    written back with its original config blob, so save -> load -> save is
    byte-identical.
    """
    if config_blob is None and stage is None:
        config_blob = resave_blob(model)
    if config_blob is None:
        config_blob = _config_blob(model.cfg, stage)
    blob = config_blob.encode("utf-8")
    params = model.named_parameters()
    names = sorted(params)
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", VERSION)
    out += struct.pack("<Q", len(blob))
    out += blob
    out += struct.pack("<Q", len(names))
    for name in names:
        t = params[name]
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<B", DTYPE_F64)
        out += struct.pack("<I", t.data.ndim)
        out += struct.pack(f"<{t.data.ndim}Q", *t.data.shape)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at "
                                  f"offset {self.pos}, file has {len(self.raw)}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def load_checkpoint(path) -> tuple[FusionModel, Config, Optional[str]]:
    """Rebuild the model from a checkpoint; every parameter comes from disk."""
    reader = _Reader(Path(path).read_bytes())
    if reader.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version = reader.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blob_len = reader.unpack("<Q")
    blob = reader.take(blob_len).decode("utf-8")
    stage = None
    for line in blob.splitlines():
        if line.startswith(_STAGE_PREFIX):
            stage = line[len(_STAGE_PREFIX):].strip()
    cfg = parse_config(blob)

    model = FusionModel(cfg, seed=cfg["train.seed"])
    params = model.named_parameters()
    expected = set(params)

    count = reader.unpack("<Q")
    seen = set()
    for _ in range(count):
        name_len = reader.unpack("<I")
        name = reader.take(name_len).decode("utf-8")
        dtype = reader.unpack("<B")
        if dtype != DTYPE_F64:
            raise CheckpointError(f"unknown dtype code {dtype} for tensor {name!r}")
        rank = reader.unpack("<I")
        dims: tuple[int, ...] = ()
        if rank:
            dims = tuple(int(d) for d in struct.unpack(f"<{rank}Q", reader.take(8 * rank)))
        if name not in expected:
            raise CheckpointError(f"tensor {name!r} not part of the configured model")
        target = params[name]
        if dims != target.data.shape:
            raise CheckpointError(f"tensor {name!r} has shape {dims}, config "
                                  f"expects {target.data.shape}")
        n_values = int(np.prod(dims)) if rank else 1
        raw = reader.take(8 * n_values)
        target.data = np.frombuffer(raw, dtype="<f8").reshape(target.data.shape).copy()
        seen.add(name)
    if reader.pos != len(reader.raw):
        raise CheckpointError(f"{len(reader.raw) - reader.pos} trailing bytes "
                              "after the tensor table")
    missing = expected - seen
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")

    model._checkpoint_blob = blob  # saved back verbatim for byte-exact round trips
    return model, cfg, stage


def resave_blob(model: FusionModel) -> Optional[str]:
    return getattr(model, "_checkpoint_blob", None)
