"""Binary checkpoint archive.

Layout (little-endian)::

    magic      4 bytes  b"LDRC"
    version    u32
    phase      u8       0 constraint, 1 derain, 2 joint
    step       u64
    blob_len   u32, then blob_len bytes of key=value text (model config
               plus ``meta.*`` entries such as the optimizer time step)
    n_params   u32, then n_params tensor records
    n_moments  u32, then n_moments tensor records

A tensor record is: name length u32, UTF-8 name, rank u8, rank x u64 dims,
raw float32 data.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from .arch import LDRCNet, ModelConfig, parse_key_values

MAGIC = b"LDRC"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


class Phase(enum.IntEnum):
    CONSTRAINT = 0
    DERAIN = 1
    JOINT = 2

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray]
    step: int
    phase: Phase
    config: ModelConfig
    meta: Dict[str, str] = field(default_factory=dict)

    def frozen_prefixes(self):
        """Parameter-name prefixes that must not be trained further."""
        return ("encoder.",) if self.phase == Phase.DERAIN else ()

    def build_model(self) -> LDRCNet:
        """Rebuild the network and restore weights and the freeze mask."""
        model = LDRCNet(self.config)
        model.load_state_dict(self.params)
        for name, p in model.named_parameters():
            p.requires_grad = not name.startswith(self.frozen_prefixes())
        return model


def _blob(ck: Checkpoint) -> bytes:
    text = ck.config.to_text()
    text += "".join(f"meta.{k}={v}\n" for k, v in sorted(ck.meta.items()))
    return text.encode("utf-8")


def _write_records(out: list, records: Dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(records)))
    for name, arr in records.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw_name)))
        out.append(raw_name)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())


def to_bytes(ck: Checkpoint) -> bytes:
    blob = _blob(ck)
    out = [MAGIC, struct.pack("<IBQI", VERSION, int(ck.phase), ck.step, len(blob)), blob]
    _write_records(out, ck.params)
    _write_records(out, ck.moments)
    return b"".join(out)


def save_checkpoint(path, ck: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ck))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated checkpoint at byte {self.pos} (need {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> Dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (name_len,) = self.unpack("<I")
            name = self.take(name_len).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}Q") if rank else ()
            numel = int(np.prod(dims)) if dims else 1
            out[name] = np.frombuffer(self.take(4 * numel), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic; not an LDRC checkpoint")
    version, phase, step, blob_len = r.unpack("<IBQI")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    try:
        phase = Phase(phase)
    except ValueError:
        raise CheckpointFormatError(f"unknown phase tag {phase}") from None
    kv = parse_key_values(r.take(blob_len).decode("utf-8"))
    meta = {k[5:]: v for k, v in kv.items() if k.startswith("meta.")}
    config = ModelConfig.from_mapping({k: v for k, v in kv.items() if not k.startswith("meta.")})
    params = r.records()
    moments = r.records()
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(params, moments, step, phase, config, meta)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
