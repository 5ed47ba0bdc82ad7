"""AdamW with decoupled weight decay, the step-decay schedule and
checkpoint files.

Checkpoint layout (little-endian)::

    "CKPT" | u8 version | u64 step | u32 tables
    per table:  u16 len | name | u32 entries
      per entry: u16 len | name | u8 ndim | ndim x u32 shape | VOL5 record

Tables are "params", "adam.m" and "adam.v".  Each array is stored as a
VOL5 record of its shape left-padded with ones to rank 5, so values
round-trip bit-exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .volume import ParamStore, vol5_bytes, vol5_from_bytes

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


@dataclass
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        check_lr(self.lr)
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError(f"betas must lie in [0, 1): {self.beta1}, {self.beta2}")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive and weight_decay non-negative")

    def step(self, params: ParamStore, lr: float | None = None, names=None) -> None:
        """One update of every parameter (or of ``names``) from its gradient buffer."""
        lr = self.lr if lr is None else lr
        check_lr(lr)
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name in (params.names() if names is None else names):
            x, g = params[name], params.grad(name)
            m = self.m.setdefault(name, np.zeros_like(x))
            v = self.v.setdefault(name, np.zeros_like(x))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                x -= lr * self.weight_decay * x
            x -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def check_lr(lr: float) -> None:
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")


def step_decay_lr(base_lr: float, epoch: int, factor: float = 0.9, interval: int = 10) -> float:
    """lr for a 0-based ``epoch``: base * factor ** (epoch // interval)."""
    check_lr(base_lr)
    if interval < 1:
        raise ConfigError(f"decay interval must be >= 1, got {interval}")
    return base_lr * factor ** (epoch // interval)


# -------------------------------------------------------------- checkpoint


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_table(name: str, arrays: dict[str, np.ndarray]) -> bytes:
    parts = [_pack_name(name), struct.pack("<I", len(arrays))]
    for key in arrays:
        a = np.asarray(arrays[key], dtype=np.float64)
        if a.ndim > 5:
            raise FormatError(f"{key}: rank {a.ndim} does not fit a VOL5 record")
        parts += [_pack_name(key), struct.pack("<B", a.ndim), struct.pack(f"<{a.ndim}I", *a.shape),
                  vol5_bytes(a.reshape((1,) * (5 - a.ndim) + a.shape))]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = memoryview(buf), 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def name(self) -> str:
        (n,) = self.take("<H")
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        raw = self.buf[self.pos:self.pos + n]
        self.pos += n
        return bytes(raw).decode("utf-8")

    def table(self) -> tuple[str, dict[str, np.ndarray]]:
        title = self.name()
        (count,) = self.take("<I")
        out = {}
        for _ in range(count):
            key = self.name()
            (ndim,) = self.take("<B")
            shape = self.take(f"<{ndim}I")
            vol, used = vol5_from_bytes(self.buf[self.pos:], exact=False)
            self.pos += used
            if vol.size != int(np.prod(shape)):
                raise FormatError(f"{key}: stored shape {shape} disagrees with its VOL5 record")
            out[key] = vol.reshape(shape)
        return title, out


def checkpoint_bytes(params: ParamStore, opt: AdamW | None = None) -> bytes:
    opt = opt or AdamW()
    tables = [("params", {k: params[k] for k in params}), ("adam.m", opt.m), ("adam.v", opt.v)]
    head = CKPT_MAGIC + struct.pack("<BQI", CKPT_VERSION, opt.step_count, len(tables))
    return head + b"".join(_pack_table(n, t) for n, t in tables)


def checkpoint_from_bytes(buf: bytes, opt: AdamW | None = None) -> tuple[ParamStore, AdamW]:
    """Rebuild the parameters; optimizer moments go into ``opt`` (or a fresh AdamW)."""
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
    r = _Reader(buf)
    r.pos = 4
    version, step, ntables = r.take("<BQI")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    tables = dict(r.table() for _ in range(ntables))
    if r.pos != len(buf):
        raise FormatError("trailing bytes after checkpoint tables")
    if "params" not in tables:
        raise FormatError("checkpoint has no parameter table")
    params = ParamStore()
    for k, v in tables["params"].items():
        params.add(k, v)
    opt = opt or AdamW()
    opt.step_count = int(step)
    opt.m = {k: v.copy() for k, v in tables.get("adam.m", {}).items()}
    opt.v = {k: v.copy() for k, v in tables.get("adam.v", {}).items()}
    return params, opt


def save_checkpoint(path, params: ParamStore, opt: AdamW | None = None) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(params, opt))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e.strerror}") from e


def load_checkpoint(path, opt: AdamW | None = None) -> tuple[ParamStore, AdamW]:
    return checkpoint_from_bytes(Path(path).read_bytes(), opt)
