"""Binary checkpoints for model parameters and optimizer state.

Layout (all integers little-endian):

    magic        8 bytes  b"ANAVCKP1"
    version      u32      format version, currently 1
    meta         u32 length + UTF-8 JSON (sorted keys; holds config_digest)
    frozen       u32 count + names        (each name: u16 length + UTF-8)
    adaptable    u32 count + names
    params       u32 count + index entries (name, u8 ndim, u32 dims...)
    payload      raw float64 data, one block per param in index order
    opt flag     u8       0 = absent, 1 = AdamW state follows
    opt state    u64 step, f64 lr, u32 count, then per-name shape + m + v

Values are stored as raw little-endian float64, so a save/load round trip is
bit-exact.  Loading checks magic, version, and payload sizes; a config digest
mismatch only warns, since loading an older model into a grown architecture
is a supported path.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .optim import ParameterPartition

MAGIC = b"ANAVCKP1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_name(buf, name: str):
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError(f"parameter name too long: {name[:32]}...")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _write_shape(buf, shape):
    buf.write(struct.pack("<B", len(shape)))
    for d in shape:
        buf.write(struct.pack("<I", d))


def _write_array(buf, arr: np.ndarray):
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def name(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def shape(self) -> tuple:
        return tuple(self.u32() for _ in range(self.u8()))

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        raw = self.take(count * 8)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


@dataclass
class LoadedCheckpoint:
    params: dict
    partition: ParameterPartition
    meta: dict
    opt_state: dict | None

    @property
    def config_digest(self) -> str:
        return self.meta.get("config_digest", "")


def save_checkpoint(
    path,
    params: dict,
    partition: ParameterPartition,
    meta: dict | None = None,
    opt_state: dict | None = None,
):
    """Serialize parameters (Tensors or arrays) plus optional AdamW state."""
    partition.validate_covers(params.keys())
    meta = dict(meta or {})
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))

    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta_raw)))
    buf.write(meta_raw)

    for group in (partition.frozen, partition.adaptable):
        names = sorted(group)
        buf.write(struct.pack("<I", len(names)))
        for n in names:
            _write_name(buf, n)

    names = sorted(params.keys())
    arrays = {}
    buf.write(struct.pack("<I", len(names)))
    for n in names:
        p = params[n]
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
        arrays[n] = arr
        _write_name(buf, n)
        _write_shape(buf, arr.shape)
    for n in names:
        _write_array(buf, arrays[n])

    if opt_state is None:
        buf.write(struct.pack("<B", 0))
    else:
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", int(opt_state["step"])))
        buf.write(struct.pack("<d", float(opt_state["lr"])))
        opt_names = sorted(opt_state["m"].keys())
        if set(opt_names) != set(opt_state["v"].keys()):
            raise CheckpointError("optimizer moment name sets disagree")
        buf.write(struct.pack("<I", len(opt_names)))
        for n in opt_names:
            m = np.asarray(opt_state["m"][n], dtype=np.float64)
            v = np.asarray(opt_state["v"][n], dtype=np.float64)
            if m.shape != v.shape:
                raise CheckpointError(f"moment shape mismatch for '{n}'")
            _write_name(buf, n)
            _write_shape(buf, m.shape)
            _write_array(buf, m)
            _write_array(buf, v)

    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expect_digest: str | None = None) -> LoadedCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    frozen = frozenset(r.name() for _ in range(r.u32()))
    adaptable = frozenset(r.name() for _ in range(r.u32()))
    partition = ParameterPartition(frozen=frozen, adaptable=adaptable)

    index = [(r.name(), r.shape()) for _ in range(r.u32())]
    params = {n: r.array(shape) for n, shape in index}

    opt_state = None
    if r.u8() == 1:
        step = r.u64()
        lr = r.f64()
        m, v = {}, {}
        for _ in range(r.u32()):
            n = r.name()
            shape = r.shape()
            m[n] = r.array(shape)
            v[n] = r.array(shape)
        opt_state = {"step": step, "lr": lr, "m": m, "v": v}

    if expect_digest is not None and meta.get("config_digest") not in (None, "", expect_digest):
        warnings.warn(
            f"checkpoint config digest {meta.get('config_digest')!r} does not match "
            f"expected {expect_digest!r}; loading anyway",
            stacklevel=2,
        )
    return LoadedCheckpoint(params=params, partition=partition, meta=meta, opt_state=opt_state)
