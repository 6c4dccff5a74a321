"""Binary checkpoint format ("TDAC").

Layout, little-endian throughout::

    magic "TDAC" | version u32 | store count u32
    per store:     kind u8 | param count u32 | params
    optimizer count u32
    per optimizer: kind u8 | step u32 | param count u32 | params ("m.<name>", "v.<name>")
    counter count u32
    per counter:   name_len u32 | name utf8 | value i64

where one param is ``name_len u32 | name utf8 | ndim u32 | dims u32 x ndim | f32 payload``.
The kind byte packs the network kind (low nibble) with a role (high nibble).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import NETWORK_KINDS

MAGIC = b"TDAC"
VERSION = 1
ROLES = ("live", "ema", "snapshot")


class CheckpointError(ValueError):
    pass


def pack_kind(kind: str, role: str) -> int:
    return NETWORK_KINDS.index(kind) | (ROLES.index(role) << 4)


def unpack_kind(byte: int) -> tuple[str, str]:
    k, r = byte & 0x0F, byte >> 4
    if k >= len(NETWORK_KINDS) or r >= len(ROLES):
        raise CheckpointError(f"invalid kind byte 0x{byte:02x}")
    return NETWORK_KINDS[k], ROLES[r]


@dataclass
class Checkpoint:
    # (role, kind) -> ordered {name: array}
    stores: dict[tuple[str, str], dict[str, np.ndarray]] = field(default_factory=dict)
    # kind -> (step, ordered {"m.<name>" / "v.<name>": array})
    optimizers: dict[str, tuple[int, dict[str, np.ndarray]]] = field(default_factory=dict)
    counters: dict[str, int] = field(default_factory=dict)


def _write_params(out: list[bytes], arrays: dict[str, np.ndarray]) -> None:
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def encode(ck: Checkpoint) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(ck.stores))]
    for (role, kind), arrays in ck.stores.items():
        out.append(struct.pack("<BI", pack_kind(kind, role), len(arrays)))
        _write_params(out, arrays)
    out.append(struct.pack("<I", len(ck.optimizers)))
    for kind, (step, arrays) in ck.optimizers.items():
        out.append(struct.pack("<BII", pack_kind(kind, "live"), step, len(arrays)))
        _write_params(out, arrays)
    out.append(struct.pack("<I", len(ck.counters)))
    for name, value in ck.counters.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack("<q", value))
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def params(self, count: int) -> dict[str, np.ndarray]:
        arrays = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (ndim,) = self.unpack("<I")
            dims = self.unpack(f"<{ndim}I") if ndim else ()
            size = int(np.prod(dims)) if ndim else 1
            arrays[name] = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        return arrays


def decode(data: bytes, path: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    version, n_stores = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    ck = Checkpoint()
    try:
        for _ in range(n_stores):
            byte, count = r.unpack("<BI")
            kind, role = unpack_kind(byte)
            ck.stores[(role, kind)] = r.params(count)
        (n_opt,) = r.unpack("<I")
        for _ in range(n_opt):
            byte, step, count = r.unpack("<BII")
            kind, _ = unpack_kind(byte)
            ck.optimizers[kind] = (step, r.params(count))
        (n_ctr,) = r.unpack("<I")
        for _ in range(n_ctr):
            (n,) = r.unpack("<I")
            name = r.take(n).decode("utf-8")
            (ck.counters[name],) = r.unpack("<q")
    except CheckpointError as exc:
        if str(exc).startswith(path):
            raise
        raise CheckpointError(f"{path}: {exc}") from None
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None
    if r.pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - r.pos} trailing bytes")
    return ck


def write(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(encode(ck))
    return path


def read(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    return decode(data, str(path))
