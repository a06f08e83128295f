"""Flat tensor container: magic "VIMQ", version, entry table, little-endian payload.

One file holds named tensors of dtype f32, i8, i32 or u4 (4-bit codes, packed
two per byte on disk, low nibble first). Layout:

    magic "VIMQ" | version u16 | entry_count u32
    per entry: name_len u16 | name utf-8 | dtype u8 | ndim u8 | dims u32[ndim]
               | offset u64 | nbytes u64
    payload (offsets are relative to payload start)

All header integers are little-endian. Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"VIMQ"
VERSION = 1

DTYPES = ("f32", "i8", "i32", "u4")
_DTYPE_CODE = {name: i for i, name in enumerate(DTYPES)}
_NP_DTYPE = {"f32": "<f4", "i8": "i1", "i32": "<i4", "u4": "u1"}


@dataclass(frozen=True)
class Tensor:
    """Dense row-major array with one of the container dtypes.

    u4 tensors are held unpacked in memory (one uint8 code per element,
    values 0..15); packing to nibbles happens only on serialization.
    """

    dtype: str
    data: np.ndarray

    def __post_init__(self) -> None:
        if self.dtype not in _DTYPE_CODE:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        arr = np.ascontiguousarray(self.data, dtype=_NP_DTYPE[self.dtype])
        if self.dtype == "i8" and arr.size and int(arr.min()) < -127:
            # symmetric range; -128 is never produced by the quantizer
            raise ValueError("i8 tensor outside [-127, 127]")
        if self.dtype == "u4" and arr.size and int(arr.max()) > 15:
            raise ValueError("u4 code outside [0, 15]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def _pack_nibbles(codes: np.ndarray) -> bytes:
    flat = codes.reshape(-1).astype(np.uint8)
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, np.uint8)])
    return (flat[0::2] | (flat[1::2] << 4)).tobytes()


def _unpack_nibbles(raw: bytes, count: int) -> np.ndarray:
    packed = np.frombuffer(raw, dtype=np.uint8)
    out = np.empty(packed.size * 2, np.uint8)
    out[0::2] = packed & 0x0F
    out[1::2] = packed >> 4
    return out[:count]


def _payload_nbytes(dtype: str, count: int) -> int:
    if dtype == "u4":
        return (count + 1) // 2
    return count * np.dtype(_NP_DTYPE[dtype]).itemsize


def write_container(path: str, tensors: dict[str, Tensor]) -> None:
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ValueError("duplicate entry names")
    header = bytearray()
    header += MAGIC
    header += struct.pack("<HI", VERSION, len(names))
    payload = bytearray()
    for name, t in tensors.items():
        if not isinstance(t, Tensor):
            raise TypeError(f"entry {name!r} is not a Tensor")
        raw = _pack_nibbles(t.data) if t.dtype == "u4" else t.data.tobytes()
        nb = name.encode("utf-8")
        header += struct.pack("<H", len(nb)) + nb
        header += struct.pack("<BB", _DTYPE_CODE[t.dtype], t.data.ndim)
        header += struct.pack(f"<{t.data.ndim}I", *t.data.shape)
        header += struct.pack("<QQ", len(payload), len(raw))
        payload += raw
    with open(path, "wb") as fh:
        fh.write(bytes(header) + bytes(payload))


def read_container(path: str) -> dict[str, Tensor]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    pos = 10
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        dcode, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        entries.append((name, DTYPES[dcode], shape, offset, nbytes))
    out: dict[str, Tensor] = {}
    for name, dtype, shape, offset, nbytes in entries:
        if name in out:
            raise ValueError(f"{path}: duplicate entry {name!r}")
        count_elems = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if nbytes != _payload_nbytes(dtype, count_elems):
            raise ValueError(f"{path}: entry {name!r} size mismatch")
        start = pos + offset
        raw = blob[start : start + nbytes]
        if len(raw) != nbytes:
            raise ValueError(f"{path}: entry {name!r} truncated")
        if dtype == "u4":
            arr = _unpack_nibbles(raw, count_elems).reshape(shape)
        else:
            arr = np.frombuffer(raw, dtype=_NP_DTYPE[dtype]).reshape(shape)
        out[name] = Tensor(dtype, arr)
    return out
