"""Packed weight stream: 4-bit codes in 256-bit words, ordered by the tile walk.

Traversal is row-tile-major, then column-tile-major, then within-tile input
index (outer) and output index (inner), so a linear engine walking tiles can
consume words strictly sequentially. Dimensions are zero-padded to tile
multiples; padding uses the code for level 0 with positive sign (0). Within a
byte the low nibble comes first; the final partial word is zero-padded.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

WORD_BITS = 256
WORD_BYTES = WORD_BITS // 8
CODES_PER_WORD = WORD_BITS // 4


def pad_to(n: int, multiple: int) -> int:
    return ((n + multiple - 1) // multiple) * multiple


@dataclass(frozen=True)
class PackedWeightBlob:
    words: np.ndarray  # uint8, n_words * 32 bytes
    tile: int
    out_dim: int  # logical (pre-padding) dims
    in_dim: int

    @property
    def n_words(self) -> int:
        return self.words.size // WORD_BYTES

    def layout_descriptor(self) -> np.ndarray:
        # (tile, out, in, traversal order id); order 0 is the only defined walk
        return np.asarray([self.tile, self.out_dim, self.in_dim, 0], dtype=np.int32)


def tile_walk(out_dim: int, in_dim: int, tile: int) -> Iterator[tuple[int, int]]:
    """Yield (row, col) weight coordinates in stream order, padding included."""
    if tile < 1:
        raise ValueError("tile must be >= 1")
    for ot in range(pad_to(out_dim, tile) // tile):
        for it in range(pad_to(in_dim, tile) // tile):
            for i in range(tile):
                for o in range(tile):
                    yield ot * tile + o, it * tile + i


def _stream_order(codes_padded: np.ndarray, tile: int) -> np.ndarray:
    op, ip = codes_padded.shape
    grid = codes_padded.reshape(op // tile, tile, ip // tile, tile)
    return grid.transpose(0, 2, 3, 1).reshape(-1)  # (ot, it, i, o)


def pack_weights(codes: np.ndarray, tile: int) -> PackedWeightBlob:
    """Pack a [out, in] matrix of 4-bit codes into sequential 256-bit words."""
    if tile < 1:
        raise ValueError("tile must be >= 1")
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError("expected [out, in] code matrix")
    if codes.size and int(codes.max()) > 15:
        raise ValueError("codes exceed 4 bits; this format packs 64 codes per word")
    out_dim, in_dim = codes.shape
    op, ip = pad_to(out_dim, tile), pad_to(in_dim, tile)
    padded = np.zeros((op, ip), np.uint8)
    padded[:out_dim, :in_dim] = codes
    stream = _stream_order(padded, tile)
    n = pad_to(stream.size, CODES_PER_WORD)
    full = np.zeros(n, np.uint8)
    full[: stream.size] = stream
    words = (full[0::2] | (full[1::2] << 4)).astype(np.uint8)
    return PackedWeightBlob(words=words, tile=tile, out_dim=out_dim, in_dim=in_dim)


def unpack_weights(blob: PackedWeightBlob) -> np.ndarray:
    """Recover the [out, in] code matrix (padding stripped)."""
    raw = np.asarray(blob.words, dtype=np.uint8)
    nibbles = np.empty(raw.size * 2, np.uint8)
    nibbles[0::2] = raw & 0x0F
    nibbles[1::2] = raw >> 4
    t = blob.tile
    op, ip = pad_to(blob.out_dim, t), pad_to(blob.in_dim, t)
    stream = nibbles[: op * ip]
    grid = stream.reshape(op // t, ip // t, t, t)  # (ot, it, i, o)
    padded = grid.transpose(0, 3, 1, 2).reshape(op, ip)
    return padded[: blob.out_dim, : blob.in_dim].copy()
