"""LUT-based quantized linear engine.

Per-token dataflow: activations quantize to INT8; a shift-LUT holds every
codebook multiple of each activation element pre-scaled by 2^F; PE lanes
select entries by magnitude code (sign applies a conditional inversion);
per-block i32 sums fold into f32 with the block scale; one fused multiplier
act_scale * 2^-F dequantizes. Tiles walk row-tile-major with a fixed
accumulation order (within block ascending, blocks ascending, tiles
ascending), so outputs are bit-identical across tile sizes with aligned
blocks. Bias adds after dequantization, then the LUT-based activation.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import _kernels
from .codebook import ApotCodebook, shift_add
from .counters import CounterRecord, PerfCounters
from .packing import CODES_PER_WORD, PackedWeightBlob, pad_to, unpack_weights
from .quant import ActQuantConfig, QuantizedWeights, quantize_activations, split_code

ALLOWED_TILES = (16, 32, 64)
ACTIVATIONS = ("none", "relu", "silu", "softplus")


@dataclass(frozen=True)
class TileConfig:
    tile: int = 32
    preshift: int = 8  # F: LUT entries hold x * level * 2^F as exact integers

    def __post_init__(self) -> None:
        if self.tile not in ALLOWED_TILES:
            raise ValueError(f"tile must be one of {ALLOWED_TILES}, got {self.tile}")
        if not 1 <= self.preshift <= 24:
            raise ValueError(f"preshift out of range: {self.preshift}")


def accumulator_bound(cb: ApotCodebook, block: int, preshift: int) -> int:
    """Worst-case |per-block i32 sum| = B * 127 * max_level * 2^F, exact."""
    return block * 127 * int(cb.levels_int(preshift).max())


def check_overflow_guard(cb: ApotCodebook, block: int, preshift: int) -> None:
    bound = accumulator_bound(cb, block, preshift)
    if bound >= 2**31:
        raise ValueError(
            f"i32 accumulator overflow: bound {bound} for block={block}, "
            f"preshift={preshift}; reduce one of them"
        )


def precompute_lut(x: int, cb: ApotCodebook, preshift: int) -> np.ndarray:
    """Shift-LUT for one activation element: entry m = x * level_m * 2^F.

    Entries come from the level's shift decomposition (up to two shifted
    copies of x added), which equals the integer product exactly.
    """
    if not -127 <= x <= 127:
        raise ValueError(f"activation value {x} outside INT8 symmetric range")
    if preshift < cb.max_exponent:
        raise ValueError(f"preshift {preshift} below max basis exponent")
    return np.asarray(
        [shift_add(int(x), pair, preshift) for pair in cb.shift_pairs], dtype=np.int64
    )


def pe_lane_accumulate(luts: np.ndarray, codes: np.ndarray, cb: ApotCodebook) -> int:
    """One block's integer partial sum: mux-select by magnitude, conditional
    inversion by sign, i32 accumulation."""
    mag, sign = split_code(np.asarray(codes), cb)
    total = 0
    for j in range(len(codes)):
        v = int(luts[j, mag[j]])
        total += -v if sign[j] else v
    if not -(2**31) <= total < 2**31:
        raise ValueError("overflow guard violation: block sum exceeds i32")
    return total


def scale_and_reduce(
    block_sums: np.ndarray,
    block_scales: np.ndarray,
    act_scale: float,
    preshift: int,
) -> np.float32:
    """Fold per-block sums with their scales (ascending), then apply the fused
    act_scale * 2^-F dequant multiplier. All f32 steps, fixed order."""
    acc = np.float32(0.0)
    scales = np.asarray(block_scales, np.float32)
    for bs, sc in zip(block_sums, scales):
        acc = np.float32(acc + np.float32(np.float32(bs) * sc))
    deq = np.float32(np.float32(act_scale) * np.float32(2.0**-preshift))
    return np.float32(acc * deq)


# -- activations --------------------------------------------------------------


def exact_activation(kind: str, y: np.ndarray) -> np.ndarray:
    """Float-reference nonlinearity, evaluated in f64 and rounded to f32."""
    y64 = np.asarray(y, np.float64)
    if kind == "none":
        return np.asarray(y, np.float32)
    if kind == "relu":
        out = np.maximum(y64, 0.0)
    elif kind == "silu":
        out = y64 / (1.0 + np.exp(-y64))
    elif kind == "softplus":
        out = np.logaddexp(0.0, y64)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out.astype(np.float32)


@dataclass(frozen=True)
class ActOffsetLut:
    """ReLU-plus-offset activation table: f(y) = ReLU(y) + d(|y|) with d the
    even offset of the target nonlinearity, sampled on [0, r]."""

    kind: str
    r: float
    entries: np.ndarray  # f32 [n]

    def __post_init__(self) -> None:
        self.entries.flags.writeable = False


def build_activation_lut(kind: str, entries: int = 256, r: float = 8.0) -> ActOffsetLut:
    if kind not in ("relu", "silu", "softplus"):
        raise ValueError(f"no offset table for activation {kind!r}")
    if entries < 2 or r <= 0:
        raise ValueError("need at least two entries and a positive range")
    xs = np.linspace(0.0, r, entries, dtype=np.float64)
    d = exact_activation(kind, xs).astype(np.float64) - xs  # d(x) = f(x) - ReLU(x), x >= 0
    return ActOffsetLut(kind=kind, r=float(r), entries=d.astype(np.float32))


@lru_cache(maxsize=16)
def get_activation_lut(kind: str, entries: int = 256, r: float = 8.0) -> ActOffsetLut:
    return build_activation_lut(kind, entries, r)


def apply_activation_lut(lut: ActOffsetLut, y: np.ndarray) -> np.ndarray:
    """Nearest-entry lookup, clamped at the table boundary."""
    y = np.asarray(y, np.float32)
    k = np.float32((lut.entries.size - 1) / lut.r)
    idx = np.rint(np.abs(y) * k).astype(np.int64)
    np.clip(idx, 0, lut.entries.size - 1, out=idx)
    return np.maximum(y, np.float32(0.0)) + lut.entries[idx]


# -- forward paths -------------------------------------------------------------


def linear_forward_reference(
    x: np.ndarray,
    w: np.ndarray,
    bias: np.ndarray | None = None,
    act: str = "none",
) -> np.ndarray:
    """Float path: f64-accumulated GEMM rounded once to f32, f32 bias, exact
    activation. y[t, o] = sum_i x[t, i] * w[o, i]."""
    x = np.asarray(x, np.float32)
    w = np.asarray(w, np.float32)
    y = (x.astype(np.float64) @ w.T.astype(np.float64)).astype(np.float32)
    if bias is not None:
        y = y + np.asarray(bias, np.float32)
    return exact_activation(act, y)


def _pad_tiles(qw: QuantizedWeights, tile: int) -> tuple[np.ndarray, np.ndarray]:
    op = pad_to(qw.codes.shape[0], tile)
    ip = pad_to(qw.codes.shape[1], tile)
    codes = np.zeros((op, ip), np.uint8)
    codes[: qw.codes.shape[0], : qw.codes.shape[1]] = qw.codes
    scales = np.ones((op, ip // qw.block_size), np.float32)
    scales[: qw.scales.shape[0], : qw.scales.shape[1]] = qw.scales
    return codes, scales


def linear_counters(
    layer: str, tokens: int, out_dim: int, in_dim: int, cfg: TileConfig
) -> CounterRecord:
    t = cfg.tile
    n_ot = pad_to(out_dim, t) // t
    n_it = pad_to(in_dim, t) // t
    words = pad_to(n_ot * t * n_it * t, CODES_PER_WORD) // CODES_PER_WORD
    return CounterRecord(
        layer=layer,
        engine="linear",
        tokens=tokens,
        tiles=tokens * n_ot * n_it,
        lut_builds=tokens * n_it,
        pe_selects=tokens * n_ot * n_it * t * t,
        words_streamed=tokens * words,
        macs=tokens * out_dim * in_dim,
    )


def linear_forward_quantized(
    x: np.ndarray,
    qw: QuantizedWeights,
    bias: np.ndarray | None = None,
    act: str = "none",
    cfg: TileConfig = TileConfig(),
    act_cfg: ActQuantConfig = ActQuantConfig(),
    static_scales: np.ndarray | None = None,
    act_lut: ActOffsetLut | None = None,
    counters: PerfCounters | None = None,
    layer: str = "linear",
    backend: str | None = None,
) -> np.ndarray:
    """Quantized path: INT8 activations against APoT codes via the LUT kernel."""
    if cfg.tile % qw.block_size != 0:
        raise ValueError(
            f"tile {cfg.tile} does not align with block size {qw.block_size}"
        )
    check_overflow_guard(qw.codebook, qw.block_size, cfg.preshift)
    x = np.asarray(x, np.float32)
    if x.ndim != 2 or x.shape[1] != qw.in_dim:
        raise ValueError(f"expected [tokens, {qw.in_dim}] input, got {x.shape}")
    q, act_scales = quantize_activations(x, act_cfg, static_scales)
    codes_p, scales_p = _pad_tiles(qw, cfg.tile)
    q_p = np.zeros((x.shape[0], codes_p.shape[1]), np.int8)
    q_p[:, : qw.in_dim] = q
    deq = act_scales.astype(np.float32) * np.float32(2.0**-cfg.preshift)
    pre = _kernels.lut_gemm(
        q_p,
        deq,
        codes_p,
        scales_p,
        qw.codebook.levels_int(cfg.preshift),
        qw.codebook.magnitude_bits,
        qw.block_size,
        cfg.tile,
        backend=backend,
    )
    y = pre[:, : qw.out_dim]
    if bias is not None:
        y = y + np.asarray(bias, np.float32)
    if act != "none":
        lut = act_lut if act_lut is not None else get_activation_lut(act)
        if lut.kind != act:
            raise ValueError(f"activation LUT is {lut.kind!r}, layer wants {act!r}")
        y = apply_activation_lut(lut, y)
    elif act_lut is not None:
        raise ValueError("activation LUT supplied for a linear layer without one")
    if counters is not None:
        counters.add(linear_counters(layer, x.shape[0], qw.out_dim, qw.in_dim, cfg))
    return np.ascontiguousarray(y, np.float32)


def codes_from_blob(blob: PackedWeightBlob, qw: QuantizedWeights, cfg: TileConfig) -> np.ndarray:
    """Decode a packed stream for this layer, checking the layout descriptor."""
    if blob.tile != cfg.tile:
        raise ValueError(
            f"layout mismatch: blob packed for tile {blob.tile}, engine uses {cfg.tile}"
        )
    if (blob.out_dim, blob.in_dim) != qw.codes.shape:
        raise ValueError(
            f"layout mismatch: blob is {blob.out_dim}x{blob.in_dim}, "
            f"codes are {qw.codes.shape[0]}x{qw.codes.shape[1]}"
        )
    return unpack_weights(blob)


# -- control stream ------------------------------------------------------------


@dataclass(frozen=True)
class PeControlPacket:
    """Per-tile sideband bundle: mux selects and sign flags for the T x T codes
    (input index major), accumulate-enable, and the end-of-row flush."""

    out_tile: int
    in_tile: int
    mux: np.ndarray  # uint8 [T, T], [i, o]
    sign: np.ndarray  # uint8 [T, T], [i, o]
    accumulate: bool  # False on the first in-tile of an output row (reset)
    flush: bool  # True exactly once, on the last in-tile


def iter_control_packets(
    codes_padded: np.ndarray, tile: int, cb: ApotCodebook
) -> Iterator[PeControlPacket]:
    op, ip = codes_padded.shape
    if op % tile or ip % tile:
        raise ValueError("codes must be padded to tile multiples")
    mag, sign = split_code(codes_padded, cb)
    n_it = ip // tile
    for ot in range(op // tile):
        for it in range(n_it):
            rows = slice(ot * tile, (ot + 1) * tile)
            cols = slice(it * tile, (it + 1) * tile)
            yield PeControlPacket(
                out_tile=ot,
                in_tile=it,
                mux=np.ascontiguousarray(mag[rows, cols].T, np.uint8),
                sign=np.ascontiguousarray(sign[rows, cols].T, np.uint8),
                accumulate=it > 0,
                flush=it == n_it - 1,
            )


def linear_forward_micro(
    x: np.ndarray,
    qw: QuantizedWeights,
    bias: np.ndarray | None = None,
    act: str = "none",
    cfg: TileConfig = TileConfig(),
    act_cfg: ActQuantConfig = ActQuantConfig(),
    static_scales: np.ndarray | None = None,
) -> np.ndarray:
    """Micro-op composition of the quantized path (slow, small shapes only):
    per-element shift-LUTs, per-block lane accumulation, ordered scale/reduce.
    Must match linear_forward_quantized bit-for-bit."""
    check_overflow_guard(qw.codebook, qw.block_size, cfg.preshift)
    x = np.asarray(x, np.float32)
    q, act_scales = quantize_activations(x, act_cfg, static_scales)
    codes_p, scales_p = _pad_tiles(qw, cfg.tile)
    ip = codes_p.shape[1]
    B = qw.block_size
    out = np.zeros((x.shape[0], qw.out_dim), np.float32)
    for t in range(x.shape[0]):
        qrow = np.zeros(ip, np.int64)
        qrow[: qw.in_dim] = q[t]
        luts = np.stack(
            [precompute_lut(int(v), qw.codebook, cfg.preshift) for v in qrow]
        )
        for o in range(qw.out_dim):
            sums = [
                pe_lane_accumulate(
                    luts[b * B : (b + 1) * B], codes_p[o, b * B : (b + 1) * B], qw.codebook
                )
                for b in range(ip // B)
            ]
            out[t, o] = scale_and_reduce(
                sums, scales_p[o], act_scales[t], cfg.preshift
            )
    if bias is not None:
        out = out + np.asarray(bias, np.float32)
    if act != "none":
        out = apply_activation_lut(get_activation_lut(act), out)
    return out
