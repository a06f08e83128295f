"""Quantizers: per-channel smoothing, per-block APoT weights, per-token INT8 activations.

Weight path (per block of B consecutive values in flattened row-major order):
scale = max|w|, normalize into [-1, 1], split sign/magnitude, map magnitude to
the nearest codebook level (ties toward the smaller level). Activation path:
symmetric dynamic INT8, scale = absmax/127, round half away from zero, clamp
to [-127, 127] so -128 never occurs. Scales are f32 everywhere; divisions that
decide a rounding happen in f64 so the |x - q*scale| <= scale/2 bound holds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codebook import ApotCodebook


@dataclass(frozen=True)
class ActQuantConfig:
    """Activation quantizer selection: dynamic (runtime absmax) or static
    (calibrated absmax), at per-token or per-tensor granularity."""

    mode: str = "dynamic"
    granularity: str = "per_token"

    def __post_init__(self) -> None:
        if self.mode not in ("dynamic", "static"):
            raise ValueError(f"bad mode {self.mode!r}")
        if self.granularity not in ("per_token", "per_tensor"):
            raise ValueError(f"bad granularity {self.granularity!r}")


def round_half_away(r: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(r) + 0.5), r)


def quantize_token(x: np.ndarray) -> tuple[np.ndarray, np.float32]:
    """Symmetric INT8 for one token vector: returns (q int8, scale f32)."""
    x = np.asarray(x, dtype=np.float32)
    absmax = np.float32(np.max(np.abs(x))) if x.size else np.float32(0.0)
    scale = absmax / np.float32(127.0) if absmax > 0 else np.float32(1.0)
    r = x.astype(np.float64) / np.float64(scale)
    q = np.clip(round_half_away(r), -127, 127).astype(np.int8)
    return q, scale


def quantize_activations(
    x: np.ndarray,
    cfg: ActQuantConfig = ActQuantConfig(),
    static_scales: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Quantize a [tokens, channels] activation matrix.

    Returns (q int8 [L, C], per-token scales f32 [L]); per-tensor modes
    broadcast one scale across all rows. Static modes require calibrated
    scales (per token position or a scalar).
    """
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ValueError("expected [tokens, channels]")
    L = x.shape[0]
    if cfg.mode == "dynamic":
        if cfg.granularity == "per_token":
            absmax = np.max(np.abs(x), axis=1) if x.shape[1] else np.zeros(L, np.float32)
            absmax = absmax.astype(np.float32)
        else:
            absmax = np.full(L, np.float32(np.max(np.abs(x))) if x.size else 0.0, np.float32)
        scales = np.where(absmax > 0, absmax / np.float32(127.0), np.float32(1.0))
    else:
        if static_scales is None:
            raise ValueError("static activation quantization needs calibrated scales")
        s = np.asarray(static_scales, dtype=np.float32).reshape(-1)
        if cfg.granularity == "per_tensor":
            if s.size != 1:
                raise ValueError("per-tensor static scale must be a scalar")
            scales = np.full(L, s[0], np.float32)
        else:
            if s.size != L:
                raise ValueError(
                    f"static per-token scales cover {s.size} positions, got {L} tokens"
                )
            scales = s.copy()
        if np.any(scales <= 0):
            raise ValueError("static scales must be positive")
    scales = scales.astype(np.float32)
    r = x.astype(np.float64) / scales.astype(np.float64)[:, None]
    q = np.clip(round_half_away(r), -127, 127).astype(np.int8)
    return q, scales


def nearest_level_index(mag: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Index of the nearest level for each magnitude in [0, 1]; ties pick the
    smaller level. `levels` must be ascending."""
    mag = np.asarray(mag, dtype=np.float64)
    idx = np.searchsorted(levels, mag)
    lo = np.clip(idx - 1, 0, len(levels) - 1)
    hi = np.clip(idx, 0, len(levels) - 1)
    d_lo = mag - levels[lo]
    d_hi = levels[hi] - mag
    return np.where(d_lo <= d_hi, lo, hi).astype(np.int64)


def quantize_blocks(
    w: np.ndarray, block_size: int, cb: ApotCodebook
) -> tuple[np.ndarray, np.ndarray]:
    """Per-block APoT quantization of a flattened tensor.

    The flattened tail is zero-padded so block_size divides the length.
    Returns (codes uint8 [n_padded], scales f32 [n_padded / block_size]);
    code = sign_bit << magnitude_bits | level_index. All-zero blocks get
    scale 1.0 and level 0; the sign of a zero weight is positive.
    """
    if block_size < 1:
        raise ValueError("block size must be >= 1")
    flat = np.asarray(w, dtype=np.float32).reshape(-1)
    n = flat.size
    n_pad = ((n + block_size - 1) // block_size) * block_size
    padded = np.zeros(n_pad, np.float32)
    padded[:n] = flat
    blocks = padded.reshape(-1, block_size)
    scales = np.max(np.abs(blocks), axis=1).astype(np.float32)
    safe = np.where(scales > 0, scales, np.float32(1.0)).astype(np.float32)
    norm = blocks.astype(np.float64) / safe.astype(np.float64)[:, None]
    norm = np.clip(norm, -1.0, 1.0)
    sign = (norm < 0).astype(np.uint8)
    levels = np.asarray(cb.levels, dtype=np.float64)
    idx = nearest_level_index(np.abs(norm), levels)
    codes = (sign << np.uint8(cb.magnitude_bits)) | idx.astype(np.uint8)
    return codes.reshape(-1), safe


def quantize_linear_weight(
    w: np.ndarray, block_size: int, cb: ApotCodebook
) -> tuple[np.ndarray, np.ndarray]:
    """Per-block quantization of a [out, in] weight with row-aligned blocks.

    Columns are zero-padded to a block multiple first, so no block spans two
    output rows. Returns (codes uint8 [out, in_pad], scales f32 [out, in_pad/B]).
    """
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise ValueError("expected [out, in] weight")
    out_dim, in_dim = w.shape
    in_pad = ((in_dim + block_size - 1) // block_size) * block_size
    padded = np.zeros((out_dim, in_pad), np.float32)
    padded[:, :in_dim] = w
    codes, scales = quantize_blocks(padded, block_size, cb)
    return codes.reshape(out_dim, in_pad), scales.reshape(out_dim, in_pad // block_size)


@dataclass(frozen=True)
class QuantizedWeights:
    """Per-block quantized [out, in] weight: sign|magnitude codes plus block scales."""

    codes: np.ndarray  # uint8 [out, in_pad], in_pad a block multiple
    scales: np.ndarray  # f32 [out, in_pad / block_size]
    block_size: int
    codebook: ApotCodebook
    out_dim: int
    in_dim: int  # logical columns; codes beyond this are zero padding

    def __post_init__(self) -> None:
        self.codes.flags.writeable = False
        self.scales.flags.writeable = False

    @classmethod
    def from_float(
        cls, w: np.ndarray, block_size: int, cb: ApotCodebook
    ) -> "QuantizedWeights":
        w = np.asarray(w, dtype=np.float32)
        codes, scales = quantize_linear_weight(w, block_size, cb)
        return cls(codes, scales, block_size, cb, w.shape[0], w.shape[1])

    def dequantize(self) -> np.ndarray:
        """f32 weight reconstruction, logical [out, in] region only."""
        full = dequantize_weights(self.codes, self.scales, self.block_size, self.codebook)
        return full[:, : self.in_dim]


def split_code(codes: np.ndarray, cb: ApotCodebook) -> tuple[np.ndarray, np.ndarray]:
    """(magnitude index, sign bit) from packed sign|magnitude codes."""
    codes = np.asarray(codes)
    mag = codes & ((1 << cb.magnitude_bits) - 1)
    sign = codes >> cb.magnitude_bits
    return mag, sign


def dequantize_weights(
    codes: np.ndarray, scales: np.ndarray, block_size: int, cb: ApotCodebook
) -> np.ndarray:
    """f32 reconstruction sign * level * block_scale, same shape as codes."""
    codes = np.asarray(codes)
    mag, sign = split_code(codes, cb)
    lv = cb.levels_f32()[mag.reshape(-1)]
    s = np.repeat(np.asarray(scales, np.float32).reshape(-1), block_size)[: lv.size]
    out = lv * s
    out[sign.reshape(-1) == 1] *= np.float32(-1.0)
    return out.reshape(codes.shape)


def compute_smoothing(
    act_absmax: np.ndarray, w_absmax: np.ndarray, alpha: float = 0.5
) -> np.ndarray:
    """Per-channel migration scale s_j = act^alpha / w^(1-alpha); degenerate
    channels (either stat zero) get s_j = 1."""
    a = np.asarray(act_absmax, dtype=np.float64)
    w = np.asarray(w_absmax, dtype=np.float64)
    if a.shape != w.shape:
        raise ValueError("stat shape mismatch")
    if np.any(a < 0) or np.any(w < 0):
        raise ValueError("absmax stats must be nonnegative")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    ok = (a > 0) & (w > 0)
    s = np.ones_like(a)
    s[ok] = a[ok] ** alpha / w[ok] ** (1.0 - alpha)
    return s.astype(np.float32)


def fuse_smoothing(
    upstream_w: np.ndarray,
    downstream_w: np.ndarray,
    s: np.ndarray,
    upstream_bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Fold an activation divide-by-s into adjacent [out, in] weights.

    The upstream layer produces the smoothed channels (its row j and bias j
    are divided by s_j); the downstream layer consumes them (its column j is
    multiplied by s_j). The float composition of the pair is unchanged.
    """
    s64 = np.asarray(s, dtype=np.float64)
    u = np.asarray(upstream_w, dtype=np.float64)
    d = np.asarray(downstream_w, dtype=np.float64)
    if u.shape[0] != s64.size or d.shape[1] != s64.size:
        raise ValueError("scale length does not match shared channel count")
    if np.any(s64 <= 0) or not np.all(np.isfinite(s64)):
        raise ValueError("smoothing scales must be positive and finite")
    u_f = (u / s64[:, None]).astype(np.float32)
    d_f = (d * s64[None, :]).astype(np.float32)
    b_f = None
    if upstream_bias is not None:
        b_f = (np.asarray(upstream_bias, np.float64) / s64).astype(np.float32)
    return u_f, d_f, b_f


def apply_smoothing_divide(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Runtime per-channel divide for interfaces where fusion is impossible."""
    return (np.asarray(x, np.float32) / np.asarray(s, np.float32)).astype(np.float32)


def collect_static_scales(absmax: np.ndarray, per_tensor: bool) -> np.ndarray:
    """Calibrated activation scales from absmax stats (0 maps to scale 1)."""
    a = np.asarray(absmax, dtype=np.float32)
    if per_tensor:
        a = np.asarray([np.max(a) if a.size else 0.0], np.float32)
    return np.where(a > 0, a / np.float32(127.0), np.float32(1.0)).astype(np.float32)
