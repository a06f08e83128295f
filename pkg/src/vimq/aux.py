"""Auxiliary engines: patch embedding, CLS handling, flips, causal depthwise
convolution (windowing + filtering stages), normalization, residual add.

The causal conv is left-padded with K-1 zeros so w[K-1] always meets the
current token; its quantized path uses per-channel APoT codes (one block = the
K taps of a channel) and per-token INT8 activations, with tap products kept as
exact integers and folded in ascending tap order.
"""

from __future__ import annotations

import numpy as np

from .counters import CounterRecord, PerfCounters
from .linear import (
    ActOffsetLut,
    apply_activation_lut,
    exact_activation,
    get_activation_lut,
    linear_forward_reference,
)
from .quant import ActQuantConfig, QuantizedWeights, quantize_activations, split_code


# -- tokens --------------------------------------------------------------------


def flip_tokens(x: np.ndarray) -> np.ndarray:
    """Reverse the token axis (axis 0)."""
    return np.ascontiguousarray(x[::-1])


def cls_index(n_tokens: int, position: str | int = "middle") -> int:
    """Insertion index for the CLS token into a sequence of n_tokens patches."""
    if position == "middle":
        return n_tokens // 2
    idx = int(position)
    if not 0 <= idx <= n_tokens:
        raise ValueError(f"CLS position {idx} outside [0, {n_tokens}]")
    return idx


def insert_cls(tokens: np.ndarray, cls: np.ndarray, position: str | int = "middle") -> np.ndarray:
    idx = cls_index(tokens.shape[0], position)
    return np.concatenate([tokens[:idx], cls[None, :], tokens[idx:]], axis=0)


def extract_cls(tokens: np.ndarray, position: str | int = "middle") -> tuple[np.ndarray, np.ndarray]:
    """Inverse of insert_cls: (patch tokens, cls vector)."""
    idx = cls_index(tokens.shape[0] - 1, position)
    rest = np.concatenate([tokens[:idx], tokens[idx + 1 :]], axis=0)
    return rest, tokens[idx]


def residual_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.asarray(a, np.float32) + np.asarray(b, np.float32)


# -- normalization ---------------------------------------------------------------


def normalize(
    x: np.ndarray,
    kind: str,
    gamma: np.ndarray,
    beta: np.ndarray | None = None,
    eps: float = 1e-5,
) -> np.ndarray:
    """Per-token RMSNorm or LayerNorm; statistics in f64, output f32."""
    x64 = np.asarray(x, np.float64)
    g = np.asarray(gamma, np.float64)
    if kind == "rms":
        rms = np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
        out = x64 / rms * g
    elif kind == "layer":
        mu = np.mean(x64, axis=-1, keepdims=True)
        var = np.mean((x64 - mu) ** 2, axis=-1, keepdims=True)
        out = (x64 - mu) / np.sqrt(var + eps) * g
        if beta is not None:
            out = out + np.asarray(beta, np.float64)
    else:
        raise ValueError(f"unknown norm kind {kind!r}")
    return out.astype(np.float32)


# -- patch embedding -------------------------------------------------------------


def im2col(img: np.ndarray, patch: int) -> np.ndarray:
    """[C, H, W] image to [n_patches, C*patch*patch] rows, raster patch order,
    (channel, y, x) feature order."""
    img = np.asarray(img, np.float32)
    if img.ndim != 3:
        raise ValueError("expected [channels, H, W]")
    c, h, w = img.shape
    if h % patch or w % patch:
        raise ValueError(f"resolution {h}x{w} not divisible by patch {patch}")
    grid = img.reshape(c, h // patch, patch, w // patch, patch)
    return np.ascontiguousarray(
        grid.transpose(1, 3, 0, 2, 4).reshape((h // patch) * (w // patch), c * patch * patch)
    )


def patch_embed_reference(
    img: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, patch: int
) -> np.ndarray:
    """Non-overlapping patch projection == im2col + the shared linear path."""
    return linear_forward_reference(im2col(img, patch), weight, bias)


# -- causal depthwise conv ---------------------------------------------------------


def conv_windows(x: np.ndarray, k: int) -> np.ndarray:
    """Windowing stage: out[t, j, :] = x[t - (k-1) + j, :], zeros before t=0."""
    x = np.asarray(x)
    L, C = x.shape
    pad = np.zeros((k - 1, C), x.dtype)
    xp = np.concatenate([pad, x], axis=0)
    return np.stack([xp[j : j + L] for j in range(k)], axis=1)


def conv_forward_reference(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None = None,
    act: str = "none",
) -> np.ndarray:
    """Float path: f64-accumulated depthwise causal conv, then exact activation.

    weight is [C, K]; tap K-1 multiplies the current token.
    """
    w = np.asarray(weight, np.float64)
    C, K = w.shape
    win = conv_windows(np.asarray(x, np.float32), K).astype(np.float64)
    y = np.einsum("ljc,cj->lc", win, w).astype(np.float32)
    if bias is not None:
        y = y + np.asarray(bias, np.float32)
    return exact_activation(act, y)


def conv_counters(layer: str, L: int, C: int, K: int) -> CounterRecord:
    return CounterRecord(
        layer=layer, engine="conv", tokens=L, macs=L * C * K, pe_selects=L * C * K
    )


def conv_forward_quantized(
    x: np.ndarray,
    qw: QuantizedWeights,
    bias: np.ndarray | None = None,
    act: str = "none",
    preshift: int = 8,
    act_cfg: ActQuantConfig = ActQuantConfig(),
    static_scales: np.ndarray | None = None,
    act_lut: ActOffsetLut | None = None,
    counters: PerfCounters | None = None,
    layer: str = "conv",
) -> np.ndarray:
    """Quantized path: windowing on INT8 tokens, filtering with per-channel
    APoT taps. Tap products are exact integers; each tap dequantizes with its
    own token's fused act_scale * 2^-F multiplier, folded in ascending tap
    order, then the channel's weight scale applies once."""
    C, K = qw.out_dim, qw.in_dim
    if qw.block_size != K or qw.codes.shape != (C, K):
        raise ValueError("conv weights must be quantized per channel (block = K taps)")
    x = np.asarray(x, np.float32)
    if x.ndim != 2 or x.shape[1] != C:
        raise ValueError(f"expected [tokens, {C}] input, got {x.shape}")
    L = x.shape[0]
    q, act_scales = quantize_activations(x, act_cfg, static_scales)
    deq = act_scales.astype(np.float32) * np.float32(2.0**-preshift)
    win = conv_windows(q, K)  # [L, K, C] int8
    dwin = conv_windows(deq[:, None], K)[:, :, 0]  # [L, K]; padding rows get 0
    mag, sign = split_code(qw.codes, qw.codebook)
    wint = qw.codebook.levels_int(preshift).astype(np.int64)[mag] * (
        1 - 2 * sign.astype(np.int64)
    )  # [C, K]
    acc = np.zeros((L, C), np.float32)
    for j in range(K):
        prod = win[:, j, :].astype(np.int64) * wint[None, :, j]
        acc += prod.astype(np.float32) * dwin[:, j, None]
    y = acc * qw.scales[:, 0][None, :]
    if bias is not None:
        y = y + np.asarray(bias, np.float32)
    if act != "none":
        lut = act_lut if act_lut is not None else get_activation_lut(act)
        y = apply_activation_lut(lut, y)
    if counters is not None:
        counters.add(conv_counters(layer, L, C, K))
    return y.astype(np.float32)
