"""Bidirectional Mamba-style encoder: patch embed, CLS insert, stacked blocks,
final norm, classification head.

Each block: norm -> in-projection into x/z halves -> forward and backward
paths (backward runs on flipped tokens with its own weights: causal conv +
SiLU, x-projection to dt/B/C, dt-projection + SoftPlus, selective SSM) ->
per-direction outputs gated by SiLU(z) (gating distributes over the sum, so
this equals gating the merged pre-gate sum) -> summed, out-projected, residual.

The same graph runs a float path (f64-accumulated GEMMs, exact activations)
and a quantized path (INT8 activations against APoT codes via the LUT engine,
LUT-based activations); the SSM stays f32 in both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .aux import (
    conv_forward_quantized,
    conv_forward_reference,
    extract_cls,
    flip_tokens,
    im2col,
    insert_cls,
    normalize,
    residual_add,
)
from .config import ModelConfig
from .counters import PerfCounters
from .linear import (
    TileConfig,
    apply_activation_lut,
    exact_activation,
    get_activation_lut,
    linear_forward_quantized,
    linear_forward_reference,
)
from .quant import (
    ActQuantConfig,
    QuantizedWeights,
    collect_static_scales,
    compute_smoothing,
)
from .ssm import SsmConfig, SsmParams, ssm_forward

Tap = Callable[[str, np.ndarray], None]


@dataclass
class LinearParams:
    weight: np.ndarray  # [out, in] f32
    bias: np.ndarray | None = None
    smooth: np.ndarray | None = None  # explicit per-channel input divide


@dataclass
class QLinearParams:
    qw: QuantizedWeights
    bias: np.ndarray | None = None
    smooth: np.ndarray | None = None
    act_scales: np.ndarray | None = None  # static activation scales, if calibrated


Layer = LinearParams | QLinearParams


@dataclass
class DirectionParams:
    conv: Layer  # depthwise taps [E, K]
    x_proj: Layer  # E -> dt_rank + 2N
    dt_proj: Layer  # dt_rank -> E
    A: np.ndarray  # [E, N]
    d_skip: np.ndarray  # [E]


@dataclass
class BlockParams:
    norm_gamma: np.ndarray
    norm_beta: np.ndarray | None
    in_proj: Layer  # d -> 2E
    out_proj: Layer  # E -> d
    fwd: DirectionParams
    bwd: DirectionParams


@dataclass
class Model:
    cfg: ModelConfig
    kind: str  # float | quantized
    patch_embed: Layer  # d <- 3 * patch^2
    cls: np.ndarray  # [d]
    pos_embed: np.ndarray | None  # [tokens, d] or None
    blocks: list[BlockParams]
    final_gamma: np.ndarray
    final_beta: np.ndarray | None
    head: Layer  # n_classes <- d


def _float_weight(layer: Layer) -> np.ndarray:
    return layer.qw.dequantize() if isinstance(layer, QLinearParams) else layer.weight


class _Ops:
    """Mode-resolved layer appliers shared by the block/model forwards."""

    def __init__(
        self,
        model: Model,
        mode: str,
        counters: PerfCounters | None = None,
        tap: Tap | None = None,
    ) -> None:
        if mode not in ("float", "quantized"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "quantized" and model.kind != "quantized":
            raise ValueError("quantized mode needs a quantized model")
        cfg = model.cfg
        self.mode = mode
        self.counters = counters
        self.tap = tap
        self.tile_cfg = TileConfig(cfg.tile, cfg.preshift)
        self.act_cfg = ActQuantConfig(cfg.act_mode, cfg.act_granularity)
        self.luts = {
            kind: get_activation_lut(kind, cfg.act_entries, cfg.act_range)
            for kind in ("silu", "softplus")
        }

    def linear(self, layer: Layer, x: np.ndarray, act: str, name: str) -> np.ndarray:
        if layer.smooth is not None:
            x = (np.asarray(x, np.float32) / np.asarray(layer.smooth, np.float32))
        if self.tap is not None:
            self.tap(name, x)
        if self.mode == "quantized":
            assert isinstance(layer, QLinearParams)
            return linear_forward_quantized(
                x,
                layer.qw,
                layer.bias,
                act,
                self.tile_cfg,
                self.act_cfg,
                layer.act_scales,
                self.luts.get(act),
                self.counters,
                name,
            )
        return linear_forward_reference(x, _float_weight(layer), layer.bias, act)

    def conv(self, layer: Layer, x: np.ndarray, act: str, name: str) -> np.ndarray:
        if self.tap is not None:
            self.tap(name, x)
        if self.mode == "quantized":
            assert isinstance(layer, QLinearParams)
            return conv_forward_quantized(
                x,
                layer.qw,
                layer.bias,
                act,
                self.tile_cfg.preshift,
                self.act_cfg,
                layer.act_scales,
                self.luts.get(act),
                self.counters,
                name,
            )
        return conv_forward_reference(x, _float_weight(layer), layer.bias, act)

    def gate(self, z: np.ndarray) -> np.ndarray:
        if self.mode == "quantized":
            return apply_activation_lut(self.luts["silu"], z)
        return exact_activation("silu", z)


def direction_forward(
    ops: _Ops,
    dp: DirectionParams,
    xs: np.ndarray,
    gate: np.ndarray,
    flip: bool,
    cfg: ModelConfig,
    name: str,
) -> np.ndarray:
    """One scan direction; backward flips tokens in and flips its output back."""
    seq = flip_tokens(xs) if flip else xs
    g = flip_tokens(gate) if flip else gate
    R, N = cfg.dt_rank_eff, cfg.state_dim
    c = ops.conv(dp.conv, seq, "silu", f"{name}.conv")
    dbc = ops.linear(dp.x_proj, c, "none", f"{name}.x_proj")
    delta = ops.linear(dp.dt_proj, dbc[:, :R], "softplus", f"{name}.dt_proj")
    params = SsmParams(
        u=c,
        delta=delta,
        A=dp.A,
        B=np.ascontiguousarray(dbc[:, R : R + N]),
        C=np.ascontiguousarray(dbc[:, R + N :]),
        d_skip=dp.d_skip,
        z=g,
    )
    y = ssm_forward(
        params,
        SsmConfig(n_b=cfg.n_b, exp_mode=cfg.exp_mode, dtype="f32"),
        ops.counters,
        f"{name}.ssm",
    )
    return flip_tokens(y) if flip else y


def block_forward(ops: _Ops, blk: BlockParams, x: np.ndarray, cfg: ModelConfig, name: str) -> np.ndarray:
    E = cfg.e_dim
    h = normalize(x, cfg.norm, blk.norm_gamma, blk.norm_beta, cfg.norm_eps)
    xz = ops.linear(blk.in_proj, h, "none", f"{name}.in_proj")
    xs = np.ascontiguousarray(xz[:, :E])
    gate = ops.gate(np.ascontiguousarray(xz[:, E:]))
    y_f = direction_forward(ops, blk.fwd, xs, gate, False, cfg, f"{name}.fwd")
    y_b = direction_forward(ops, blk.bwd, xs, gate, True, cfg, f"{name}.bwd")
    merged = residual_add(y_f, y_b)
    out = ops.linear(blk.out_proj, merged, "none", f"{name}.out_proj")
    return residual_add(x, out)


def model_forward(
    model: Model,
    images: np.ndarray,
    mode: str = "float",
    counters: PerfCounters | None = None,
    tap: Tap | None = None,
) -> np.ndarray:
    """Run [n, 3, H, W] images to [n, n_classes] logits."""
    images = np.asarray(images, np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected [n, 3, H, W] images, got {images.shape}")
    cfg = model.cfg
    ops = _Ops(model, mode, counters, tap)
    logits = np.empty((images.shape[0], cfg.n_classes), np.float32)
    for i, img in enumerate(images):
        cols = im2col(img, cfg.patch)
        tokens = ops.linear(model.patch_embed, cols, "none", "patch_embed")
        tokens = insert_cls(tokens, model.cls, cfg.cls_position)
        if model.pos_embed is not None:
            if model.pos_embed.shape != tokens.shape:
                raise ValueError(
                    f"pos_embed is {model.pos_embed.shape}, tokens are {tokens.shape}"
                )
            tokens = residual_add(tokens, model.pos_embed)
        for b, blk in enumerate(model.blocks):
            tokens = block_forward(ops, blk, tokens, cfg, f"blocks.{b}")
            if tap is not None:
                tap(f"blocks.{b}.out", tokens)
        tokens = normalize(tokens, cfg.norm, model.final_gamma, model.final_beta, cfg.norm_eps)
        _, cls_vec = extract_cls(tokens, cfg.cls_position)
        logits[i] = ops.linear(model.head, cls_vec[None, :], "none", "head")[0]
    return logits


# -- generator -------------------------------------------------------------------


def random_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Gaussian-initialized float model for desk-scale experiments.

    A uses the negative-integer ladder init, dt biases land softplus(bias) in
    [1e-3, 1e-1], so the recurrence is stable out of the box.
    """
    rng = np.random.default_rng(seed)
    d, E, R, N, K = cfg.width, cfg.e_dim, cfg.dt_rank_eff, cfg.state_dim, cfg.conv_kernel

    def lin(out_dim: int, in_dim: int, std: float, bias: bool) -> LinearParams:
        w = rng.normal(0.0, std, (out_dim, in_dim)).astype(np.float32)
        b = rng.normal(0.0, std, out_dim).astype(np.float32) if bias else None
        return LinearParams(w, b)

    def direction() -> DirectionParams:
        conv_w = rng.normal(0.0, 0.5 / math.sqrt(K), (E, K)).astype(np.float32)
        conv_b = rng.normal(0.0, 0.02, E).astype(np.float32)
        dtp = lin(E, R, R**-0.5, bias=True)
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), E))
        dtp.bias = (dt + np.log(-np.expm1(-dt))).astype(np.float32)  # softplus inverse
        return DirectionParams(
            conv=LinearParams(conv_w, conv_b),
            x_proj=lin(R + 2 * N, E, E**-0.5, bias=False),
            dt_proj=dtp,
            A=(-np.tile(np.arange(1, N + 1, dtype=np.float32), (E, 1))),
            d_skip=np.ones(E, np.float32),
        )

    blocks = []
    for _ in range(cfg.depth):
        blocks.append(
            BlockParams(
                norm_gamma=np.ones(d, np.float32),
                norm_beta=np.zeros(d, np.float32) if cfg.norm == "layer" else None,
                in_proj=lin(2 * E, d, 0.02, bias=False),
                out_proj=lin(d, E, 0.02, bias=False),
                fwd=direction(),
                bwd=direction(),
            )
        )
    return Model(
        cfg=cfg,
        kind="float",
        patch_embed=lin(d, 3 * cfg.patch * cfg.patch, 0.02, bias=True),
        cls=rng.normal(0.0, 0.02, d).astype(np.float32),
        pos_embed=None,
        blocks=blocks,
        final_gamma=np.ones(d, np.float32),
        final_beta=np.zeros(d, np.float32) if cfg.norm == "layer" else None,
        head=lin(cfg.n_classes, d, 0.02, bias=True),
    )


def random_images(n: int, resolution: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, (n, 3, resolution, resolution)).astype(np.float32)


# -- quantization ------------------------------------------------------------------


def _named_linears(model: Model) -> dict[str, tuple[Layer, str]]:
    """name -> (layer, role); role 'linear' or 'conv'."""
    out: dict[str, tuple[Layer, str]] = {
        "patch_embed": (model.patch_embed, "linear"),
        "head": (model.head, "linear"),
    }
    for i, blk in enumerate(model.blocks):
        out[f"blocks.{i}.in_proj"] = (blk.in_proj, "linear")
        out[f"blocks.{i}.out_proj"] = (blk.out_proj, "linear")
        for tag, dp in (("fwd", blk.fwd), ("bwd", blk.bwd)):
            out[f"blocks.{i}.{tag}.conv"] = (dp.conv, "conv")
            out[f"blocks.{i}.{tag}.x_proj"] = (dp.x_proj, "linear")
            out[f"blocks.{i}.{tag}.dt_proj"] = (dp.dt_proj, "linear")
    return out


def _copy_linear(lp: LinearParams) -> LinearParams:
    return LinearParams(
        lp.weight.copy(),
        None if lp.bias is None else lp.bias.copy(),
        None if lp.smooth is None else lp.smooth.copy(),
    )


def _copy_model(model: Model) -> Model:
    blocks = [
        BlockParams(
            norm_gamma=b.norm_gamma.copy(),
            norm_beta=None if b.norm_beta is None else b.norm_beta.copy(),
            in_proj=_copy_linear(b.in_proj),
            out_proj=_copy_linear(b.out_proj),
            fwd=DirectionParams(
                _copy_linear(b.fwd.conv), _copy_linear(b.fwd.x_proj),
                _copy_linear(b.fwd.dt_proj), b.fwd.A.copy(), b.fwd.d_skip.copy(),
            ),
            bwd=DirectionParams(
                _copy_linear(b.bwd.conv), _copy_linear(b.bwd.x_proj),
                _copy_linear(b.bwd.dt_proj), b.bwd.A.copy(), b.bwd.d_skip.copy(),
            ),
        )
        for b in model.blocks
    ]
    return Model(
        cfg=model.cfg,
        kind=model.kind,
        patch_embed=_copy_linear(model.patch_embed),
        cls=model.cls.copy(),
        pos_embed=None if model.pos_embed is None else model.pos_embed.copy(),
        blocks=blocks,
        final_gamma=model.final_gamma.copy(),
        final_beta=None if model.final_beta is None else model.final_beta.copy(),
        head=_copy_linear(model.head),
    )


def collect_channel_absmax(model: Model, images: np.ndarray) -> dict[str, np.ndarray]:
    """Per-channel input absmax at every quantized-layer interface (float pass)."""
    stats: dict[str, np.ndarray] = {}

    def tap(name: str, x: np.ndarray) -> None:
        if name.endswith(".out"):
            return
        a = np.max(np.abs(x), axis=0)
        stats[name] = np.maximum(stats[name], a) if name in stats else a

    model_forward(model, images, "float", tap=tap)
    return stats


def _colmax(w: np.ndarray) -> np.ndarray:
    return np.max(np.abs(w), axis=0)


def _scale_cols(lp: LinearParams, s: np.ndarray) -> None:
    lp.weight = (lp.weight.astype(np.float64) * np.asarray(s, np.float64)[None, :]).astype(np.float32)


def _divide_rows(lp: LinearParams, s: np.ndarray, rows: slice) -> None:
    w64 = lp.weight.astype(np.float64)
    w64[rows] /= np.asarray(s, np.float64)[:, None]
    lp.weight = w64.astype(np.float32)
    if lp.bias is not None:
        b64 = lp.bias.astype(np.float64)
        b64[rows] /= np.asarray(s, np.float64)
        lp.bias = b64.astype(np.float32)


def smooth_model(model: Model, stats: dict[str, np.ndarray], cfg: ModelConfig) -> Model:
    """Fold per-channel smoothing into the float graph; a float no-op.

    Linear-linear interfaces fuse (norm -> in_proj, in_proj -> conv,
    x_proj -> dt_proj, final norm -> head); interfaces behind a nonlinearity
    (x_proj, out_proj) and the raw-pixel patch embed get explicit divides.
    """
    if model.kind != "float":
        raise ValueError("smoothing applies to float models")
    sm = _copy_model(model)
    sm.cfg = cfg
    alpha = cfg.alpha
    E, R = cfg.e_dim, cfg.dt_rank_eff

    s = compute_smoothing(stats["patch_embed"], _colmax(sm.patch_embed.weight), alpha)
    sm.patch_embed.smooth = s
    _scale_cols(sm.patch_embed, s)

    for i, blk in enumerate(sm.blocks):
        pre = f"blocks.{i}"
        s = compute_smoothing(stats[f"{pre}.in_proj"], _colmax(blk.in_proj.weight), alpha)
        blk.norm_gamma = (blk.norm_gamma.astype(np.float64) / s).astype(np.float32)
        if blk.norm_beta is not None:
            blk.norm_beta = (blk.norm_beta.astype(np.float64) / s).astype(np.float32)
        _scale_cols(blk.in_proj, s)

        conv_stat = np.maximum(stats[f"{pre}.fwd.conv"], stats[f"{pre}.bwd.conv"])
        conv_wmax = np.maximum(
            np.max(np.abs(blk.fwd.conv.weight), axis=1),
            np.max(np.abs(blk.bwd.conv.weight), axis=1),
        )
        s = compute_smoothing(conv_stat, conv_wmax, alpha)
        _divide_rows(blk.in_proj, s, slice(0, E))  # x half only; z half untouched
        for dp in (blk.fwd, blk.bwd):
            dp.conv.weight = (dp.conv.weight.astype(np.float64) * s[:, None].astype(np.float64)).astype(np.float32)

        for tag, dp in (("fwd", blk.fwd), ("bwd", blk.bwd)):
            s = compute_smoothing(stats[f"{pre}.{tag}.x_proj"], _colmax(dp.x_proj.weight), alpha)
            dp.x_proj.smooth = s
            _scale_cols(dp.x_proj, s)
            s = compute_smoothing(stats[f"{pre}.{tag}.dt_proj"], _colmax(dp.dt_proj.weight), alpha)
            _divide_rows(dp.x_proj, s, slice(0, R))
            _scale_cols(dp.dt_proj, s)

        s = compute_smoothing(stats[f"{pre}.out_proj"], _colmax(blk.out_proj.weight), alpha)
        blk.out_proj.smooth = s
        _scale_cols(blk.out_proj, s)

    s = compute_smoothing(stats["head"], _colmax(sm.head.weight), alpha)
    sm.final_gamma = (sm.final_gamma.astype(np.float64) / s).astype(np.float32)
    if sm.final_beta is not None:
        sm.final_beta = (sm.final_beta.astype(np.float64) / s).astype(np.float32)
    _scale_cols(sm.head, s)
    return sm


def collect_static_act_scales(model: Model, images: np.ndarray, per_tensor: bool) -> dict[str, np.ndarray]:
    """Per-token-position (or per-tensor) absmax at each quantizer input."""
    stats: dict[str, np.ndarray] = {}

    def tap(name: str, x: np.ndarray) -> None:
        if name.endswith(".out"):
            return
        a = np.asarray([np.max(np.abs(x))]) if per_tensor else np.max(np.abs(x), axis=1)
        stats[name] = np.maximum(stats[name], a) if name in stats else a

    model_forward(model, images, "float", tap=tap)
    return {k: collect_static_scales(v, per_tensor) for k, v in stats.items()}


def quantize_model(
    model: Model,
    calib_images: np.ndarray | None,
    cfg: ModelConfig | None = None,
) -> tuple[Model, dict[str, float]]:
    """Float model -> quantized model (+ per-layer weight MSE report).

    Runs calibration for smoothing (and static activation scales if
    configured), folds smoothing, then quantizes every linear/conv weight
    per-block. Calibration images are required unless smoothing is off and
    activations stay dynamic.
    """
    if model.kind != "float":
        raise ValueError("expected a float model")
    cfg = cfg if cfg is not None else model.cfg
    cb = cfg.codebook()
    needs_calib = cfg.smooth or cfg.act_mode == "static"
    if needs_calib and calib_images is None:
        raise ValueError("calibration images required for smoothing/static quantization")

    if cfg.smooth:
        stats = collect_channel_absmax(model, calib_images)
        sm = smooth_model(model, stats, cfg)
    else:
        sm = _copy_model(model)
        sm.cfg = cfg

    static: dict[str, np.ndarray] = {}
    if cfg.act_mode == "static":
        static = collect_static_act_scales(
            sm, calib_images, cfg.act_granularity == "per_tensor"
        )

    mse: dict[str, float] = {}

    def q(layer: Layer, name: str, role: str) -> QLinearParams:
        assert isinstance(layer, LinearParams)
        block = cfg.conv_kernel if role == "conv" else cfg.block_size
        qw = QuantizedWeights.from_float(layer.weight, block, cb)
        mse[name] = float(np.mean((layer.weight - qw.dequantize()) ** 2))
        return QLinearParams(
            qw=qw,
            bias=layer.bias,
            smooth=layer.smooth,
            act_scales=static.get(name),
        )

    qm = _copy_model(sm)
    qm.kind = "quantized"
    qm.patch_embed = q(sm.patch_embed, "patch_embed", "linear")
    qm.head = q(sm.head, "head", "linear")
    for i, (blk_s, blk_q) in enumerate(zip(sm.blocks, qm.blocks)):
        pre = f"blocks.{i}"
        blk_q.in_proj = q(blk_s.in_proj, f"{pre}.in_proj", "linear")
        blk_q.out_proj = q(blk_s.out_proj, f"{pre}.out_proj", "linear")
        for tag in ("fwd", "bwd"):
            dp_s, dp_q = getattr(blk_s, tag), getattr(blk_q, tag)
            dp_q.conv = q(dp_s.conv, f"{pre}.{tag}.conv", "conv")
            dp_q.x_proj = q(dp_s.x_proj, f"{pre}.{tag}.x_proj", "linear")
            dp_q.dt_proj = q(dp_s.dt_proj, f"{pre}.{tag}.dt_proj", "linear")
    return qm, mse
