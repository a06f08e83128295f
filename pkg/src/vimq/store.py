"""Model and image (de)serialization on top of the tensor container.

A model file carries a "__config__" text entry (key=value, plus kind=float or
kind=quantized) and one entry group per layer. Quantized linears store codes
(u4 when codes fit a nibble, i8 otherwise), per-block scales, and optional
bias / smoothing / static activation scales. Packed-weight files (.vimqw)
store each layer's 256-bit word stream as a u4 tensor — the packed nibble
stream on disk is byte-identical to the word stream — plus an i32 layout
descriptor [tile, out, in, 0].
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig, config_to_text, parse_config_text
from .container import Tensor, read_container, write_container
from .model import (
    BlockParams,
    DirectionParams,
    Layer,
    LinearParams,
    Model,
    QLinearParams,
)
from .packing import PackedWeightBlob, pack_weights
from .quant import QuantizedWeights


def _layer_specs(cfg: ModelConfig) -> dict[str, tuple[int, int, int]]:
    """name -> (out_dim, in_dim, quant block size) for every weight layer."""
    d, E, R, N, K = cfg.width, cfg.e_dim, cfg.dt_rank_eff, cfg.state_dim, cfg.conv_kernel
    B = cfg.block_size
    specs = {
        "patch_embed": (d, 3 * cfg.patch * cfg.patch, B),
        "head": (cfg.n_classes, d, B),
    }
    for i in range(cfg.depth):
        specs[f"blocks.{i}.in_proj"] = (2 * E, d, B)
        specs[f"blocks.{i}.out_proj"] = (d, E, B)
        for tag in ("fwd", "bwd"):
            specs[f"blocks.{i}.{tag}.conv"] = (E, K, K)
            specs[f"blocks.{i}.{tag}.x_proj"] = (R + 2 * N, E, B)
            specs[f"blocks.{i}.{tag}.dt_proj"] = (E, R, B)
    return specs


def _put(entries: dict[str, Tensor], name: str, arr: np.ndarray | None, dtype: str = "f32") -> None:
    if arr is not None:
        entries[name] = Tensor(dtype, arr)


def _store_layer(entries: dict[str, Tensor], name: str, layer: Layer) -> None:
    if isinstance(layer, QLinearParams):
        code_dtype = "u4" if layer.qw.codebook.code_bits <= 4 else "i8"
        _put(entries, f"{name}.codes", layer.qw.codes, code_dtype)
        _put(entries, f"{name}.scales", layer.qw.scales)
        _put(entries, f"{name}.bias", layer.bias)
        _put(entries, f"{name}.smooth", layer.smooth)
        _put(entries, f"{name}.act_scales", layer.act_scales)
    else:
        _put(entries, f"{name}.weight", layer.weight)
        _put(entries, f"{name}.bias", layer.bias)
        _put(entries, f"{name}.smooth", layer.smooth)


def save_model(path: str, model: Model) -> None:
    entries: dict[str, Tensor] = {}
    entries["__config__"] = Tensor(
        "i8",
        np.frombuffer(config_to_text(model.cfg, {"kind": model.kind}).encode(), np.int8).copy(),
    )
    _store_layer(entries, "patch_embed", model.patch_embed)
    _put(entries, "cls", model.cls)
    _put(entries, "pos_embed", model.pos_embed)
    for i, blk in enumerate(model.blocks):
        pre = f"blocks.{i}"
        _put(entries, f"{pre}.norm.gamma", blk.norm_gamma)
        _put(entries, f"{pre}.norm.beta", blk.norm_beta)
        _store_layer(entries, f"{pre}.in_proj", blk.in_proj)
        _store_layer(entries, f"{pre}.out_proj", blk.out_proj)
        for tag, dp in (("fwd", blk.fwd), ("bwd", blk.bwd)):
            _store_layer(entries, f"{pre}.{tag}.conv", dp.conv)
            _store_layer(entries, f"{pre}.{tag}.x_proj", dp.x_proj)
            _store_layer(entries, f"{pre}.{tag}.dt_proj", dp.dt_proj)
            _put(entries, f"{pre}.{tag}.A", dp.A)
            _put(entries, f"{pre}.{tag}.d_skip", dp.d_skip)
    _put(entries, "final_norm.gamma", model.final_gamma)
    _put(entries, "final_norm.beta", model.final_beta)
    _store_layer(entries, "head", model.head)
    write_container(path, entries)


def _load_layer(
    entries: dict[str, Tensor],
    name: str,
    kind: str,
    spec: tuple[int, int, int],
    cfg: ModelConfig,
) -> Layer:
    out_dim, in_dim, block = spec

    def get(suffix: str) -> np.ndarray | None:
        t = entries.get(f"{name}.{suffix}")
        return None if t is None else np.asarray(t.data)

    if kind == "quantized":
        codes, scales = get("codes"), get("scales")
        if codes is None or scales is None:
            raise ValueError(f"{name}: missing codes/scales in quantized model")
        qw = QuantizedWeights(
            codes=codes.astype(np.uint8),
            scales=scales.astype(np.float32),
            block_size=block,
            codebook=cfg.codebook(),
            out_dim=out_dim,
            in_dim=in_dim,
        )
        return QLinearParams(qw, get("bias"), get("smooth"), get("act_scales"))
    weight = get("weight")
    if weight is None:
        raise ValueError(f"{name}: missing weight")
    if weight.shape != (out_dim, in_dim):
        raise ValueError(f"{name}: weight is {weight.shape}, expected {(out_dim, in_dim)}")
    return LinearParams(weight, get("bias"), get("smooth"))


def load_model(path: str) -> Model:
    entries = read_container(path)
    if "__config__" not in entries:
        raise ValueError(f"{path}: not a model container (no __config__)")
    text = entries["__config__"].data.tobytes().decode("utf-8")
    cfg, extra = parse_config_text(text)
    kind = extra.get("kind", "float")
    if kind not in ("float", "quantized"):
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    specs = _layer_specs(cfg)

    def arr(name: str, required: bool = True) -> np.ndarray | None:
        t = entries.get(name)
        if t is None:
            if required:
                raise ValueError(f"{path}: missing entry {name!r}")
            return None
        return np.asarray(t.data)

    blocks = []
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        dirs = {}
        for tag in ("fwd", "bwd"):
            dirs[tag] = DirectionParams(
                conv=_load_layer(entries, f"{pre}.{tag}.conv", kind, specs[f"{pre}.{tag}.conv"], cfg),
                x_proj=_load_layer(entries, f"{pre}.{tag}.x_proj", kind, specs[f"{pre}.{tag}.x_proj"], cfg),
                dt_proj=_load_layer(entries, f"{pre}.{tag}.dt_proj", kind, specs[f"{pre}.{tag}.dt_proj"], cfg),
                A=arr(f"{pre}.{tag}.A"),
                d_skip=arr(f"{pre}.{tag}.d_skip"),
            )
        blocks.append(
            BlockParams(
                norm_gamma=arr(f"{pre}.norm.gamma"),
                norm_beta=arr(f"{pre}.norm.beta", required=False),
                in_proj=_load_layer(entries, f"{pre}.in_proj", kind, specs[f"{pre}.in_proj"], cfg),
                out_proj=_load_layer(entries, f"{pre}.out_proj", kind, specs[f"{pre}.out_proj"], cfg),
                fwd=dirs["fwd"],
                bwd=dirs["bwd"],
            )
        )
    return Model(
        cfg=cfg,
        kind=kind,
        patch_embed=_load_layer(entries, "patch_embed", kind, specs["patch_embed"], cfg),
        cls=arr("cls"),
        pos_embed=arr("pos_embed", required=False),
        blocks=blocks,
        final_gamma=arr("final_norm.gamma"),
        final_beta=arr("final_norm.beta", required=False),
        head=_load_layer(entries, "head", kind, specs["head"], cfg),
    )


# -- packed weight files (.vimqw) ---------------------------------------------------


def save_packed_weights(path: str, model: Model, tile: int | None = None) -> None:
    """Pack every quantized layer's codes into 256-bit word streams."""
    if model.kind != "quantized":
        raise ValueError("packed weights come from a quantized model")
    tile = tile if tile is not None else model.cfg.tile
    entries: dict[str, Tensor] = {}
    entries["__config__"] = Tensor(
        "i8",
        np.frombuffer(config_to_text(model.cfg, {"kind": "packed"}).encode(), np.int8).copy(),
    )
    from .model import _named_linears  # layer walk shared with quantization

    for name, (layer, _role) in _named_linears(model).items():
        assert isinstance(layer, QLinearParams)
        if layer.qw.codebook.code_bits > 4:
            raise ValueError(f"{name}: {layer.qw.codebook.code_bits}-bit codes do not fit the 4-bit pack format")
        blob = pack_weights(layer.qw.codes, tile)
        nibbles = np.empty(blob.words.size * 2, np.uint8)
        nibbles[0::2] = blob.words & 0x0F
        nibbles[1::2] = blob.words >> 4
        entries[f"{name}.words"] = Tensor("u4", nibbles)
        entries[f"{name}.layout"] = Tensor("i32", blob.layout_descriptor())
    write_container(path, entries)


def load_packed_weights(path: str) -> dict[str, PackedWeightBlob]:
    entries = read_container(path)
    blobs: dict[str, PackedWeightBlob] = {}
    for name, t in entries.items():
        if not name.endswith(".words"):
            continue
        base = name[: -len(".words")]
        layout = entries.get(f"{base}.layout")
        if layout is None:
            raise ValueError(f"{path}: {base} has words but no layout descriptor")
        tile, out_dim, in_dim, order = (int(v) for v in layout.data)
        if order != 0:
            raise ValueError(f"{path}: {base}: unknown stream order {order}")
        nibbles = np.asarray(t.data, np.uint8)
        if nibbles.size % 2:
            raise ValueError(f"{path}: {base}: odd nibble count")
        words = (nibbles[0::2] | (nibbles[1::2] << 4)).astype(np.uint8)
        blobs[base] = PackedWeightBlob(words=words, tile=tile, out_dim=out_dim, in_dim=in_dim)
    return blobs


# -- image containers ---------------------------------------------------------------


def save_images(path: str, images: np.ndarray, labels: np.ndarray | None = None) -> None:
    images = np.asarray(images, np.float32)
    if images.ndim == 3:
        images = images[None]
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected [n, 3, H, W] images, got {images.shape}")
    entries = {"images": Tensor("f32", images)}
    if labels is not None:
        entries["labels"] = Tensor("i32", np.asarray(labels, np.int32))
    write_container(path, entries)


def load_images(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    entries = read_container(path)
    if "images" not in entries:
        raise ValueError(f"{path}: no 'images' entry")
    images = np.asarray(entries["images"].data)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"{path}: images entry is {images.shape}, expected [n, 3, H, W]")
    labels = entries.get("labels")
    return images, None if labels is None else np.asarray(labels.data)
