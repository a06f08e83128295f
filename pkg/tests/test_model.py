import numpy as np
import pytest

from vimq.aux import flip_tokens
from vimq.config import ModelConfig
from vimq.counters import PerfCounters
from vimq.model import (
    QLinearParams,
    _named_linears,
    _Ops,
    block_forward,
    collect_channel_absmax,
    direction_forward,
    model_forward,
    quantize_model,
    random_images,
    random_model,
    smooth_model,
)


def test_forward_is_deterministic(float_model, qmodel, calib_images):
    a = model_forward(float_model, calib_images, "float")
    b = model_forward(float_model, calib_images, "float")
    assert np.array_equal(a, b)
    qa = model_forward(qmodel, calib_images, "quantized")
    qb = model_forward(qmodel, calib_images, "quantized")
    assert np.array_equal(qa, qb)


def test_input_validation(float_model):
    with pytest.raises(ValueError, match="images"):
        model_forward(float_model, np.zeros((1, 1, 32, 32), np.float32))
    # single image auto-batches
    one = random_images(1, 32, seed=3)[0]
    out = model_forward(float_model, one)
    assert out.shape == (1, float_model.cfg.n_classes)
    with pytest.raises(ValueError, match="unknown mode"):
        model_forward(float_model, one, "int4")
    with pytest.raises(ValueError, match="quantized model"):
        model_forward(float_model, one, "quantized")


def test_zero_out_proj_makes_block_identity(float_model, tiny_cfg):
    ops = _Ops(float_model, "float")
    blk = float_model.blocks[0]
    saved = blk.out_proj.weight
    blk.out_proj.weight = np.zeros_like(saved)
    try:
        x = np.random.default_rng(4).normal(0, 1, (5, tiny_cfg.width)).astype(np.float32)
        assert np.array_equal(block_forward(ops, blk, x, tiny_cfg, "b"), x)
    finally:
        blk.out_proj.weight = saved


@pytest.mark.parametrize("mode", ["float", "quantized"])
def test_direction_swap_flip_equivariance(qmodel, float_model, tiny_cfg, mode):
    # swapping fwd/bwd parameter bundles and flipping the input flips the output
    from vimq.model import BlockParams

    model = qmodel if mode == "quantized" else float_model
    blk = model.blocks[0]
    swapped = BlockParams(
        norm_gamma=blk.norm_gamma,
        norm_beta=blk.norm_beta,
        in_proj=blk.in_proj,
        out_proj=blk.out_proj,
        fwd=blk.bwd,
        bwd=blk.fwd,
    )
    ops = _Ops(model, mode)
    x = np.random.default_rng(5).normal(0, 1, (5, tiny_cfg.width)).astype(np.float32)
    a = block_forward(ops, blk, x, tiny_cfg, "b")
    b = block_forward(ops, swapped, flip_tokens(x), tiny_cfg, "b")
    assert np.array_equal(b, flip_tokens(a))


def test_backward_direction_runs_on_flipped_tokens(float_model, tiny_cfg):
    ops = _Ops(float_model, "float")
    dp = float_model.blocks[0].fwd
    rng = np.random.default_rng(6)
    xs = rng.normal(0, 1, (5, tiny_cfg.e_dim)).astype(np.float32)
    gate = rng.normal(0, 1, (5, tiny_cfg.e_dim)).astype(np.float32)
    fwd_on_flipped = direction_forward(
        ops, dp, flip_tokens(xs), flip_tokens(gate), False, tiny_cfg, "d"
    )
    bwd = direction_forward(ops, dp, xs, gate, True, tiny_cfg, "d")
    assert np.array_equal(bwd, flip_tokens(fwd_on_flipped))


def test_smoothing_is_float_noop(float_model, calib_images, tiny_cfg):
    stats = collect_channel_absmax(float_model, calib_images)
    sm = smooth_model(float_model, stats, tiny_cfg)
    ref = model_forward(float_model, calib_images, "float")
    got = model_forward(sm, calib_images, "float")
    rel = float(np.max(np.abs(got - ref))) / max(float(np.max(np.abs(ref))), 1e-30)
    assert rel <= 1e-5
    with pytest.raises(ValueError, match="float models"):
        smooth_model(quantize_model(float_model, calib_images)[0], stats, tiny_cfg)


def test_calibration_covers_every_weight_layer(float_model, calib_images):
    stats = collect_channel_absmax(float_model, calib_images)
    assert sorted(stats) == sorted(_named_linears(float_model))
    for name, (layer, role) in _named_linears(float_model).items():
        # conv stats are per input channel, linear stats per input column
        dim = layer.weight.shape[0] if role == "conv" else layer.weight.shape[1]
        assert stats[name].shape == (dim,)


def test_quantized_model_structure(qmodel, float_model, tiny_cfg):
    assert qmodel.kind == "quantized"
    for name, (layer, role) in _named_linears(qmodel).items():
        assert isinstance(layer, QLinearParams), name
        want_block = tiny_cfg.conv_kernel if role == "conv" else tiny_cfg.block_size
        assert layer.qw.block_size == want_block
        assert layer.act_scales is None  # dynamic activations by default
    # SSM tensors stay float and untouched by smoothing/quantization
    for bq, bf in zip(qmodel.blocks, float_model.blocks):
        for tag in ("fwd", "bwd"):
            assert np.array_equal(getattr(bq, tag).A, getattr(bf, tag).A)
            assert getattr(bq, tag).A.dtype == np.float32
            assert np.array_equal(getattr(bq, tag).d_skip, getattr(bf, tag).d_skip)


def test_quantize_reports_mse(float_model, calib_images):
    _, mse = quantize_model(float_model, calib_images)
    assert sorted(mse) == sorted(_named_linears(float_model))
    assert all(v >= 0.0 for v in mse.values())


def test_quantize_requires_calibration(float_model):
    with pytest.raises(ValueError, match="calibration images"):
        quantize_model(float_model, None)


def test_quantize_without_smoothing_needs_no_calib(float_model, tiny_cfg, calib_images):
    from dataclasses import replace

    cfg = replace(tiny_cfg, smooth=False)
    qm, _ = quantize_model(float_model, None, cfg)
    out = model_forward(qm, calib_images, "quantized")
    assert np.all(np.isfinite(out))
    for _name, (layer, _role) in _named_linears(qm).items():
        assert layer.smooth is None


@pytest.mark.parametrize("granularity", ["per_token", "per_tensor"])
def test_static_activation_modes(float_model, tiny_cfg, calib_images, granularity):
    from dataclasses import replace

    cfg = replace(tiny_cfg, act_mode="static", act_granularity=granularity)
    qm, _ = quantize_model(float_model, calib_images, cfg)
    for name, (layer, _role) in _named_linears(qm).items():
        assert layer.act_scales is not None, name
        assert np.all(layer.act_scales > 0)
        if granularity == "per_tensor":
            assert layer.act_scales.size == 1
    out = model_forward(qm, calib_images, "quantized")
    assert np.all(np.isfinite(out))


def test_quantized_path_tracks_float(float_model, qmodel, calib_images):
    ref = model_forward(float_model, calib_images, "float")
    got = model_forward(qmodel, calib_images, "quantized")
    a, b = got.ravel().astype(np.float64), ref.ravel().astype(np.float64)
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert cos > 0.95


def test_counters_cover_every_engine(qmodel, calib_images):
    pc = PerfCounters()
    model_forward(qmodel, calib_images[:1], "quantized", counters=pc)
    engines = {r.engine for r in pc.records}
    assert engines == {"linear", "conv", "ssm"}
    # 5 tokens per 32x32 image at patch 16
    assert all(r.tokens in (4, 5, 1) for r in pc.records)
    names = {r.layer for r in pc.records}
    assert "patch_embed" in names and "head" in names
    assert any(name.endswith(".ssm") for name in names)


def test_pos_embed_shape_check(float_model, calib_images):
    import copy

    model = copy.copy(float_model)
    model.pos_embed = np.zeros((3, float_model.cfg.width), np.float32)
    with pytest.raises(ValueError, match="pos_embed"):
        model_forward(model, calib_images[:1], "float")
    tokens = float_model.cfg.tokens(32)
    model.pos_embed = np.zeros((tokens, float_model.cfg.width), np.float32)
    base = model_forward(float_model, calib_images[:1], "float")
    assert np.array_equal(model_forward(model, calib_images[:1], "float"), base)


def test_variant_widths():
    assert ModelConfig(variant="small").width == 384
    assert ModelConfig(variant="base").e_dim == 1536
    assert ModelConfig(variant="tiny").dt_rank_eff == 12
    assert ModelConfig(variant="tiny", d_model=64).dt_rank_eff == 4
    with pytest.raises(ValueError, match="variant"):
        ModelConfig(variant="huge")


def test_random_model_seed_determinism(tiny_cfg):
    a = random_model(tiny_cfg, seed=3)
    b = random_model(tiny_cfg, seed=3)
    c = random_model(tiny_cfg, seed=4)
    assert np.array_equal(a.patch_embed.weight, b.patch_embed.weight)
    assert not np.array_equal(a.patch_embed.weight, c.patch_embed.weight)
