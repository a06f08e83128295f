import numpy as np
import pytest

from vimq.aux import (
    cls_index,
    conv_counters,
    conv_forward_quantized,
    conv_forward_reference,
    conv_windows,
    extract_cls,
    flip_tokens,
    im2col,
    insert_cls,
    normalize,
    patch_embed_reference,
    residual_add,
)
from vimq.codebook import default_codebook
from vimq.quant import QuantizedWeights, quantize_activations, split_code

CB = default_codebook(4)


def test_flip_is_an_involution():
    x = np.random.default_rng(0).normal(0, 1, (7, 4)).astype(np.float32)
    assert np.array_equal(flip_tokens(flip_tokens(x)), x)
    assert np.array_equal(flip_tokens(x)[0], x[-1])


def test_cls_index():
    assert cls_index(4, "middle") == 2
    assert cls_index(5, "middle") == 2
    assert cls_index(4, 0) == 0
    assert cls_index(4, 4) == 4
    with pytest.raises(ValueError, match="outside"):
        cls_index(4, 5)


@pytest.mark.parametrize("position", ["middle", 0, 3])
def test_insert_extract_cls_inverse(position):
    rng = np.random.default_rng(1)
    tokens = rng.normal(0, 1, (6, 5)).astype(np.float32)
    cls = rng.normal(0, 1, 5).astype(np.float32)
    seq = insert_cls(tokens, cls, position)
    assert seq.shape == (7, 5)
    rest, got = extract_cls(seq, position)
    assert np.array_equal(got, cls)
    assert np.array_equal(rest, tokens)


def test_residual_add_stays_f32():
    out = residual_add(np.ones(3, np.float64), np.ones(3, np.float64))
    assert out.dtype == np.float32
    assert out.tolist() == [2.0, 2.0, 2.0]


def test_rms_norm_matches_manual():
    rng = np.random.default_rng(2)
    x = rng.normal(0, 3, (4, 16)).astype(np.float32)
    gamma = rng.normal(1, 0.1, 16).astype(np.float32)
    got = normalize(x, "rms", gamma, eps=1e-5)
    x64 = x.astype(np.float64)
    want = (x64 / np.sqrt(np.mean(x64**2, axis=-1, keepdims=True) + 1e-5) * gamma).astype(np.float32)
    assert np.array_equal(got, want)


def test_layer_norm_matches_manual():
    rng = np.random.default_rng(3)
    x = rng.normal(2, 3, (4, 16)).astype(np.float32)
    gamma = rng.normal(1, 0.1, 16).astype(np.float32)
    beta = rng.normal(0, 0.5, 16).astype(np.float32)
    got = normalize(x, "layer", gamma, beta)
    x64 = x.astype(np.float64)
    mu = x64.mean(-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(-1, keepdims=True)
    want = ((x64 - mu) / np.sqrt(var + 1e-5) * gamma + beta).astype(np.float32)
    assert np.array_equal(got, want)
    with pytest.raises(ValueError, match="unknown norm"):
        normalize(x, "batch", gamma)


def test_im2col_feature_order():
    # feature order within a patch is (channel, y, x); patches in raster order
    img = np.arange(2 * 4 * 4, dtype=np.float32).reshape(2, 4, 4)
    cols = im2col(img, 2)
    assert cols.shape == (4, 8)
    want0 = [img[c, y, x] for c in range(2) for y in range(2) for x in range(2)]
    assert cols[0].tolist() == want0
    # patch 1 is the top-right 2x2 block
    want1 = [img[c, y, 2 + x] for c in range(2) for y in range(2) for x in range(2)]
    assert cols[1].tolist() == want1
    with pytest.raises(ValueError, match="divisible"):
        im2col(img, 3)
    with pytest.raises(ValueError, match="channels"):
        im2col(img[0], 2)


def test_patch_embed_is_im2col_plus_linear():
    rng = np.random.default_rng(4)
    img = rng.normal(0, 1, (3, 8, 8)).astype(np.float32)
    w = rng.normal(0, 0.1, (10, 3 * 16)).astype(np.float32)
    b = rng.normal(0, 0.1, 10).astype(np.float32)
    got = patch_embed_reference(img, w, b, 4)
    assert got.shape == (4, 10)
    manual = im2col(img, 4).astype(np.float64) @ w.T.astype(np.float64)
    assert np.allclose(got, manual.astype(np.float32) + b, rtol=0, atol=1e-6)


def test_conv_windows_left_padding():
    x = np.array([[1.0], [2.0], [3.0]], np.float32)
    win = conv_windows(x, 3)
    assert win.shape == (3, 3, 1)
    assert win[:, :, 0].tolist() == [[0, 0, 1], [0, 1, 2], [1, 2, 3]]


def test_conv_reference_tap_alignment():
    # filter selecting tap K-1 only is the identity (current token)
    rng = np.random.default_rng(5)
    x = rng.normal(0, 1, (6, 4)).astype(np.float32)
    w = np.zeros((4, 3), np.float32)
    w[:, 2] = 1.0
    assert np.array_equal(conv_forward_reference(x, w), x)
    # tap 0 selects the token K-1 steps back
    w_delay = np.zeros((4, 3), np.float32)
    w_delay[:, 0] = 1.0
    got = conv_forward_reference(x, w_delay)
    assert np.array_equal(got[2:], x[:-2])
    assert np.all(got[:2] == 0.0)


def test_conv_reference_matches_manual_loops():
    rng = np.random.default_rng(6)
    L, C, K = 9, 5, 4
    x = rng.normal(0, 1, (L, C)).astype(np.float32)
    w = rng.normal(0, 0.5, (C, K)).astype(np.float32)
    bias = rng.normal(0, 0.1, C).astype(np.float32)
    want = np.zeros((L, C), np.float32)
    for t in range(L):
        for c in range(C):
            acc = np.float64(0.0)
            for j in range(K):
                src = t - (K - 1) + j
                if src >= 0:
                    acc += np.float64(w[c, j]) * np.float64(x[src, c])
            want[t, c] = np.float32(acc)
    got = conv_forward_reference(x, w, bias)
    assert np.array_equal(got, want + bias)


def _conv_oracle(x, qw, bias, preshift=8):
    """Loop re-implementation of the quantized causal conv fold order."""
    C, K = qw.out_dim, qw.in_dim
    q, act_scales = quantize_activations(x)
    deq = act_scales.astype(np.float32) * np.float32(2.0**-preshift)
    mag, sign = split_code(qw.codes, qw.codebook)
    wint = qw.codebook.levels_int(preshift).astype(np.int64)[mag] * (1 - 2 * sign.astype(np.int64))
    L = x.shape[0]
    out = np.zeros((L, C), np.float32)
    for t in range(L):
        for c in range(C):
            acc = np.float32(0.0)
            for j in range(K):
                src = t - (K - 1) + j
                prod = int(q[src, c]) * int(wint[c, j]) if src >= 0 else 0
                d = deq[src] if src >= 0 else np.float32(0.0)
                acc = np.float32(acc + np.float32(np.float32(prod) * d))
            out[t, c] = np.float32(acc * qw.scales[c, 0])
    if bias is not None:
        out = out + bias
    return out


def test_conv_quantized_matches_loop_oracle():
    rng = np.random.default_rng(7)
    L, C, K = 7, 6, 4
    x = rng.normal(0, 1.5, (L, C)).astype(np.float32)
    w = rng.normal(0, 0.5, (C, K)).astype(np.float32)
    bias = rng.normal(0, 0.1, C).astype(np.float32)
    qw = QuantizedWeights.from_float(w, K, CB)
    got = conv_forward_quantized(x, qw, bias)
    assert np.array_equal(got, _conv_oracle(x, qw, bias))


def test_conv_quantized_close_to_float_reference():
    rng = np.random.default_rng(8)
    x = rng.normal(0, 1, (20, 8)).astype(np.float32)
    w = rng.normal(0, 0.5, (8, 4)).astype(np.float32)
    qw = QuantizedWeights.from_float(w, 4, CB)
    got = conv_forward_quantized(x, qw, None, "silu")
    ref = conv_forward_reference(x, qw.dequantize(), None, "silu")
    a, b = got.ravel().astype(np.float64), ref.ravel().astype(np.float64)
    cos = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    assert cos > 0.999


def test_conv_quantized_validation():
    w = np.ones((6, 4), np.float32)
    with pytest.raises(ValueError, match="per channel"):
        conv_forward_quantized(np.ones((3, 6), np.float32), QuantizedWeights.from_float(w, 2, CB))
    qw = QuantizedWeights.from_float(w, 4, CB)
    with pytest.raises(ValueError, match="expected"):
        conv_forward_quantized(np.ones((3, 5), np.float32), qw)


def test_conv_counters():
    rec = conv_counters("c", L=10, C=8, K=4)
    assert rec.macs == 10 * 8 * 4
    assert rec.pe_selects == 10 * 8 * 4
    assert rec.engine == "conv"
