"""Oracle-equivalence suite runnable from the CLI and from tests.

Each check recomputes the engine result along an independent route (exact
integer sums via int64 einsum, doubling scan, brute-force nearest level) and
compares at zero or stated tolerance. Checks return (name, ok, detail);
failures carry layer/element coordinates so a corrupted weight stream is
traceable to the first wrong nibble.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .codebook import ApotCodebook, default_codebook
from .config import ModelConfig
from .counters import PerfCounters
from .linear import (
    ActOffsetLut,
    TileConfig,
    apply_activation_lut,
    codes_from_blob,
    exact_activation,
    get_activation_lut,
    linear_counters,
    linear_forward_quantized,
    precompute_lut,
)
from .packing import PackedWeightBlob, pack_weights, unpack_weights
from .quant import (
    ActQuantConfig,
    QuantizedWeights,
    nearest_level_index,
    quantize_activations,
    split_code,
)
from .ssm import SsmConfig, SsmParams, ssm_forward, ssm_scan_oracle


@dataclass(frozen=True)
class CheckResult:
    name: str
    ok: bool
    detail: str


def linear_oracle(
    x: np.ndarray,
    qw: QuantizedWeights,
    bias: np.ndarray | None,
    activation: str,
    tile_cfg: TileConfig,
    act_cfg: ActQuantConfig | None = None,
    static_scales: np.ndarray | None = None,
    act_lut: ActOffsetLut | None = None,
) -> np.ndarray:
    """Staged reference for the LUT engine: INT8 quantize, exact int64 block
    sums over the whole layer at once, then the engine's f32 combine order
    (ascending blocks, fused act-scale x 2^-F multiplier, bias, activation)."""
    act_cfg = act_cfg or ActQuantConfig()
    q, act_scales = quantize_activations(x, act_cfg, static_scales)
    codes = qw.codes
    sign = (codes >> qw.codebook.magnitude_bits).astype(np.int64)
    mag = (codes & ((1 << qw.codebook.magnitude_bits) - 1)).astype(np.int64)
    levels = np.asarray(qw.codebook.levels_int(tile_cfg.preshift), np.int64)
    wint = levels[mag] * (1 - 2 * sign)  # [out, in_pad]
    L = q.shape[0]
    in_pad = codes.shape[1]
    qi = np.zeros((L, in_pad), np.int64)
    qi[:, : q.shape[1]] = q.astype(np.int64)
    B = qw.block_size
    n_blocks = in_pad // B
    bsums = np.einsum(
        "lkb,okb->lok", qi.reshape(L, n_blocks, B), wint.reshape(-1, n_blocks, B)
    )  # [L, out, block], exact in int64
    acc = np.zeros((L, codes.shape[0]), np.float32)
    for b in range(n_blocks):
        acc += bsums[:, :, b].astype(np.float32) * qw.scales[None, :, b]
    deq = act_scales.astype(np.float32) * np.float32(2.0 ** -tile_cfg.preshift)
    out = acc[:, : qw.out_dim] * deq[:, None]
    if bias is not None:
        out = out + bias.astype(np.float32)
    if activation != "none":
        out = apply_activation_lut(act_lut, out) if act_lut is not None else exact_activation(activation, out)
    return out


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    denom = max(float(np.max(np.abs(want))), 1e-30)
    return float(np.max(np.abs(got - want))) / denom


def _first_mismatch(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    idx = np.argwhere(a != b)
    return tuple(int(v) for v in idx[0])


def check_codebook() -> CheckResult:
    cb = default_codebook(4)
    want = [0.0, 1 / 16, 1 / 8, 1 / 16 + 1 / 8, 1 / 4, 1 / 4 + 1 / 8, 1 / 2, 1 / 2 + 1 / 8]
    if list(cb.levels) != want:
        return CheckResult("codebook-levels", False, f"levels {list(cb.levels)} != {want}")
    for idx, level in enumerate(cb.levels):
        code_pos = idx
        code_neg = (1 << cb.magnitude_bits) | idx
        for code, s in ((code_pos, 1.0), (code_neg, -1.0)):
            mag, sign = split_code(np.asarray(code), cb)
            val = cb.levels[int(mag)] * (1.0 if int(sign) == 0 else -1.0)
            if val != s * level:
                return CheckResult("codebook-levels", False, f"code {code} decodes to {val}")
    return CheckResult("codebook-levels", True, "8 levels exact, sign-magnitude codes round-trip")


def check_preshift(preshift: int = 8) -> CheckResult:
    """Exhaustive: every INT8 activation x every level, table entry == x*level*2^F."""
    cb = default_codebook(4)
    levels = cb.levels_int(preshift)
    n = 0
    for x in range(-127, 128):
        lut = precompute_lut(x, cb, preshift)
        for m, lv in enumerate(levels):
            if lut[m] != x * lv:
                return CheckResult(
                    "preshift-exact", False, f"x={x} level_idx={m}: {lut[m]} != {x * lv}"
                )
            n += 1
    return CheckResult("preshift-exact", True, f"{n} shift-add products exact")


def check_lut_gemm(n_layers: int = 25, seed: int = 0, tiles: tuple[int, ...] = (16, 32, 64)) -> CheckResult:
    rng = np.random.default_rng(seed)
    cb = default_codebook(4)
    shapes = [(192, 384)] + [
        (int(rng.integers(1, 300)), int(rng.integers(1, 300))) for _ in range(n_layers - 1)
    ]
    checked = 0
    for li, (in_dim, out_dim) in enumerate(shapes):
        w = rng.normal(0, 0.5, (out_dim, in_dim)).astype(np.float32)
        x = rng.normal(0, 2.0, (int(rng.integers(1, 9)), in_dim)).astype(np.float32)
        bias = rng.normal(0, 0.1, out_dim).astype(np.float32) if li % 2 else None
        act = ("none", "silu", "softplus")[li % 3]
        for tile in tiles:
            block = tile if li % 2 else min(tile, 16)
            qw = QuantizedWeights.from_float(w, block, cb)
            tc = TileConfig(tile=tile, preshift=8)
            lut = get_activation_lut(act, 256, 8.0) if act != "none" else None
            got = linear_forward_quantized(x, qw, bias, act, tc, act_lut=lut)
            want = linear_oracle(x, qw, bias, act, tc, act_lut=lut)
            if not np.array_equal(got, want):
                t, o = _first_mismatch(got, want)
                return CheckResult(
                    "lut-gemm-exact",
                    False,
                    f"layer {li} ({in_dim}->{out_dim}) T={tile}: first mismatch token {t} out {o}",
                )
            checked += 1
    return CheckResult("lut-gemm-exact", True, f"{checked} layer/tile cases bit-exact vs staged oracle")


def check_scan(n_cases: int = 10, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        L = int(rng.integers(1, 513))
        D = int(rng.integers(1, 129))
        N = 16
        params = SsmParams(
            u=rng.normal(0, 1, (L, D)).astype(np.float32),
            delta=rng.uniform(1e-3, 0.2, (L, D)).astype(np.float32),
            A=-rng.uniform(0.2, 8, (D, N)).astype(np.float32),
            B=rng.normal(0, 1, (L, N)).astype(np.float32),
            C=rng.normal(0, 1, (L, N)).astype(np.float32),
            d_skip=rng.normal(0, 1, D).astype(np.float32),
            z=rng.normal(0, 1, (L, D)).astype(np.float32),
        )
        for dtype, tol in (("f32", 1e-5), ("f64", 1e-12)):
            cfg = SsmConfig(dtype=dtype)
            got = ssm_forward(params, cfg)
            want = ssm_scan_oracle(params, cfg)
            err = _rel_err(got, want)
            if err > tol:
                return CheckResult(
                    "scan-equivalence", False, f"case {case} L={L} D={D} {dtype}: rel {err:.2e} > {tol}"
                )
    return CheckResult("scan-equivalence", True, f"{n_cases} cases, recurrence == doubling scan (f32/f64)")


def check_pack_roundtrip(n_cases: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        out_dim = int(rng.integers(1, 200))
        in_dim = int(rng.integers(1, 200))
        tile = int(rng.choice((16, 32, 64)))
        codes = rng.integers(0, 16, (out_dim, in_dim), dtype=np.uint8)
        blob = pack_weights(codes, tile)
        back = unpack_weights(blob)
        if not np.array_equal(back, codes):
            r, c = _first_mismatch(back, codes)
            return CheckResult("pack-roundtrip", False, f"case {case}: first mismatch row {r} col {c}")
    return CheckResult("pack-roundtrip", True, f"{n_cases} random matrices round-trip through 256-bit words")


def check_quantizer(n_tokens: int = 2000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = (rng.normal(0, 3, (n_tokens, 64)) * rng.uniform(0.1, 10, (n_tokens, 1))).astype(np.float32)
    q, scales = quantize_activations(x, ActQuantConfig())
    err = np.abs(x.astype(np.float64) - q.astype(np.float64) * scales[:, None].astype(np.float64))
    bound = scales.astype(np.float64)[:, None] / 2
    if np.any(err > bound):
        t = int(np.argwhere(err > bound)[0][0])
        return CheckResult("act-quantizer", False, f"token {t}: roundtrip error exceeds scale/2")
    amax_hit = np.abs(q[np.arange(n_tokens), np.argmax(np.abs(x), axis=1)]) == 127
    if not np.all(amax_hit):
        t = int(np.argwhere(~amax_hit)[0][0])
        return CheckResult("act-quantizer", False, f"token {t}: absmax did not map to +-127")
    cb = default_codebook(4)
    vals = rng.uniform(0, 1, 4096)
    lv = np.asarray(cb.levels)
    got = nearest_level_index(vals, lv)
    for i, v in enumerate(vals):
        best = int(np.argmin(np.abs(lv - v)))
        if abs(lv[got[i]] - v) > abs(lv[best] - v):
            return CheckResult("act-quantizer", False, f"value {v}: level {int(got[i])} not nearest")
    return CheckResult("act-quantizer", True, f"{n_tokens} token round-trips and nearest-level picks hold")


def check_counters(n_cases: int = 50, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    for case in range(n_cases):
        tokens = int(rng.integers(1, 64))
        in_dim = int(rng.integers(1, 800))
        out_dim = int(rng.integers(1, 800))
        tile = int(rng.choice((16, 32, 64)))
        rec = linear_counters("probe", tokens, out_dim, in_dim, TileConfig(tile=tile, preshift=8))
        n_it = -(-in_dim // tile)
        n_ot = -(-out_dim // tile)
        if rec.tiles != tokens * n_it * n_ot or rec.lut_builds != tokens * n_it:
            return CheckResult(
                "counter-formulas",
                False,
                f"case {case} ({tokens}x{in_dim}->{out_dim}, T={tile}): {rec.tiles} tiles, {rec.lut_builds} builds",
            )
    return CheckResult("counter-formulas", True, f"{n_cases} shapes match the analytic tile/LUT-build counts")


def check_packed_model(
    tamper: Callable[[str, np.ndarray], np.ndarray] | None = None,
    seed: int = 0,
) -> CheckResult:
    """Quantize a small random model, pack, then prove the engine run from the
    unpacked stream matches the staged oracle layer by layer. `tamper` lets a
    fault-injection test corrupt a layer's word stream."""
    from .model import _named_linears, quantize_model, random_images, random_model

    cfg = ModelConfig(variant="tiny", d_model=64, depth=1, n_classes=16, calib_samples=2)
    fm = random_model(cfg, seed=seed)
    qm, _ = quantize_model(fm, random_images(2, 32, seed=seed + 1))
    rng = np.random.default_rng(seed + 2)
    tc = TileConfig(cfg.tile, cfg.preshift)
    for name, (layer, role) in _named_linears(qm).items():
        if role != "linear":
            continue
        blob = pack_weights(layer.qw.codes, tc.tile)
        words = blob.words.copy()
        if tamper is not None:
            words = tamper(name, words)
        blob = PackedWeightBlob(words=words, tile=blob.tile, out_dim=blob.out_dim, in_dim=blob.in_dim)
        codes = codes_from_blob(blob, layer.qw, tc)
        streamed = replace(layer.qw, codes=codes)
        x = rng.normal(0, 1, (3, layer.qw.in_dim)).astype(np.float32)
        got = linear_forward_quantized(x, streamed, layer.bias, "none", tc)
        want = linear_oracle(x, layer.qw, layer.bias, "none", tc)
        if not np.array_equal(got, want):
            t, o = _first_mismatch(got, want)
            return CheckResult(
                "packed-stream-gemm", False, f"layer {name}: mismatch at token {t}, output {o}"
            )
    return CheckResult("packed-stream-gemm", True, "engine on unpacked word streams matches oracle for every layer")


ALL_CHECKS: tuple[Callable[[], CheckResult], ...] = (
    check_codebook,
    check_preshift,
    check_lut_gemm,
    check_scan,
    check_pack_roundtrip,
    check_quantizer,
    check_counters,
    check_packed_model,
)


def run_selftest() -> list[CheckResult]:
    return [check() for check in ALL_CHECKS]
