"""Selective state-space engine, staged like the hardware datapath.

Stage 1 discretizes per token: abar = exp(delta * A), dbu = (delta * u) * B.
Stage 2 runs the diagonal recurrence h_t = h_{t-1} * abar_t + dbu_t from
h_0 = 0 and projects y_t[d] = sum_n h_t[d, n] * C_t[n], folding the state
index in strict ascending order (lane grouping never changes the fold, so
results are independent of the state tile width). Stage 3 fuses the skip and
gate: out_t = (y_t + u_t * d_skip) * z_t. Everything stays in f32 (f64 mode
exists for verification); tokens are consumed strictly in order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterator

import numpy as np

from . import _kernels
from .counters import CounterRecord, PerfCounters

EXP_TABLE_RANGE = (-16.0, 0.0)
EXP_TABLE_SEGMENTS = 256


@dataclass(frozen=True)
class SsmParams:
    u: np.ndarray  # [L, D] input sequence
    delta: np.ndarray  # [L, D] positive timestep (post SoftPlus)
    A: np.ndarray  # [D, N] continuous state matrix (negative for stability)
    B: np.ndarray  # [L, N] input projection per token
    C: np.ndarray  # [L, N] output projection per token
    d_skip: np.ndarray  # [D] skip path
    z: np.ndarray  # [L, D] gate multiplier, applied verbatim

    def dims(self) -> tuple[int, int, int]:
        L, D = self.u.shape
        N = self.A.shape[1]
        if self.delta.shape != (L, D) or self.z.shape != (L, D):
            raise ValueError("delta/z shape mismatch")
        if self.A.shape != (D, N) or self.B.shape != (L, N) or self.C.shape != (L, N):
            raise ValueError("A/B/C shape mismatch")
        if self.d_skip.shape != (D,):
            raise ValueError("d_skip shape mismatch")
        return L, D, N


@dataclass(frozen=True)
class SsmConfig:
    n_b: int = 16  # state lanes per tile; must divide N, affects grouping only
    exp_mode: str = "exact"  # exact | approx (segmented linear table)
    dtype: str = "f32"

    def __post_init__(self) -> None:
        if self.exp_mode not in ("exact", "approx"):
            raise ValueError(f"bad exp_mode {self.exp_mode!r}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"bad dtype {self.dtype!r}")
        if self.n_b < 1:
            raise ValueError("n_b must be >= 1")


@lru_cache(maxsize=4)
def _exp_knots(dtype: str) -> np.ndarray:
    lo, hi = EXP_TABLE_RANGE
    xs = np.linspace(lo, hi, EXP_TABLE_SEGMENTS + 1, dtype=np.float64)
    return np.exp(xs).astype(np.float32 if dtype == "f32" else np.float64)


def exp_approx(x: np.ndarray) -> np.ndarray:
    """Segmented linear-interpolation exp over [-16, 0], clamped outside."""
    x = np.asarray(x)
    dtype = "f32" if x.dtype == np.float32 else "f64"
    knots = _exp_knots(dtype)
    lo, hi = EXP_TABLE_RANGE
    scale = x.dtype.type(EXP_TABLE_SEGMENTS / (hi - lo))
    pos = (np.clip(x, lo, hi) - x.dtype.type(lo)) * scale
    idx = np.minimum(np.floor(pos), EXP_TABLE_SEGMENTS - 1).astype(np.int64)
    idx = np.maximum(idx, 0)
    frac = pos - idx.astype(x.dtype)
    return knots[idx] + frac * (knots[idx + 1] - knots[idx])


def discretize(
    delta: np.ndarray,
    u: np.ndarray,
    A: np.ndarray,
    B: np.ndarray,
    exp_mode: str = "exact",
    dtype: str = "f32",
) -> tuple[np.ndarray, np.ndarray]:
    """Stage 1: abar[t,d,n] = exp(delta[t,d] * A[d,n]), dbu[t,d,n] = delta*u*B."""
    nt = np.float32 if dtype == "f32" else np.float64
    delta = np.asarray(delta, nt)
    u = np.asarray(u, nt)
    A = np.asarray(A, nt)
    B = np.asarray(B, nt)
    da = delta[:, :, None] * A[None, :, :]
    abar = np.exp(da) if exp_mode == "exact" else exp_approx(da)
    dbu = (delta * u)[:, :, None] * B[:, None, :]
    return abar.astype(nt), dbu.astype(nt)


def state_update(h: np.ndarray, abar_t: np.ndarray, dbu_t: np.ndarray) -> np.ndarray:
    """Stage 2 recurrence step: elementwise h * abar + dbu."""
    return h * abar_t + dbu_t


def state_project(h: np.ndarray, c_t: np.ndarray, n_b: int = 16) -> np.ndarray:
    """Stage 2 projection: y[d] = sum_n h[d, n] * c[n], lanes folded tile by
    tile in ascending order (the chained fold makes the result independent of
    the tile width n_b)."""
    D, N = h.shape
    if N % n_b:
        raise ValueError(f"state tile width {n_b} does not divide N={N}")
    acc = np.zeros(D, h.dtype)
    for tile_start in range(0, N, n_b):
        for n in range(tile_start, tile_start + n_b):
            acc += h[:, n] * c_t[n]
    return acc


def fused_output(
    y: np.ndarray, u_t: np.ndarray, d_skip: np.ndarray, z_t: np.ndarray
) -> np.ndarray:
    """Stage 3: (y + u * d_skip) * z."""
    return (y + u_t * d_skip) * z_t


def iter_tokens(p: SsmParams) -> Iterator[tuple[np.ndarray, ...]]:
    """Per-token parameter stream in strictly ascending order."""
    L = p.u.shape[0]
    for t in range(L):
        yield p.u[t], p.delta[t], p.B[t], p.C[t], p.z[t]


def _check_finite(out: np.ndarray) -> None:
    bad = ~np.isfinite(out)
    if bad.any():
        t, d = map(int, np.argwhere(bad)[0])
        raise FloatingPointError(
            f"non-finite SSM output at token {t}, channel {d}"
        )


def ssm_counters(layer: str, L: int, D: int, N: int) -> CounterRecord:
    return CounterRecord(
        layer=layer,
        engine="ssm",
        tokens=L,
        state_updates=L * D * N,
        macs=2 * L * D * N + 2 * L * D,
    )


def ssm_forward(
    p: SsmParams,
    cfg: SsmConfig = SsmConfig(),
    counters: PerfCounters | None = None,
    layer: str = "ssm",
    backend: str | None = None,
) -> np.ndarray:
    """Full three-stage pass; output dtype follows cfg.dtype."""
    L, D, N = p.dims()
    if N % cfg.n_b:
        raise ValueError(f"state tile width {cfg.n_b} does not divide N={N}")
    nt = np.float32 if cfg.dtype == "f32" else np.float64
    abar, dbu = discretize(p.delta, p.u, p.A, p.B, cfg.exp_mode, cfg.dtype)
    y = _kernels.ssm_scan(abar, dbu, np.asarray(p.C, nt), cfg.dtype, backend)
    out = (y + np.asarray(p.u, nt) * np.asarray(p.d_skip, nt)) * np.asarray(p.z, nt)
    _check_finite(out)
    if counters is not None:
        counters.add(ssm_counters(layer, L, D, N))
    return out


def ssm_forward_reference(p: SsmParams, cfg: SsmConfig = SsmConfig()) -> np.ndarray:
    """Micro-op composition consuming the token stream once, in order.

    Matches ssm_forward bit-for-bit in either dtype (same op order per element).
    """
    L, D, N = p.dims()
    nt = np.float32 if cfg.dtype == "f32" else np.float64
    abar, dbu = discretize(p.delta, p.u, p.A, p.B, cfg.exp_mode, cfg.dtype)
    h = np.zeros((D, N), nt)
    out = np.empty((L, D), nt)
    for t, (u_t, _delta_t, _b_t, c_t, z_t) in enumerate(iter_tokens(p)):
        h = state_update(h, abar[t], dbu[t])
        y_t = state_project(h, np.asarray(c_t, nt), cfg.n_b)
        out[t] = fused_output(y_t, np.asarray(u_t, nt), np.asarray(p.d_skip, nt), np.asarray(z_t, nt))
    _check_finite(out)
    return out


def ssm_scan_oracle(
    p: SsmParams, cfg: SsmConfig = SsmConfig()
) -> np.ndarray:
    """Same recurrence via a parallel-prefix (doubling) scan over (abar, dbu)
    pairs; an independent oracle for the sequential engines."""
    L, D, N = p.dims()
    nt = np.float32 if cfg.dtype == "f32" else np.float64
    a, b = discretize(p.delta, p.u, p.A, p.B, cfg.exp_mode, cfg.dtype)
    step = 1
    while step < L:
        nb = b.copy()
        na = a.copy()
        nb[step:] = b[step:] + a[step:] * b[:-step]
        na[step:] = a[step:] * a[:-step]
        a, b = na, nb
        step *= 2
    y = np.einsum("ldn,ln->ld", b, np.asarray(p.C, nt))
    return ((y + np.asarray(p.u, nt) * np.asarray(p.d_skip, nt)) * np.asarray(p.z, nt)).astype(nt)
