"""Hot-kernel backend selection.

The compiled Cython core is used when importable; the numpy fallback
implements the same numeric contract and is selected automatically otherwise.
Set VIMQ_FORCE_FALLBACK=1 to ignore the compiled core, VIMQ_THREADS=n to let
the compiled LUT-GEMM split token rows across threads (outputs are row-disjoint,
so the result is identical at any thread count).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import fallback

try:
    from . import _core  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover - depends on the build environment
    _core = None

HAVE_COMPILED = _core is not None


def active_backend() -> str:
    forced = os.environ.get("VIMQ_FORCE_FALLBACK", "") not in ("", "0")
    return "compiled" if HAVE_COMPILED and not forced else "fallback"


def _impl(backend: str | None):
    name = backend or active_backend()
    if name == "compiled":
        if _core is None:
            raise RuntimeError("compiled kernels are not available")
        return _core
    if name == "fallback":
        return fallback
    raise ValueError(f"unknown backend {name!r}")


def thread_count() -> int:
    raw = os.environ.get("VIMQ_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VIMQ_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(n, os.cpu_count() or 1))


def lut_gemm(
    q: np.ndarray,
    deq: np.ndarray,
    codes: np.ndarray,
    scales: np.ndarray,
    levels_int: np.ndarray,
    mag_bits: int,
    block: int,
    tile: int,
    backend: str | None = None,
) -> np.ndarray:
    impl = _impl(backend)
    L = q.shape[0]
    out = np.empty((L, codes.shape[0]), np.float32)
    if L == 0 or codes.shape[0] == 0:
        return out
    # materialize the stream's LUT selections once per layer: sign * level * 2^F
    mag = codes & ((1 << mag_bits) - 1)
    sign = (codes >> mag_bits).astype(np.int32)
    wint = np.ascontiguousarray(
        np.asarray(levels_int, np.int32)[mag] * (1 - 2 * sign), np.int32
    )
    threads = thread_count()
    if impl is not fallback and threads > 1 and L >= 2 * threads:
        bounds = np.linspace(0, L, threads + 1, dtype=np.int64)
        with ThreadPoolExecutor(threads) as pool:
            list(
                pool.map(
                    lambda se: impl.lut_gemm(
                        q, deq, wint, scales, block, out, int(se[0]), int(se[1])
                    ),
                    zip(bounds[:-1], bounds[1:]),
                )
            )
    else:
        impl.lut_gemm(q, deq, wint, scales, block, out, 0, L)
    return out


def ssm_scan(
    abar: np.ndarray,
    dbu: np.ndarray,
    c: np.ndarray,
    dtype: str = "f32",
    backend: str | None = None,
) -> np.ndarray:
    if dtype not in ("f32", "f64"):
        raise ValueError(f"bad dtype {dtype!r}")
    impl = _impl(backend)
    nt = np.float32 if dtype == "f32" else np.float64
    abar = np.ascontiguousarray(abar, nt)
    dbu = np.ascontiguousarray(dbu, nt)
    c = np.ascontiguousarray(c, nt)
    L, D, N = abar.shape
    y = np.empty((L, D), nt)
    h = np.zeros((D, N), nt)
    if L == 0:
        return y
    fn = impl.ssm_scan_f32 if dtype == "f32" else impl.ssm_scan_f64
    fn(abar, dbu, c, y, h)
    return y
