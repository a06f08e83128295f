"""Pure-numpy kernels, bit-identical to the compiled core.

The integer work (LUT selects, per-block sums) is exact in both backends; the
f32 folds replicate the compiled loops' operation order: block terms fold in
ascending block order, the SSM projection folds in ascending state index.
numpy's pairwise `sum` would break that order, so folds are explicit loops
over the short axis with vectorized bodies.
"""

from __future__ import annotations

import numpy as np


def lut_gemm(
    q: np.ndarray,
    deq: np.ndarray,
    wint: np.ndarray,
    scales: np.ndarray,
    block: int,
    out: np.ndarray,
    row_start: int,
    row_stop: int,
) -> None:
    n_blocks = q.shape[1] // block
    qi = q[row_start:row_stop].astype(np.int64)
    w64 = wint.astype(np.int64)
    acc = np.zeros((qi.shape[0], wint.shape[0]), np.float32)
    for blk in range(n_blocks):
        seg = slice(blk * block, (blk + 1) * block)
        bsum = qi[:, seg] @ w64[:, seg].T  # exact integer block sums
        acc += bsum.astype(np.float32) * scales[None, :, blk]
    out[row_start:row_stop] = acc * deq[row_start:row_stop, None]


def ssm_scan_f32(
    abar: np.ndarray,
    dbu: np.ndarray,
    c: np.ndarray,
    y: np.ndarray,
    h: np.ndarray,
) -> None:
    L, _, N = abar.shape
    for t in range(L):
        np.multiply(h, abar[t], out=h)
        np.add(h, dbu[t], out=h)
        acc = np.zeros(h.shape[0], h.dtype)
        for n in range(N):
            acc += h[:, n] * c[t, n]
        y[t] = acc


ssm_scan_f64 = ssm_scan_f32  # dtype comes from the buffers, the op order is shared
