# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: the integer LUT-GEMM core and the sequential SSM scan.

Numeric contract (shared with the numpy fallback, bit-for-bit):
  - per-block sums are exact integers (i32, caller enforces the overflow guard)
  - block sums convert to f32 and fold into the accumulator in ascending block
    order, tiles walked row-tile-major
  - the fused activation dequant multiplier is applied once per output element
  - SSM state updates h = h*abar + dbu and the projection fold over the state
    index run in strict ascending order, no FMA contraction
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def lut_gemm(const signed char[:, ::1] q,
             const float[::1] deq,
             const int[:, ::1] wint,
             const float[:, ::1] scales,
             int block,
             float[:, ::1] out,
             Py_ssize_t row_start, Py_ssize_t row_stop):
    """Quantized linear core over token rows [row_start, row_stop).

    q: i8 [L, in_pad]; wint: sign * level * 2^F as i32 [out_pad, in_pad]
    (the caller materializes the code stream's LUT selections once per layer);
    scales f32 [out_pad, in_pad/block]. Writes f32 [L, out_pad] pre-bias
    outputs; deq[t] is the fused act_scale * 2^-F multiplier. Per-block sums
    are exact i32 (caller enforces the overflow guard); the f32 fold runs in
    ascending block order, identical to the per-tile walk since tile stride
    is a block multiple.
    """
    cdef Py_ssize_t IP = q.shape[1]
    cdef Py_ssize_t OP = wint.shape[0]
    cdef Py_ssize_t n_blocks = IP // block
    cdef Py_ssize_t t, o, blk, ii, base
    cdef int s32
    cdef float accf
    cdef const signed char* qr
    cdef const int* wr

    with nogil:
        for t in range(row_start, row_stop):
            qr = &q[t, 0]
            for o in range(OP):
                wr = &wint[o, 0]
                accf = 0.0
                for blk in range(n_blocks):
                    base = blk * block
                    s32 = 0
                    for ii in range(block):
                        s32 += (<int> qr[base + ii]) * wr[base + ii]
                    accf = accf + (<float> s32) * scales[o, blk]
                out[t, o] = accf * deq[t]
    return None


def ssm_scan_f32(const float[:, :, ::1] abar,
                 const float[:, :, ::1] dbu,
                 const float[:, ::1] c,
                 float[:, ::1] y,
                 float[:, ::1] h):
    """h_t = h_{t-1} * abar_t + dbu_t; y_t[d] = sum_n h_t[d, n] * c_t[n]."""
    cdef Py_ssize_t L = abar.shape[0]
    cdef Py_ssize_t D = abar.shape[1]
    cdef Py_ssize_t N = abar.shape[2]
    cdef Py_ssize_t t, d, n
    cdef float acc
    with nogil:
        for t in range(L):
            for d in range(D):
                acc = 0.0
                for n in range(N):
                    h[d, n] = h[d, n] * abar[t, d, n] + dbu[t, d, n]
                    acc = acc + h[d, n] * c[t, n]
                y[t, d] = acc
    return None


def ssm_scan_f64(const double[:, :, ::1] abar,
                 const double[:, :, ::1] dbu,
                 const double[:, ::1] c,
                 double[:, ::1] y,
                 double[:, ::1] h):
    cdef Py_ssize_t L = abar.shape[0]
    cdef Py_ssize_t D = abar.shape[1]
    cdef Py_ssize_t N = abar.shape[2]
    cdef Py_ssize_t t, d, n
    cdef double acc
    with nogil:
        for t in range(L):
            for d in range(D):
                acc = 0.0
                for n in range(N):
                    h[d, n] = h[d, n] * abar[t, d, n] + dbu[t, d, n]
                    acc = acc + h[d, n] * c[t, n]
                y[t, d] = acc
    return None
