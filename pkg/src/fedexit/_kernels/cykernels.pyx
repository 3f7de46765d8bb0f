# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels: GELU, rowwise softmax and layer norm (forward and
backward) over f32/f64, plus CRC-64/XZ. Accumulations run in double."""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport erf, exp, sqrt
from libc.stdint cimport uint8_t, uint64_t

BACKEND = "cython"

ctypedef fused floating:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline object _empty_like(floating[:, ::1] x, Py_ssize_t rows, Py_ssize_t cols):
    if floating is float:
        return np.empty((rows, cols), dtype=np.float32)
    else:
        return np.empty((rows, cols), dtype=np.float64)


def gelu_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = _empty_like(x, n, d)
    cdef floating[:, ::1] out = out_arr
    cdef double v
    for i in range(n):
        for j in range(d):
            v = <double> x[i, j]
            out[i, j] = <floating> (0.5 * v * (1.0 + erf(v * INV_SQRT2)))
    return out_arr


def gelu_bwd(floating[:, ::1] g, floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = _empty_like(x, n, d)
    cdef floating[:, ::1] out = out_arr
    cdef double v, cdf, pdf
    for i in range(n):
        for j in range(d):
            v = <double> x[i, j]
            cdf = 0.5 * (1.0 + erf(v * INV_SQRT2))
            pdf = INV_SQRT_2PI * exp(-0.5 * v * v)
            out[i, j] = <floating> ((<double> g[i, j]) * (cdf + v * pdf))
    return out_arr


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out_arr = _empty_like(x, n, d)
    cdef floating[:, ::1] out = out_arr
    cdef double m, s, e
    for i in range(n):
        m = <double> x[i, 0]
        for j in range(1, d):
            if (<double> x[i, j]) > m:
                m = <double> x[i, j]
        s = 0.0
        for j in range(d):
            e = exp((<double> x[i, j]) - m)
            out[i, j] = <floating> e
            s += e
        for j in range(d):
            out[i, j] = <floating> ((<double> out[i, j]) / s)
    return out_arr


def softmax_bwd(floating[:, ::1] g, floating[:, ::1] y):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    out_arr = _empty_like(y, n, d)
    cdef floating[:, ::1] out = out_arr
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += (<double> g[i, j]) * (<double> y[i, j])
        for j in range(d):
            out[i, j] = <floating> ((<double> y[i, j]) * ((<double> g[i, j]) - dot))
    return out_arr


def layernorm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = _empty_like(x, n, d)
    if floating is float:
        mean_arr = np.empty(n, dtype=np.float32)
        rstd_arr = np.empty(n, dtype=np.float32)
    else:
        mean_arr = np.empty(n, dtype=np.float64)
        rstd_arr = np.empty(n, dtype=np.float64)
    cdef floating[:, ::1] y = y_arr
    cdef floating[::1] mean = mean_arr, rstd = rstd_arr
    cdef double mu, var, r, xc
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += <double> x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            xc = (<double> x[i, j]) - mu
            var += xc * xc
        var /= d
        r = 1.0 / sqrt(var + eps)
        mean[i] = <floating> mu
        rstd[i] = <floating> r
        for j in range(d):
            y[i, j] = <floating> ((((<double> x[i, j]) - mu) * r) * (<double> gamma[j]) + (<double> beta[j]))
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(floating[:, ::1] g, floating[:, ::1] x, floating[::1] gamma,
                  floating[::1] mean, floating[::1] rstd):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dx_arr = _empty_like(x, n, d)
    dgamma_arr = np.zeros(d, dtype=np.float64)
    dbeta_arr = np.zeros(d, dtype=np.float64)
    cdef floating[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr, dbeta = dbeta_arr
    cdef double mu, r, xh, gx, m1, m2
    for i in range(n):
        mu = <double> mean[i]
        r = <double> rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = ((<double> x[i, j]) - mu) * r
            gx = (<double> g[i, j]) * (<double> gamma[j])
            m1 += gx
            m2 += gx * xh
            dgamma[j] += (<double> g[i, j]) * xh
            dbeta[j] += <double> g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = ((<double> x[i, j]) - mu) * r
            gx = (<double> g[i, j]) * (<double> gamma[j])
            dx[i, j] = <floating> ((gx - m1 - xh * m2) * r)
    if floating is float:
        return dx_arr, dgamma_arr.astype(np.float32), dbeta_arr.astype(np.float32)
    return dx_arr, dgamma_arr, dbeta_arr


cdef uint64_t CRC64_POLY = 0xC96C5795D7870F42
cdef uint64_t[256] CRC_TABLE

cdef void _init_crc_table():
    cdef uint64_t c
    cdef int i, k
    for i in range(256):
        c = <uint64_t> i
        for k in range(8):
            if c & 1:
                c = (c >> 1) ^ CRC64_POLY
            else:
                c = c >> 1
        CRC_TABLE[i] = c

_init_crc_table()


def crc64(data):
    """CRC-64/XZ of a bytes-like object."""
    cdef const uint8_t[::1] buf = memoryview(bytes(data) if isinstance(data, bytearray) else data).cast("B")
    cdef uint64_t crc = 0xFFFFFFFFFFFFFFFF
    cdef Py_ssize_t i, n = buf.shape[0]
    for i in range(n):
        crc = CRC_TABLE[(crc ^ buf[i]) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF
