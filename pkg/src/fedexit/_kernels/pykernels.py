"""Pure NumPy/SciPy implementations of the numeric kernels.

Fallback backend when the compiled extension is unavailable. All rowwise
kernels take C-contiguous 2-D float32/float64 arrays and preserve dtype.
"""

import numpy as np
from scipy.special import erf

BACKEND = "python"

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x):
    """0.5 * x * (1 + erf(x / sqrt(2)))."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(g, x):
    """d/dx of exact GELU: Phi(x) + x * phi(x), times incoming grad."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def softmax_fwd(x):
    """Rowwise softmax with max subtraction."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(g, y):
    """dx = y * (g - sum(g * y)) per row."""
    dot = (g * y).sum(axis=1, keepdims=True)
    return y * (g - dot)


def layernorm_fwd(x, gamma, beta, eps):
    """Rowwise layer norm. Returns (y, mean, rstd); mean/rstd are saved for backward."""
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = np.mean(xc * xc, axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = xc * rstd[:, None] * gamma + beta
    return y, mean, rstd


def layernorm_bwd(g, x, gamma, mean, rstd):
    """dx, dgamma, dbeta for layernorm_fwd."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgamma = (g * xhat).sum(axis=0)
    dbeta = g.sum(axis=0)
    gx = g * gamma
    m1 = gx.mean(axis=1, keepdims=True)
    m2 = (gx * xhat).mean(axis=1, keepdims=True)
    dx = (gx - m1 - xhat * m2) * rstd[:, None]
    return dx, dgamma, dbeta


# CRC-64/XZ: reflected poly 0xC96C5795D7870F42, init/xorout all ones.
_CRC64_POLY = 0xC96C5795D7870F42


def _crc64_table():
    table = []
    for i in range(256):
        c = i
        for _ in range(8):
            c = (c >> 1) ^ _CRC64_POLY if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _crc64_table()


def crc64(data):
    """CRC-64/XZ of a bytes-like object."""
    crc = 0xFFFFFFFFFFFFFFFF
    for b in bytes(data):
        crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF
