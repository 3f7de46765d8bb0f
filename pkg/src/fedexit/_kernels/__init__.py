"""Kernel backend selection.

The compiled Cython extension is preferred; the NumPy fallback is used when
the extension is missing. Set FEDEXIT_KERNELS=python or =cython to force one.
"""

import os

_choice = os.environ.get("FEDEXIT_KERNELS", "").strip().lower()
if _choice not in ("", "auto", "python", "cython"):
    raise ImportError(f"FEDEXIT_KERNELS must be 'python' or 'cython', got {_choice!r}")

if _choice == "python":
    from . import pykernels as _impl
elif _choice == "cython":
    from . import cykernels as _impl
else:
    try:
        from . import cykernels as _impl
    except ImportError:
        from . import pykernels as _impl

BACKEND = _impl.BACKEND
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
crc64 = _impl.crc64
