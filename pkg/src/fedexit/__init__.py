"""Desk-scale federated learning with a frozen transformer backbone,
history-accumulator adapters, and anytime early-exit inference."""

from ._kernels import BACKEND as kernel_backend

__all__ = ["kernel_backend"]
__version__ = "0.1.0"
