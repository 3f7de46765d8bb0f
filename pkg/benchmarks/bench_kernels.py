"""Compare the compiled kernels against the pure NumPy fallback.

Times each kernel on transformer-shaped inputs and checks that both backends
agree numerically. Run with: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fedexit._kernels import pykernels

try:
    from fedexit._kernels import cykernels
except ImportError:
    cykernels = None

SHAPES = {"small": (64, 32), "wide": (256, 384), "tall": (4096, 64)}
REPEATS = 50
AGREEMENT = {np.float32: 1e-5, np.float64: 1e-12}


def bench(fn, *args):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(REPEATS):
        out = fn(*args)
    dt = (time.perf_counter() - t0) / REPEATS
    return dt, out


def flatten(out):
    if isinstance(out, tuple):
        return np.concatenate([np.asarray(o).ravel() for o in out])
    return np.asarray(out).ravel()


def cases(rows, cols, dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(0, 2, (rows, cols)).astype(dtype)
    g = rng.normal(0, 1, (rows, cols)).astype(dtype)
    gamma = rng.normal(1, 0.1, cols).astype(dtype)
    beta = rng.normal(0, 0.1, cols).astype(dtype)
    y = pykernels.softmax_fwd(x)
    ln_y, mean, rstd = pykernels.layernorm_fwd(x, gamma, beta, 1e-5)
    return [
        ("gelu_fwd", (x,)),
        ("gelu_bwd", (x, g)),
        ("softmax_fwd", (x,)),
        ("softmax_bwd", (y, g)),
        ("layernorm_fwd", (x, gamma, beta, 1e-5)),
        ("layernorm_bwd", (x, g, gamma, mean, rstd)),
    ]


def main():
    if cykernels is None:
        print("compiled backend not available; showing python timings only")
    print(f"{'kernel':<16} {'shape':<12} {'dtype':<8} {'python':>10} {'cython':>10} "
          f"{'speedup':>8} {'max diff':>10}")
    failures = 0
    for label, (rows, cols) in SHAPES.items():
        for dtype in (np.float32, np.float64):
            for name, args in cases(rows, cols, dtype):
                t_py, out_py = bench(getattr(pykernels, name), *args)
                if cykernels is None:
                    print(f"{name:<16} {label:<12} {np.dtype(dtype).name:<8} "
                          f"{t_py * 1e6:>9.1f}u {'-':>10} {'-':>8} {'-':>10}")
                    continue
                t_cy, out_cy = bench(getattr(cykernels, name), *args)
                diff = float(np.max(np.abs(flatten(out_py) - flatten(out_cy))))
                scale = float(np.max(np.abs(flatten(out_py)))) or 1.0
                ok = diff <= AGREEMENT[dtype] * max(1.0, scale)
                if not ok:
                    failures += 1
                print(f"{name:<16} {label:<12} {np.dtype(dtype).name:<8} "
                      f"{t_py * 1e6:>9.1f}u {t_cy * 1e6:>9.1f}u "
                      f"{t_py / t_cy:>7.2f}x {diff:>10.2e}{'' if ok else '  MISMATCH'}")
    if failures:
        raise SystemExit(f"{failures} kernel comparisons disagreed")
    print("backends agree within tolerance")


if __name__ == "__main__":
    main()
