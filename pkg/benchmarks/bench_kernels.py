"""Benchmark: compiled kernel core versus the numpy fallback.

Times the three hot loops (conv window gather, gradient scatter, bilinear
warp) and an end-to-end conv forward+backward step under each backend.

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from fineflow.kernels import _npk

try:
    from fineflow.kernels import _ck
except ImportError:
    _ck = None


def timeit(fn, repeats=20):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1000.0


def bench_backend(mod, x, dcols, src, matrix):
    n, c, h, w = x.shape
    out = {}
    out["im2col"] = timeit(lambda: mod.im2col(x, 3, 3, 1, 1, 1, h, w))
    out["col2im"] = timeit(lambda: mod.col2im(dcols, n, c, h, w, 3, 3, 1, 1, 1, h, w))
    out["warp_bilinear"] = timeit(lambda: mod.warp_bilinear(src, matrix, 64, 64, True))
    return out


def bench_conv_step(backend_name):
    """Forward + backward of one conv batch through the layer API."""
    import fineflow.kernels as kernels
    from fineflow.layers import conv2d
    from fineflow.tensor import GradTape, Tensor, backward, reduce

    mod = _ck if backend_name == "compiled" else _npk
    kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
    import fineflow.layers as layers_mod

    layers_mod.kernels.im2col = mod.im2col
    layers_mod.kernels.col2im = mod.col2im

    rs = np.random.default_rng(0)
    x = Tensor(rs.normal(size=(32, 8, 32, 32)), requires_grad=True)
    k = Tensor(rs.normal(size=(16, 8, 3, 3)), requires_grad=True)
    b = Tensor(rs.normal(size=(16,)), requires_grad=True)

    def step():
        with GradTape() as tape:
            loss = reduce("sum", conv2d(x, k, b, 1, "same"))
        backward(loss, tape)
        for t in (x, k, b):
            t.zero_grad()

    return timeit(step, repeats=10)


def main():
    rs = np.random.default_rng(7)
    x = np.ascontiguousarray(rs.normal(size=(32, 8, 32, 32)))
    dcols = np.ascontiguousarray(rs.normal(size=(32, 8 * 9, 32 * 32)))
    src = np.ascontiguousarray(rs.uniform(0, 255, size=(3, 64, 64)))
    matrix = np.ascontiguousarray(
        np.array([[0.97, 0.12, 1.4], [-0.12, 0.97, -0.8]], dtype=np.float64)
    )

    results = {"numpy": bench_backend(_npk, x, dcols, src, matrix)}
    if _ck is not None:
        results["compiled"] = bench_backend(_ck, x, dcols, src, matrix)

    print(f"{'kernel':<16}", end="")
    for name in results:
        print(f"{name + ' (ms)':>16}", end="")
    if len(results) == 2:
        print(f"{'speedup':>10}", end="")
    print()
    for kernel in ("im2col", "col2im", "warp_bilinear"):
        print(f"{kernel:<16}", end="")
        for name in results:
            print(f"{results[name][kernel]:>16.3f}", end="")
        if len(results) == 2:
            ratio = results["numpy"][kernel] / results["compiled"][kernel]
            print(f"{ratio:>9.2f}x", end="")
        print()

    steps = {"numpy": bench_conv_step("numpy")}
    if _ck is not None:
        steps["compiled"] = bench_conv_step("compiled")
    print(f"{'conv fwd+bwd':<16}", end="")
    for name in steps:
        print(f"{steps[name]:>16.3f}", end="")
    if len(steps) == 2:
        print(f"{steps['numpy'] / steps['compiled']:>9.2f}x", end="")
    print()
    if _ck is None:
        print("\ncompiled core not built; showing numpy fallback only")


if __name__ == "__main__":
    main()
