"""Time the numba and numpy kernel backends side by side.

    python benchmarks/bench_kernels.py [--repeat 5]

Both backends are timed in one process by swapping ``kernels.ACTIVE``; the
numba column includes no compilation time (every kernel is warmed first).
"""
import argparse
import statistics
import time

import numpy as np

from drip import calibration, data, kernels, network, retention


def clock(fn, repeat):
    fn()  # warm-up: JIT compilation, caches
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(32, 6, 12, 12))
    w = rng.normal(size=(8, 6, 3, 3))
    b = rng.normal(size=8)
    g = rng.normal(size=(32, 8, 12, 12))
    pooled, arg = kernels.NUMPY["maxpool_forward"](x, 2, 2)
    gp = rng.normal(size=pooled.shape)
    scores = np.sort(rng.random(5000))
    ds = data.synth_blobs(4, 100, 12, 0)
    spec = network.default_spec(ds.input_shape, 4)
    model = network.train(spec, ds, 1, 0.05, seed=0)
    profile = calibration.build_profile(model, ds, 25, created_at="-")
    stream = ds.inputs[:200]
    return {
        "conv2d forward (32x6x12x12, 8 filters 3x3)": lambda: kernels.conv2d_forward(x, w, b, 1, 1),
        "conv2d backward": lambda: kernels.conv2d_backward(x, w, g, 1, 1),
        "maxpool forward 2x2": lambda: kernels.maxpool_forward(x, 2, 2),
        "maxpool backward 2x2": lambda: kernels.maxpool_backward(gp, arg, x.shape, 2, 2),
        "window std scan (n=5000, L=1250)": lambda: kernels.window_std_scan(scores, 1250),
        "train 400 items x 2 epochs": lambda: network.train(spec, ds, 2, 0.05, seed=0),
        "filter 200 items": lambda: retention.filter_stream(model, profile, stream),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = {"numpy": kernels.NUMPY}
    if kernels.HAS_NUMBA:
        backends["numba"] = kernels.NUMBA
    saved = kernels.ACTIVE
    table = {}
    try:
        for name, table_of_kernels in backends.items():
            kernels.ACTIVE = table_of_kernels
            for label, fn in cases().items():
                table.setdefault(label, {})[name] = clock(fn, args.repeat)
    finally:
        kernels.ACTIVE = saved
    width = max(len(k) for k in table)
    print(f"{'case'.ljust(width)}  " + "  ".join(f"{n:>10}" for n in backends) + "   numpy/numba")
    for label, row in table.items():
        cells = "  ".join(f"{1e3 * row[n]:>8.2f}ms" for n in backends)
        ratio = f"{row['numpy'] / row['numba']:>10.2f}x" if "numba" in row else ""
        print(f"{label.ljust(width)}  {cells}  {ratio}")


if __name__ == "__main__":
    main()
