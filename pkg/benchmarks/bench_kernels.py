"""Benchmark the compiled vs numpy convolution kernels on training shapes.

The shapes below are the im2col/col2im calls a desk-scale training step
actually makes (batch 4, 64x64 inputs, base width 32): the generator's four
encoder stages plus the critic's first stage.  Both backends are also checked
for bit-identical outputs, since backend choice must never change results.

Run:  python benchmarks/bench_kernels.py [--repeats N] [--batch N]
"""

import argparse
import statistics
import time

import numpy as np

from swincolor import kernels

# (label, channels, height/width, kernel, stride, pad) per conv layer.
TRAINING_SHAPES = (
    ("generator enc1", 1, 64, 4, 2, 1),
    ("generator enc2", 48, 32, 4, 2, 1),
    ("generator enc3", 80, 16, 4, 2, 1),
    ("generator enc4", 144, 8, 4, 2, 1),
    ("critic stage1", 3, 64, 4, 2, 1),
)


def _time(fn, repeats):
    fn()  # warm up caches and any lazy allocation
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


def bench(batch, repeats):
    backends = ["numpy"]
    try:
        kernels.use_backend("native")
        backends.insert(0, "native")
    except ImportError:
        print("native extension not built; timing the numpy backend only\n")

    rng = np.random.default_rng(0)
    header = f"{'layer':<16} {'op':<7}" + "".join(f" {b:>12}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    print("-" * len(header))

    for label, c, hw, k, stride, pad in TRAINING_SHAPES:
        x = rng.standard_normal((batch, c, hw, hw)).astype(np.float32)
        cols_ref = kernels.numpy_backend.im2col(x, k, k, stride, pad)
        cols = np.ascontiguousarray(cols_ref)

        for op, call in (
            ("im2col", lambda mod: mod.im2col(x, k, k, stride, pad)),
            ("col2im", lambda mod: mod.col2im(cols, x.shape, k, k, stride, pad)),
        ):
            times = {}
            results = {}
            for name in backends:
                mod = kernels.use_backend(name)
                results[name] = call(mod)
                times[name] = _time(lambda: call(mod), repeats)
            if len(backends) == 2:
                if not np.array_equal(results["native"], results["numpy"]):
                    raise AssertionError(f"{label} {op}: backends disagree bit-for-bit")
                speedup = times["numpy"] / times["native"]
                cells = "".join(f" {times[b] * 1e3:>10.3f}ms" for b in backends)
                print(f"{label:<16} {op:<7}{cells} {speedup:>8.2f}x")
            else:
                print(f"{label:<16} {op:<7} {times['numpy'] * 1e3:>10.3f}ms")

    kernels.use_backend("native" if "native" in backends else "numpy")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=30,
                        help="timing repeats per op (median reported)")
    parser.add_argument("--batch", type=int, default=4, help="batch size for all shapes")
    args = parser.parse_args()
    bench(args.batch, args.repeats)


if __name__ == "__main__":
    main()
