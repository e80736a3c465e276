"""Compare the compiled and numpy kernel backends on LeNet-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 20] [--batch 128]

Prints the median time per call for each kernel and for one full
forward/backward pass of LeNet, plus the speedup of the compiled backend.
"""

import argparse
import statistics
import timeit

import numpy as np

from unipert import kernels, nn


def _median_ms(fn, repeat):
    times = timeit.repeat(fn, number=1, repeat=repeat)
    return 1e3 * statistics.median(times)


def workloads(batch, rng):
    x1 = rng.random((batch, 1, 28, 28)).astype(np.float32)
    x2 = rng.standard_normal((batch, 16, 12, 12)).astype(np.float32)
    p1 = rng.standard_normal((batch, 16, 24, 24)).astype(np.float32)
    cols1 = rng.standard_normal((batch * 24 * 24, 25)).astype(np.float32)
    cols2 = rng.standard_normal((batch * 8 * 8, 16 * 25)).astype(np.float32)
    _, idx = kernels._pykernels.maxpool2x2_forward(p1)
    dpool = rng.standard_normal((batch, 16, 12, 12)).astype(np.float32)
    return {
        "im2col conv1": lambda k: k.im2col(x1, 5, 1),
        "im2col conv2": lambda k: k.im2col(x2, 5, 1),
        "col2im conv1": lambda k: k.col2im(cols1, batch, 1, 28, 28, 5, 1),
        "col2im conv2": lambda k: k.col2im(cols2, batch, 16, 12, 12, 5, 1),
        "maxpool fwd": lambda k: k.maxpool2x2_forward(p1),
        "maxpool bwd": lambda k: k.maxpool2x2_backward(dpool, idx),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=128)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available")
    names = list(backends)
    print(f"{'workload':<22}" + "".join(f"{n + ' ms':>14}" for n in names) + f"{'speedup':>10}")

    def row(label, timings):
        speed = timings["python"] / timings["cython"] if "cython" in timings else float("nan")
        print(f"{label:<22}" + "".join(f"{timings[n]:>14.3f}" for n in names) + f"{speed:>9.2f}x")

    for label, fn in workloads(args.batch, rng).items():
        row(label, {n: _median_ms(lambda: fn(backends[n]), args.repeat) for n in names})

    model = nn.lenet(0)
    x = rng.random((args.batch, 1, 28, 28)).astype(np.float32)
    y = rng.integers(0, 10, args.batch)
    timings = {}
    for n in names:
        kernels._impl = backends[n]
        timings[n] = _median_ms(lambda: nn.value_and_grad(model, x, y), max(3, args.repeat // 4))
    row("lenet fwd+bwd", timings)


if __name__ == "__main__":
    main()
