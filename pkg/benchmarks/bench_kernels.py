"""Time the numba and pure-numpy kernel backends on model-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]

Each kernel is warmed up once per backend (numba compiles on first call)
and then timed as the best of ``--repeat`` runs.
"""

import argparse
import time

import numpy as np

from ddnn import kernels


def cases(batch, rng):
    x = rng.standard_normal((batch, 3, 32, 32)).astype(np.float32)
    w = rng.choice([-1.0, 1.0], (4, 3, 3, 3)).astype(np.float32)
    g = rng.standard_normal((batch, 4, 32, 32)).astype(np.float32)
    fm = rng.standard_normal((batch, 4, 32, 32)).astype(np.float32)
    pooled, idx = kernels.maxpool3x3s2_forward(fm)
    gp = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "conv3x3_forward": lambda: kernels.conv3x3_forward(x, w),
        "conv3x3_backward_input": lambda: kernels.conv3x3_backward_input(g, w),
        "conv3x3_backward_weight": lambda: kernels.conv3x3_backward_weight(x, g),
        "maxpool3x3s2_forward": lambda: kernels.maxpool3x3s2_forward(fm),
        "maxpool3x3s2_backward": lambda: kernels.maxpool3x3s2_backward(gp, idx, 32, 32),
    }


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run(repeat=5, batch=32, seed=0):
    """Return {kernel: {backend: seconds}}."""
    prev = kernels.get_backend()
    table = {}
    try:
        for backend in kernels.BACKENDS:
            kernels.set_backend(backend)
            for name, fn in cases(batch, np.random.default_rng(seed)).items():
                table.setdefault(name, {})[backend] = best_of(fn, repeat)
    finally:
        kernels.set_backend(prev)
    return table


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    args = ap.parse_args(argv)
    table = run(args.repeat, args.batch)
    print(f"{'kernel':<26}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}")
    for name, t in table.items():
        print(f"{name:<26}{t['numba'] * 1e3:>10.2f}{t['numpy'] * 1e3:>10.2f}{t['numpy'] / t['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
