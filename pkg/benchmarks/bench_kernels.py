"""Time the compiled and numpy kernel backends on the experiments' shapes.

    python3 benchmarks/bench_kernels.py [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from backvis import kernels
from backvis.tensor import PatchPlan

CASES = [
    # name, input dims, filter dims, stride, padding, batch
    ("conv 7x7/2 on 64x64x3", (64, 64, 3), (7, 7), 2, "valid", 1),
    ("conv 3x3 same on 64x64x3", (64, 64, 3), (3, 3), 1, "same", 1),
    ("conv 3x3 same on 32x32x8, batch 32", (32, 32, 8), (3, 3), 1, "same", 32),
]

POOLS = [
    ("pool 2 on 29x29x256", (1, 29, 29, 256)),
    ("pool 2 on 32x32x8, batch 32", (32, 32, 32, 8)),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    rng = np.random.default_rng(0)
    print(f"{'kernel':48s}" + "".join(f"{b:>12s}" for b in backends) + "   speedup")
    for name, dims, fdims, stride, pad, batch in CASES:
        plan = PatchPlan.build(dims, fdims, stride, pad)
        x = rng.standard_normal((batch, plan.input_size))
        rows = rng.standard_normal((batch, plan.patch_count, plan.patch_size))
        for op, call in (("gather", lambda b: kernels.gather_patches(x, plan.index, backend=b)),
                         ("scatter", lambda b: kernels.scatter_patches(rows, plan.index,
                                                                       plan.input_size, backend=b))):
            times = [bench(lambda b=b: call(b), args.repeat) for b in backends]
            _report(f"{op} {name}", times)
    for name, shape in POOLS:
        x = rng.standard_normal(shape)
        out, arg = kernels.maxpool_forward(x, (2, 2), (2, 2))
        g = rng.standard_normal(out.shape)
        times = [bench(lambda b=b: kernels.maxpool_forward(x, (2, 2), (2, 2), backend=b), args.repeat)
                 for b in backends]
        _report(f"maxpool fwd {name}", times)
        times = [bench(lambda b=b: kernels.maxpool_backward(g, arg, shape[1:], backend=b), args.repeat)
                 for b in backends]
        _report(f"maxpool bwd {name}", times)


def _report(label, times):
    cells = "".join(f"{t * 1e3:10.2f}ms" for t in times)
    speed = f"{times[-1] / times[0]:8.1f}x" if len(times) > 1 else ""
    print(f"{label:48s}{cells}{speed}")


if __name__ == "__main__":
    main()
