"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--size 256]

Prints the best-of-N wall time per kernel and backend, the speed-up, and
whether the two backends agree on the benchmark inputs.
"""

import argparse
import logging
import sys
import timeit

import numpy as np

from glandflow import _kernels
from glandflow.synth import SynthSpec, generate_one

log = logging.getLogger("bench")


def workloads(size: int, rng: np.random.Generator):
    bits = rng.random((size, size)) < 0.55
    sample = generate_one(SynthSpec(tile_size=size, glands_per_tile=(6, 10), seed=1), 0)
    labels = np.zeros((size, size), dtype=np.int32)
    for g, _ in sample.instances:
        core = g.mask((size, size)) & ~sample.boundary.bits
        labels[core] = g.id
    epi = sample.epithelium.bits
    x = rng.normal(size=(4, 64, 64, 8))
    w = rng.normal(size=(3, 3, 8, 8))
    b = rng.normal(size=8)
    dy = rng.normal(size=(4, 64, 64, 8))
    return {
        "label_components": lambda k: k.label_components(bits, 4),
        "grow_regions": lambda k: k.grow_regions(labels, epi),
        "conv3x3_forward": lambda k: k.conv3x3_forward(x, w, b),
        "conv3x3_backward": lambda k: k.conv3x3_backward(x, w, dy),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(p, q) for p, q in zip(a, b))
    if a.dtype.kind == "f":
        return np.allclose(a, b, rtol=0, atol=1e-10)
    return np.array_equal(a, b)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--size", type=int, default=256, help="raster edge for the labelling kernels")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    compiled = _kernels.compiled_backend
    if compiled is None:
        log.error("compiled backend unavailable; build it with `pip install -e . --no-build-isolation`")
        return 1
    backends = {"cython": compiled, "python": _kernels.python_backend}
    print(f"active backend at import: {_kernels.BACKEND}")
    print(f"{'kernel':<18}{'cython (ms)':>12}{'python (ms)':>13}{'speed-up':>10}  agree")
    for name, fn in workloads(args.size, np.random.default_rng(0)).items():
        times = {}
        for label, k in backends.items():
            fn(k)  # warm up
            times[label] = min(timeit.repeat(lambda: fn(k), number=1, repeat=args.repeat)) * 1e3
        agree = same(fn(compiled), fn(_kernels.python_backend))
        print(f"{name:<18}{times['cython']:>12.2f}{times['python']:>13.2f}"
              f"{times['python'] / times['cython']:>9.1f}x  {agree}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
