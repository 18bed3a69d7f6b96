"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py [--steps N] [--repeat R]
"""

import argparse
import timeit

import numpy as np

from stochtr import kernels


def cases(steps):
    h = 2.0 ** (2 * np.arange(-64, 5, dtype=float))
    return {
        "walk": lambda mod, rng: mod.walk(rng, 0, 2, 0.75, steps),
        "phi_delta": lambda mod, rng: mod.phi_delta(
            rng, 1e9, np.inf, 0, 2, -64, h, 1e-3, 0.75, kernels.MODE_TWO_POINT, 0.75,
            0.0, steps, steps + 1, True),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--steps", type=int, default=200_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    mods = kernels.backends()
    if "cython" not in mods:
        print("compiled kernels not built; only the Python fallback is available")
    print(f"{'kernel':<10} {'backend':<8} {'best s':>9} {'Msteps/s':>9} {'speedup':>8}")
    for name, fn in cases(args.steps).items():
        times = {}
        for backend, mod in sorted(mods.items()):
            t = timeit.Timer(lambda: fn(mod, np.random.default_rng(0)))
            times[backend] = min(t.repeat(args.repeat, 1))
        base = times["python"]
        for backend, sec in times.items():
            print(f"{name:<10} {backend:<8} {sec:>9.4f} {args.steps / sec / 1e6:>9.2f} "
                  f"{base / sec:>7.1f}x")


if __name__ == "__main__":
    main()
