"""Compiled kernels vs numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--quick]

Times the three hot kernels (counter-based normals, ordered mean, pairwise
kernel average) on both backends, checks they agree, and also times the
factorised mean-field route that the experiments use by default.
"""

import argparse
import time

import numpy as np

from mvlab import _fallback
from mvlab.kernels import make_builtin
from mvlab.simulate import _coefficients

try:
    from mvlab import _core
except ImportError:
    _core = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def row(label, t_py, t_c):
    speed = f"{t_py / t_c:7.1f}x" if t_c else "      -"
    tc = f"{t_c * 1e3:12.2f}" if t_c else "           -"
    print(f"{label:<44s}{t_py * 1e3:10.2f}{tc}  {speed}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="smaller sizes")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    scale = 4 if args.quick else 1
    if _core is None:
        print("compiled extension not built; timing the fallback only")
    print(f"{'kernel':<44s}{'python ms':>10s} {'compiled ms':>11s}  speedup")

    R, S = 64 // scale, 1024 // scale
    seeds = np.arange(R, dtype=np.uint64)
    streams = np.arange(S, dtype=np.uint64)
    t_py, a = best_of(lambda: _fallback.normals_grid(seeds, streams, 3, 0, 2), args.repeat)
    t_c, b = (best_of(lambda: _core.normals_grid(seeds, streams, 3, 0, 2), args.repeat)
              if _core else (0.0, a))
    assert np.array_equal(a, b)
    row(f"normals_grid {R}x{S}x2", t_py, t_c)

    arr = rng.normal(size=(64, 4096 // scale, 3))
    t_py, a = best_of(lambda: _fallback.ordered_mean(arr), args.repeat)
    t_c, b = best_of(lambda: _core.ordered_mean(arr), args.repeat) if _core else (0.0, a)
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    row(f"ordered_mean {arr.shape}", t_py, t_c)

    for name, params in (("linear-attraction", {"eps": 0.3}), ("smooth-bounded", {}),
                         ("kinetic-linear", {"eps": 0.3})):
        spec = make_builtin(name, params)
        N = 512 // scale
        x = rng.normal(size=(4, N, spec.q))
        t_py, (d1, s1) = best_of(lambda: _fallback.pairwise_average(spec, 0.0, x, x), max(1, args.repeat // 2))
        if _core:
            prm = np.asarray(spec.kernel_params, dtype=np.float64)
            t_c, (d2, s2) = best_of(
                lambda: _core.pairwise_average(spec.model_code, prm, spec.d, spec.n, x, x), args.repeat)
            assert np.allclose(d1, d2, atol=1e-12) and np.allclose(s1, s2, atol=1e-12)
        else:
            t_c = 0.0
        row(f"pairwise {name} B=4 N={N}", t_py, t_c)
        t_f, _ = best_of(lambda: _coefficients(spec, 0.0, x, y=x, mode="factorized"), args.repeat)
        print(f"{'  factorised route, same input':<44s}{t_f * 1e3:10.2f}")


if __name__ == "__main__":
    main()
