"""Compare the compiled kernels with the numpy fallback.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``; prints one line
per kernel with the best wall time of each backend and the speedup.
"""

import argparse
import time

import numpy as np

from pilight import _kernels_py
from pilight.lighting import ball_geometry, flatten_envmap, smooth_random_envmap
from pilight.imagecore import Rng

try:
    from pilight import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cases(size=64):
    rng = Rng(0)
    env = smooth_random_envmap(rng, 64, 32)
    dirs, weights, radiance = (np.ascontiguousarray(a, dtype=np.float64) for a in flatten_envmap(env))
    normals, mask = ball_geometry(size)
    pix = np.ascontiguousarray(normals.reshape(3, -1).T[mask.ravel() > 0])
    p = len(pix)
    points = pix * 0.3
    owner = np.zeros(p, dtype=np.int64)
    spheres = np.array([[0.0, 0.0, 0.0, 0.3], [0.5, 0.2, 0.1, 0.2]])
    alpha = np.full(p, 0.25)
    view = np.array([0.0, 0.0, 1.0])
    g = rng.generator
    src = g.random((3, 32, 64))
    x = g.uniform(-2, 70, 20000)
    y = g.uniform(-1, 33, 20000)
    return {
        "bilinear_wrap": lambda m: m.bilinear_wrap(src, x, y),
        "diffuse_integrate": lambda m: m.diffuse_integrate(pix, dirs, weights, radiance),
        "diffuse_integrate_shadowed": lambda m: m.diffuse_integrate_shadowed(
            points, pix, owner, spheres, dirs, weights, radiance),
        "specular_integrate": lambda m: m.specular_integrate(pix, view, alpha, dirs, weights, radiance),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", type=int, default=64)
    args = ap.parse_args()
    print(f"{'kernel':28s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speedup':>8s}")
    for name, run in cases(args.size).items():
        t_py = _best(lambda: run(_kernels_py), args.repeat)
        if _ckernels is None:
            print(f"{name:28s} {t_py * 1e3:11.2f} {'n/a':>12s} {'n/a':>8s}")
            continue
        a, b = run(_kernels_py), run(_ckernels)
        for u, v in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
            assert np.allclose(u, v, rtol=1e-9, atol=1e-12), f"{name}: backends disagree"
        t_c = _best(lambda: run(_ckernels), args.repeat)
        print(f"{name:28s} {t_py * 1e3:11.2f} {t_c * 1e3:12.2f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
