"""Time the compiled kernels against the numpy fallback on realistic sizes.

Run: ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each row reports the
median wall time per call for both backends and checks that they agree.
"""

import argparse
import statistics
import time

import numpy as np

from orthoheat import _kernels_py
from orthoheat.projection import render, score_grid, view_specs
from orthoheat.geometry import ColoredPointCloud
from orthoheat.scene import DEFAULT_WORKSPACE

try:
    from orthoheat import _kernels as _compiled
except ImportError:
    _compiled = None


def _median_time(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(rng):
    n_pix = 224 * 224
    pix = rng.integers(0, n_pix, 200_000)
    depth = rng.uniform(0, 1, 200_000)
    logs = [np.log(rng.uniform(1e-6, 1, (100, 100))) for _ in range(3)]
    return {
        "zbuffer 200k pts -> 224^2": lambda k: k.zbuffer(pix, depth, n_pix),
        "fuse_scores 100^3": lambda k: k.fuse_scores(*logs),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args()
    rng = np.random.default_rng(0)

    print(f"{'kernel':<28}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}  agree")
    for name, call in _cases(rng).items():
        py = _median_time(lambda: call(_kernels_py), args.repeat)
        if _compiled is None:
            print(f"{name:<28}{1e3 * py:>10.2f}{'n/a':>11}{'':>9}  n/a")
            continue
        cy = _median_time(lambda: call(_compiled), args.repeat)
        a, b = call(_kernels_py), call(_compiled)
        same = all(np.array_equal(x, y) for x, y in zip(a, b)) if isinstance(a, tuple) else np.array_equal(a, b)
        print(f"{name:<28}{1e3 * py:>10.2f}{1e3 * cy:>11.2f}{py / cy:>8.1f}x  {same}")

    # end to end through the public entry points (uses whichever backend is active)
    ws = DEFAULT_WORKSPACE
    cloud = ColoredPointCloud(rng.uniform(ws.min_corner, ws.max_corner, (100_000, 3)), rng.uniform(0, 1, (100_000, 3)))
    specs = view_specs(ws, 224)
    maps = [np.full((224, 224), 1.0 / 224 ** 2)] * 3
    t_render = _median_time(lambda: [render(cloud, s) for s in specs], args.repeat)
    t_score = _median_time(lambda: score_grid(maps, ws, (100, 100, 100)), args.repeat)
    print(f"\nrender 3 views, 100k pts: {1e3 * t_render:.1f} ms; score_grid 100^3: {1e3 * t_score:.1f} ms")


if __name__ == "__main__":
    main()
