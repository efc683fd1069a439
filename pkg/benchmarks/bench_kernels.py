"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--rays 4096] [--samples 128] [--res 48]
"""

import argparse
import timeit

import numpy as np

from srfield import _kernels_py
from srfield.radiance import RayBatch, VoxelField, _kernel_args

try:
    from srfield import _kernels as _compiled
except ImportError:
    _compiled = None


def _setup(n_rays, n_samples, res, seed=0):
    rng = np.random.default_rng(seed)
    fld = VoxelField(rng.normal(-1.0, 2.0, (res,) * 3), rng.normal(0.0, 1.0, (res,) * 3 + (3,)))
    origins = rng.normal(0.0, 0.3, (n_rays, 3)) + np.array([0.0, -3.0, 0.0])
    dirs = np.array([0.0, 1.0, 0.0]) + rng.normal(0.0, 0.15, (n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rays = RayBatch(origins, dirs, np.full(n_rays, 0.1), np.full(n_rays, 10.0))
    args = _kernel_args(fld, rays, n_samples, (1.0, 1.0, 1.0), rng)
    g = np.ascontiguousarray(rng.normal(size=(n_rays, 3)))
    n = 64 * 64 * 4
    splat = (rng.integers(-4, 68, n), rng.integers(-4, 68, n), rng.uniform(0.5, 5.0, n),
             np.ascontiguousarray(rng.random((n, 3))), 64, 64)
    return args, g, splat


def bench(mod, args, g, splat, repeat):
    out = {}
    out["render_forward"] = min(timeit.repeat(lambda: mod.render_forward(*args), number=1, repeat=repeat))
    out["render_backward"] = min(timeit.repeat(lambda: mod.render_backward(*args, g), number=1, repeat=repeat))
    out["splat_zbuffer"] = min(timeit.repeat(lambda: mod.splat_zbuffer(*splat), number=1, repeat=repeat))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--samples", type=int, default=128)
    ap.add_argument("--res", type=int, default=48)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    args, g, splat = _setup(a.rays, a.samples, a.res)
    py = bench(_kernels_py, args, g, splat, a.repeat)
    print(f"{a.rays} rays x {a.samples} samples, {a.res}^3 grid (best of {a.repeat})")
    if _compiled is None:
        print("compiled extension not built; numpy only")
        for k, v in py.items():
            print(f"  {k:16s} numpy {v * 1e3:9.2f} ms")
        return
    cy = bench(_compiled, args, g, splat, a.repeat)
    for k in py:
        print(f"  {k:16s} numpy {py[k] * 1e3:9.2f} ms   cython {cy[k] * 1e3:9.2f} ms   x{py[k] / cy[k]:.1f}")


if __name__ == "__main__":
    main()
