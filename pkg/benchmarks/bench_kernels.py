"""Time the sampling kernels and one direct-mode loss step under both backends.

    python3 benchmarks/bench_kernels.py --size 32 --repeat 5
"""

import argparse
import time

import numpy as np

from mdreg import _kernels
from mdreg.engine import RegistrationConfig, _loss_step
from mdreg.evalsynth import synth_pair
from mdreg.regnet import init_params


def best_of(fn, repeat):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--ndim", type=int, default=3, choices=(2, 3))
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    dims = (args.size,) * args.ndim
    img = rng.standard_normal((args.ndim,) + dims)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"))
    coords = grid + 3.0 * rng.standard_normal(grid.shape)
    g = rng.standard_normal(img.shape)

    pair = synth_pair(0, dims=dims, magnitude=args.size / 8)
    cfg = RegistrationConfig(mode="direct")
    params = init_params(cfg.spec(args.ndim), dims, 0, "direct")
    for p in params.velocities:
        p.value = 0.5 * rng.standard_normal(p.value.shape)

    cases = {
        "sample": lambda: _kernels.sample(img, coords),
        "grad_image": lambda: _kernels.sample_grad_image(coords, g, dims),
        "grad_coords": lambda: _kernels.sample_grad_coords(img, coords, g),
        "fused_vjp": lambda: _kernels.sample_vjp(img, coords, g),
        "loss_step": lambda: _loss_step(params, pair.fixed, pair.moving, cfg),
    }
    results = {}
    prev = _kernels.get_backend()
    try:
        for backend in ("numpy", "numba"):
            _kernels.set_backend(backend)
            results[backend] = {k: best_of(fn, args.repeat) for k, fn in cases.items()}
            ref = _kernels.sample_vjp(img, coords, g)
            results[backend]["_check"] = ref
    finally:
        _kernels.set_backend(prev)

    a, b = results["numpy"].pop("_check"), results["numba"].pop("_check")
    err = max(float(np.abs(x - y).max()) for x, y in zip(a, b))
    print(f"grid {dims}, {args.ndim} channels; max backend difference {err:.3g}")
    print(f"{'kernel':<12}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for k in cases:
        tn, tb = results["numpy"][k], results["numba"][k]
        print(f"{k:<12}{1e3 * tn:>12.2f}{1e3 * tb:>12.2f}{tn / tb:>10.1f}")


if __name__ == "__main__":
    main()
