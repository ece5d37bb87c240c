"""Time the numba kernels against their pure-numpy counterparts.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each pair is checked for agreement before timing. The numba timings exclude
the first (compiling) call.
"""
import argparse
import time

import numpy as np

from mmimpute import kernels
from mmimpute._accel import HAVE_NUMBA
from mmimpute.dataset import ShapeSpec, generate_voxels


def _best(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(gen):
    values = gen.standard_normal((4096, 32))
    mask = gen.uniform(size=values.shape) > 0.5
    means = gen.standard_normal((8, 32)) * 5
    yield "masked_sq_dist 4096x8x32", (values, mask, means), lambda a, b: np.allclose(a, b, rtol=1e-12)

    pred = gen.uniform(size=200 * 4096)
    target = gen.uniform(size=pred.size) < 0.2
    thr = np.arange(1, 100) / 100.0
    yield "threshold_counts 819k x 99", (pred, target, thr), lambda a, b: all(np.array_equal(x, y) for x, y in zip(a, b))

    grid = generate_voxels(ShapeSpec(5, 0.9, 0.4))
    yield "cast_silhouette 32px x4", (grid, 32, np.deg2rad(20.0)), lambda a, b: np.array_equal(a, b)

    logits = gen.standard_normal((32, 4096)) * 3
    tgt = (gen.uniform(size=logits.shape) < 0.3).astype(np.float64)
    yield "bernoulli_logits 32x4096", (logits, tgt), lambda a, b: np.allclose(a[0], b[0]) and np.allclose(a[1], b[1])

    p = gen.standard_normal(1024 * 4096)
    g = gen.standard_normal(p.size)
    yield "adam_update 4.2M", (p, g), None


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    gen = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, inputs, agree in cases(gen):
        base = name.split()[0]
        f_np = getattr(kernels, base + "_numpy")
        f_nb = getattr(kernels, base + "_numba")
        if base == "adam_update":
            p, g = inputs
            state = {k: (p.copy(), np.zeros_like(p), np.zeros_like(p)) for k in ("np", "nb")}
            f_np(*state["np"][:1], g, *state["np"][1:], 1e-3, 0.9, 0.999, 1.0, 1e-8)
            f_nb(*state["nb"][:1], g, *state["nb"][1:], 1e-3, 0.9, 0.999, 1.0, 1e-8)
            assert np.allclose(state["np"][0], state["nb"][0], rtol=1e-12)
            run_np = lambda: f_np(state["np"][0], g, state["np"][1], state["np"][2], 1e-3, 0.9, 0.999, 1.0, 1e-8)
            run_nb = lambda: f_nb(state["nb"][0], g, state["nb"][1], state["nb"][2], 1e-3, 0.9, 0.999, 1.0, 1e-8)
        else:
            assert agree(f_np(*inputs), f_nb(*inputs)), f"{name}: numba and numpy disagree"
            run_np = lambda: f_np(*inputs)
            run_nb = lambda: f_nb(*inputs)
        t_np = _best(run_np, args.repeat)
        t_nb = _best(run_nb, args.repeat)
        print(f"{name:32s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
