"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat N]

Each row reports the best-of-N wall time per call for both backends and
checks that the outputs agree bitwise.
"""
import argparse
import time

import numpy as np

from ostrich import _accel
from ostrich import autodiff as ad
from ostrich.autodiff import Tensor


def best_of(fn, repeat):
    fn()  # warm-up (includes numba compilation)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def cases(rng):
    xp = rng.normal(size=(8, 16, 34, 34))
    cols = _accel.im2col(xp, 3, 3, 1, 32, 32)
    mask = rng.random((256, 256)) < 0.55
    seeds = rng.uniform(0, 256, (60, 2))
    x = Tensor(rng.normal(size=(8, 16, 32, 32)), requires_grad=True)
    k = Tensor(rng.normal(size=(16, 16, 3, 3)), requires_grad=True)

    def conv_fwd_bwd():
        out = ad.conv2d(x, k, pad=1)
        ad.backward((out * out).sum())
        g = x.grad
        x.grad = k.grad = None
        return g

    return {
        "im2col 8x16x34x34 k3": lambda: _accel.im2col(xp, 3, 3, 1, 32, 32),
        "col2im 8x16x34x34 k3": lambda: _accel.col2im(cols, 8, 16, 34, 34, 3, 3, 1, 32, 32),
        "connected_components 256^2": lambda: _accel.connected_components_8(mask)[0],
        "nearest_seed 256^2, 60 seeds": lambda: _accel.nearest_seed(mask, seeds),
        "conv2d fwd+bwd 16->16": conv_fwd_bwd,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    prev = _accel.backend()
    print(f"{'kernel':<32}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}  equal")
    try:
        for name, fn in cases(rng).items():
            _accel.set_backend("numpy")
            t_np, out_np = best_of(fn, args.repeat)
            _accel.set_backend("numba")
            t_nb, out_nb = best_of(fn, args.repeat)
            same = np.array_equal(out_np, out_nb)
            print(f"{name:<32}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>9.1f}x  {same}")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
