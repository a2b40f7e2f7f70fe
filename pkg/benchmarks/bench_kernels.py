"""Time the numba kernels against their numpy twins and check they agree.

    python benchmarks/bench_kernels.py [--repeat 5]
"""

import argparse
import time

import numpy as np

from sslasr import _kernels as K


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(rng):
    B, T, U = 8, 60, 20
    logits = rng.standard_normal((B, T, U + 1, 2))
    norm = np.logaddexp(logits[..., 0], logits[..., 1])
    blank, emit = logits[..., 0] - norm, (logits[..., 1] - norm)[:, :, :U]
    lens_t, lens_u = np.full(B, T), np.full(B, U)
    ref = rng.integers(0, 50, 400)
    hyp = np.where(rng.random(400) < 0.2, rng.integers(0, 50, 400), ref)
    x = rng.standard_normal((50_000, 32))
    cents = rng.standard_normal((64, 32))
    labels = rng.integers(0, 64, 50_000)
    starts = rng.random(1_000_000) < 0.08
    return {
        "rnnt_lattice B8 T60 U20": lambda nb: K.rnnt_lattice(blank, emit, lens_t, lens_u, use_numba=nb)[0],
        "edit_ops 400x400": lambda nb: np.array(K.edit_ops(ref, hyp, use_numba=nb)),
        "assign_nearest 50k x 64": lambda nb: K.assign_nearest(x, cents, use_numba=nb)[0],
        "centroid_sums 50k x 64": lambda nb: K.centroid_sums(x, labels, 64, use_numba=nb)[0],
        "spans_from_starts 1M": lambda nb: K.spans_from_starts(starts, 10, use_numba=nb),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if K.numba is None:
        print("numba is not installed; only the numpy path is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agree")
    for name, fn in cases(rng).items():
        fn(True)  # compile
        t_np, a = best_of(lambda: fn(False), args.repeat)
        t_nb, b = best_of(lambda: fn(True), args.repeat)
        agree = np.allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-9, atol=1e-9)
        print(f"{name:<26} {1e3 * t_np:>10.2f} {1e3 * t_nb:>10.2f} {t_np / t_nb:>7.1f}x  {agree}")


if __name__ == "__main__":
    main()
