"""Time the numba kernels against their numpy fallbacks and check they agree.

    python3 benchmarks/bench_kernels.py [--n 20000] [--dim 64] [--repeat 5]

Both variants are imported from the same module, so the env flag does not
matter here. The first numba call (JIT compile or cache load) is excluded.
"""

import argparse
import time

import numpy as np

from anchorsift import _kernels as K


def best_of(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--nlist", type=int, default=128)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(args.seed)
    X = rng.standard_normal((args.n, args.dim)).astype(np.float32)
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    C = X[rng.choice(args.n, args.nlist, replace=False)].copy()
    q = X[0].copy()
    labels = K.np_assign_ip(X, C)[0]
    dsub = args.dim // args.m
    books = rng.standard_normal((args.m, 256, dsub)).astype(np.float32)
    codes = rng.integers(0, 256, size=(args.n, args.m), dtype=np.uint8)
    table = K.np_adc_table(q, books)

    cases = [
        ("ip_scores", K.nb_ip_scores, K.np_ip_scores, (X, q)),
        ("assign_ip", K.nb_assign_ip, K.np_assign_ip, (X, C)),
        ("assign_l2", K.nb_assign_l2, K.np_assign_l2, (X, C)),
        ("cluster_sums", K.nb_cluster_sums, K.np_cluster_sums, (X, labels, args.nlist)),
        ("adc_table", K.nb_adc_table, K.np_adc_table, (q, books)),
        ("adc_scores", K.nb_adc_scores, K.np_adc_scores, (codes, table)),
    ]
    print(f"n={args.n} dim={args.dim} nlist={args.nlist} m={args.m} repeat={args.repeat}")
    print(f"{'kernel':<14}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  identical")
    for name, nb_fn, np_fn, a in cases:
        nb_fn(*a)  # compile / load from cache
        t_nb, out_nb = best_of(nb_fn, a, args.repeat)
        t_np, out_np = best_of(np_fn, a, args.repeat)
        if isinstance(out_nb, tuple):
            same = all(np.array_equal(a, b) for a, b in zip(out_nb, out_np))
        else:
            same = np.array_equal(out_nb, out_np)
        print(f"{name:<14}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
