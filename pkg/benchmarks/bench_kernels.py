"""Throughput comparison of the compiled and pure-Python kernel backends.

Times each sampling-chain kernel on generation-shaped workloads, plus a
full reverse-chain run under each backend. Run from the repo root:

    python3 benchmarks/bench_kernels.py [--rows 200000] [--repeats 5]
"""

import argparse
import time

import numpy as np

from tokendiff import kernels
from tokendiff.datagen import OracleDenoiser, make_task
from tokendiff.diffusion import generate
from tokendiff.schedule import ScheduleConfig, build_schedule


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def coefficient_rows(sched, t, n):
    tv = np.full(n, t, dtype=np.int64)
    tp = tv - 1
    return (
        sched.alpha[tv], sched.beta[tv], sched.gamma[tv],
        sched.alpha_bar[tv], sched.beta_bar[tv], sched.gamma_bar[tv],
        sched.alpha_bar[tp], sched.beta_bar[tp], sched.gamma_bar[tp],
    )


def bench_kernels(rows, K, repeats):
    sched = build_schedule(ScheduleConfig(K=K, T=10))
    rng = np.random.default_rng(0)
    x0 = rng.integers(0, K, rows)
    xt = rng.integers(0, K + 1, rows)
    x0p = rng.dirichlet(np.ones(K), rows)
    u = rng.random(rows)
    coefs = coefficient_rows(sched, 5, rows)
    _, _, _, ab_t, bb_t, gb_t, _, _, _ = coefs
    probs = kernels.get_backend("python").marginal_rows(x0, ab_t, bb_t, gb_t, K)

    cases = {
        "marginal_rows": lambda be: be.marginal_rows(x0, ab_t, bb_t, gb_t, K),
        "sample_categorical_rows": lambda be: be.sample_categorical_rows(probs, u),
        "posterior_mix_rows": lambda be: be.posterior_mix_rows(xt, x0p, *coefs),
        "posterior_rows": lambda be: be.posterior_rows(xt, x0, K, *coefs),
    }
    print(f"\nper-kernel best-of-{repeats}, {rows} rows, K={K}")
    header = f"{'kernel':26s}" + "".join(f"{name:>14s}" for name in kernels.available_backends())
    print(header + f"{'speedup':>10s}")
    for label, fn in cases.items():
        times = {}
        for name in kernels.available_backends():
            be = kernels.get_backend(name)
            times[name] = timeit(lambda: fn(be), repeats)
        row = f"{label:26s}" + "".join(f"{times[n]*1e3:>12.2f}ms" for n in times)
        if "compiled" in times:
            row += f"{times['python'] / times['compiled']:>9.2f}x"
        print(row)


def bench_chain(n, repeats):
    task = make_task(C=2, K=4, D=2, seed=7, peak=0.8, trans_peak=0.4)
    sched = build_schedule(ScheduleConfig(K=4, T=8))
    oracle = OracleDenoiser(task, sched)
    print(f"\nfull reverse chain (oracle denoiser), n={n}, best-of-{repeats}")
    import tokendiff.kernels as kmod

    for name in kernels.available_backends():
        be = kernels.get_backend(name)
        saved = (kmod.marginal_rows, kmod.sample_categorical_rows,
                 kmod.posterior_mix_rows, kmod.posterior_rows, kmod.chain_likelihood)
        try:
            kmod.marginal_rows = be.marginal_rows
            kmod.sample_categorical_rows = be.sample_categorical_rows
            kmod.posterior_mix_rows = be.posterior_mix_rows
            kmod.posterior_rows = be.posterior_rows
            kmod.chain_likelihood = be.chain_likelihood
            t = timeit(
                lambda: generate(oracle, sched, cond=0, D=2,
                                 rng=np.random.default_rng(1), n=n)[0],
                repeats,
            )
            print(f"{name:10s} {t:8.3f}s  ({n / t:,.0f} sequences/s)")
        finally:
            (kmod.marginal_rows, kmod.sample_categorical_rows,
             kmod.posterior_mix_rows, kmod.posterior_rows, kmod.chain_likelihood) = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=200_000)
    parser.add_argument("--k", type=int, default=8)
    parser.add_argument("--chain-n", type=int, default=50_000)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {kernels.BACKEND}; available: {kernels.available_backends()}")
    bench_kernels(args.rows, args.k, args.repeats)
    bench_chain(args.chain_n, args.repeats)


if __name__ == "__main__":
    main()
