"""Compare the numba and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints best-of-N wall time per call for each kernel and backend, and checks
that both backends agree on the inputs used.
"""
import argparse
import timeit

import numpy as np

from latent_anomaly import _kernels


def mixture_case(n, k=4, d=8, seed=0):
    r = np.random.default_rng(seed)
    return (r.normal(0, 3, (n, d)), 0.6, np.log(r.dirichlet(np.ones(k), size=n)),
            r.normal(0, 3, (k, d)), r.uniform(0.2, 1.0, (k, d)))


def bench(fn, args, repeat):
    fn(*args)  # warm-up (JIT compile on first numba call)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    cases = [
        ("mixture_eps", f"{n} x 8, K=4", _kernels.numba_mixture_eps, _kernels.numpy_mixture_eps, mixture_case(n))
        for n in (144, 1024, 16384)
    ]
    rng = np.random.default_rng(1)
    cases += [
        ("erode_2x2", f"{h} x {h}", _kernels.numba_erode_2x2, _kernels.numpy_erode_2x2, (rng.normal(size=(h, h)),))
        for h in (32, 256, 2048)
    ]

    print(f"{'kernel':12s} {'shape':16s} {'numba':>11s} {'numpy':>11s} {'speedup':>8s}")
    for name, shape, fast, ref, inputs in cases:
        np.testing.assert_allclose(fast(*inputs), ref(*inputs), rtol=1e-12, atol=1e-13)
        t_nb, t_np = bench(fast, inputs, args.repeat), bench(ref, inputs, args.repeat)
        print(f"{name:12s} {shape:16s} {t_nb * 1e6:9.1f}us {t_np * 1e6:9.1f}us {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
