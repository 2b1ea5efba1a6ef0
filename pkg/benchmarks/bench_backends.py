"""Benchmark the compiled kernels against the pure-numpy fallback.

Times the three hot kernels (coefficient IRLS, unit-variance roots, shared
area-variance root) and a full fit on synthetic data of a few sizes, once per
backend, and checks that both backends agree.

Run:  python benchmarks/bench_backends.py [--sizes 40x10,100x4] [--repeat 5]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from smallarea import backend, gee
from smallarea.influence import PsiSpec, expected_square_cached
from smallarea.model import Dataset


def synth(m: int, n_i: int, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    n = m * n_i
    x = rng.lognormal(1.0, 0.5, size=n)
    area = np.repeat(np.arange(m), n_i)
    gamma = rng.normal(0.0, np.sqrt(3.0), size=m)
    y = 10.0 + 5.0 * x + gamma[area] + rng.normal(0.0, np.sqrt(6.0), size=n)
    return Dataset.from_arrays(area, y, x, N=np.full(m, 10 * n_i))


def time_call(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_size(m: int, n_i: int, repeat: int):
    ds = synth(m, n_i)
    psi = PsiSpec("huber", 1.345, 0.5)
    taus = np.full(m, 0.5)
    X1 = np.column_stack([np.ones(ds.n), ds.X])
    coefs0 = np.column_stack([np.full(m, 10.0), np.full(m, 5.0)])
    s2e = np.full(m, 6.0)
    w = np.full(m, expected_square_cached(psi.base, psi.c, 0.5))
    args = (ds.y, X1, ds.k, ds.starts, ds.area_index, ds.h)
    resid_coefs = np.column_stack([np.full(m, 10.0), np.full(m, 5.0)])

    rows = {}
    for name in ("numpy", "numba"):
        try:
            backend.use(name)
        except RuntimeError:
            continue
        ker = backend.kernels()
        resid = ker.pooled_residuals(ds.y, X1, ds.starts, resid_coefs)
        calls = {
            "irls_beta_all": lambda: ker.irls_beta_all(
                *args, 3.0, s2e, taus, psi.code, psi.c, coefs0, 1e-8, 100),
            "sigma_eps_root_all": lambda: ker.sigma_eps_root_all(
                resid, ds.k, ds.starts, ds.area_index, ds.h, 3.0, taus,
                psi.code, psi.c, w, 1e-8, 1e6, s2e),
            "sigma_gamma_root": lambda: ker.sigma_gamma_root(
                resid, ds.k, ds.starts, ds.h, s2e, psi.code, psi.c,
                w[0], 1e-8, 1e6, 3.0),
            "full_fit": lambda: gee.fit(ds, psi, taus=taus),
        }
        for label, fn in calls.items():
            fn()  # warm up (jit compile / cache load)
            rows.setdefault(label, {})[name] = time_call(fn, repeat)

    print(f"\nm={m}, n_i={n_i} (n={m * n_i}) — best of {repeat}")
    print(f"{'kernel':<22}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for label, t in rows.items():
        tnp = t.get("numpy", float("nan"))
        tnb = t.get("numba", float("nan"))
        ratio = tnp / tnb if tnb and np.isfinite(tnb) else float("nan")
        print(f"{label:<22}{tnp * 1e3:>10.2f}ms{tnb * 1e3:>10.2f}ms{ratio:>9.1f}x")

    if "numba" in rows.get("full_fit", {}):
        backend.use("numpy")
        f_np = gee.fit(ds, psi, taus=taus)
        backend.use("numba")
        f_nb = gee.fit(ds, psi, taus=taus)
        diff = max(
            float(np.max(np.abs(f_np.betas - f_nb.betas))),
            float(np.max(np.abs(f_np.sigma2_eps - f_nb.sigma2_eps))),
            abs(f_np.sigma2_gamma - f_nb.sigma2_gamma),
        )
        print(f"backend agreement (max |diff| over fit parameters): {diff:.3e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="20x8,40x10,100x4",
                    help="comma list of mxn_i pairs")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    for token in args.sizes.split(","):
        m, n_i = (int(v) for v in token.strip().split("x"))
        bench_size(m, n_i, args.repeat)


if __name__ == "__main__":
    main()
