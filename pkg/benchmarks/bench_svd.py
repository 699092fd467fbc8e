"""Time the compiled and pure-Python Jacobi SVD kernels on layer-sized matrices.

    python3 benchmarks/bench_svd.py --sizes 384x128 1536x512 --repeat 3
"""

import argparse
import time

import numpy as np

from lrxvec import linalg


def parse_size(text):
    m, n = text.lower().split("x")
    return int(m), int(n)


def bench(backend, a, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        s = linalg.svd(a, backend=backend)
        best = min(best, time.perf_counter() - t)
    resid = np.linalg.norm(s.u * s.sigma @ s.vt - a) / max(1.0, np.linalg.norm(a))
    return best, resid, s.sigma


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", nargs="+", type=parse_size, default=[(120, 40), (384, 128), (768, 256), (1536, 512)])
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    backends = linalg.available_backends()
    if "compiled" not in backends:
        print("compiled kernel not built; timing the Python fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'size':>10} {'backend':>9} {'seconds':>9} {'residual':>10}  speedup")
    for m, n in args.sizes:
        a = rng.standard_normal((m, n))
        times = {}
        sigmas = {}
        for b in sorted(backends, key=lambda b: b != "python"):
            t, resid, sigmas[b] = bench(b, a, args.repeat)
            times[b] = t
            speed = f"{times['python'] / t:6.1f}x" if b != "python" and "python" in times else ""
            print(f"{m}x{n:<5} {b:>9} {t:9.3f} {resid:10.1e}  {speed}")
        if len(sigmas) == 2:
            diff = np.max(np.abs(sigmas["compiled"] - sigmas["python"]))
            print(f"{'':>10} max |sigma_compiled - sigma_python| = {diff:.1e}")


if __name__ == "__main__":
    main()
