"""Time each hot kernel in its numpy and numba flavour.

    python3 benchmarks/bench_kernels.py [--repeat 5]

The numba timings exclude the first (compiling) call.  Every pair of
outputs is also compared so a speedup never hides a disagreement.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from epivo import _kernels as K
from epivo.geometry import homogeneous


def _cases(rng):
    logits = rng.normal(size=(300, 300))
    lr = np.full(300, -np.log(300.0))
    pts = rng.normal(size=(400, 3))
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    R = np.linalg.qr(rng.normal(size=(3, 3)))[0]
    R *= np.sign(np.linalg.det(R))
    P2 = np.hstack([R, rng.normal(size=(3, 1))])
    x1, x2 = rng.normal(size=(2000, 2)), rng.normal(size=(2000, 2))
    Es = rng.normal(size=(64, 3, 3))
    return {
        "sinkhorn 300x300, 100 it": ("sinkhorn_log", (logits, lr, lr, 100)),
        "prim mst n=400": ("prim_mst", (pts,)),
        "knn n=400 k=4": ("knn", (pts, 4)),
        "triangulate n=2000": ("triangulate_dlt", (P1, P2, x1, x2)),
        "sampson 64 models x 2000": ("sampson_many", (Es, homogeneous(x1), homogeneous(x2))),
    }


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def _agree(a, b) -> bool:
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.allclose(x, y, rtol=1e-9, atol=1e-12) for x, y in zip(a, b))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not K.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed")
    print(f"{'kernel':28s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}  agree")
    for name, (kernel, kargs) in _cases(np.random.default_rng(args.seed)).items():
        f_np = getattr(K, kernel + "_np")
        f_nb = getattr(K, kernel + "_nb")
        f_nb(*kargs)  # compile
        t_np, o_np = _best(f_np, kargs, args.repeat)
        t_nb, o_nb = _best(f_nb, kargs, args.repeat)
        print(f"{name:28s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:8.1f}  "
              f"{'yes' if _agree(o_np, o_nb) else 'NO'}")


if __name__ == "__main__":
    main()
