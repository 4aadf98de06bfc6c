"""Time the compiled and pure-Python filter/RTS passes on the same inputs.

Usage: python benchmarks/bench_backends.py [--horizons 100 500 2000] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from robust_smoothing import affine_smoother as af
from robust_smoothing.experiments import ct_bearings_model, simulate
from robust_smoothing.linearization import linearize_ssm
from robust_smoothing.state_space import TrajectoryEstimate


def bench(horizon: int, repeat: int, lam: float) -> dict:
    model = ct_bearings_model(horizon=horizon)
    X, y = simulate(model, 0)
    params = linearize_ssm(model, TrajectoryEstimate(X, np.broadcast_to(0.1 * np.eye(5), (horizon, 5, 5))), "slr")
    lm = af.LMRegularization(lam, np.eye(5), X) if lam > 0 else None
    out = {}
    ref = None
    for backend in ("compiled", "python"):
        if backend == "compiled" and af.BACKEND != "compiled":
            continue
        run = lambda: af.forward_backward(model, params, y, lm, backend=backend)
        est = run()[1]
        ref = est if ref is None else ref
        t = min(timeit.repeat(run, number=1, repeat=repeat))
        out[backend] = (t, float(np.abs(est.means - ref.means).max()))
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--horizons", type=int, nargs="+", default=[100, 500, 2000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--lam", type=float, default=0.01, help="LM damping; 0 disables the pseudo-update")
    args = ap.parse_args()
    print(f"active backend: {af.BACKEND}")
    print(f"{'K':>6} {'compiled [ms]':>14} {'python [ms]':>12} {'speedup':>8} {'max |diff|':>11}")
    for K in args.horizons:
        r = bench(K, args.repeat, args.lam)
        py = r["python"][0]
        if "compiled" in r:
            c = r["compiled"][0]
            print(f"{K:6d} {1e3 * c:14.2f} {1e3 * py:12.2f} {py / c:8.1f} {r['python'][1]:11.1e}")
        else:
            print(f"{K:6d} {'n/a':>14} {1e3 * py:12.2f} {'':>8} {'':>11}")


if __name__ == "__main__":
    main()
