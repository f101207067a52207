"""Time the compiled kernels against the numpy fallback on the same inputs.

    python benchmarks/bench_kernels.py [--nr 16] [--ntheta 64] [--repeat 5]

Prints the best-of-N wall time per kernel, the speedup, and the maximum
absolute difference between the two backends.
"""
import argparse
import timeit

import numpy as np

from rigidflow import _kernels_py
from rigidflow.geomap import build_cutoff
from rigidflow.mesh import build_annular_mesh

try:
    from rigidflow import _kernels as compiled
except ImportError:
    compiled = None


def inputs(nr, ntheta, seed=0):
    mesh = build_annular_mesh(1.0, 0.2, nr, ntheta)
    cut = build_cutoff(mesh.center, 1.0, 0.2)
    rng = np.random.default_rng(seed)
    X = np.vstack([mesh.vnodes, mesh.qp_points.reshape(-1, 2)])
    n = len(X)
    F = np.eye(2) + 0.05 * rng.standard_normal((n, 2, 2))
    H = 0.05 * rng.standard_normal((n, 2, 2, 2))
    nc, nq = mesh.qp_weights.shape
    Fq = np.eye(2) + 0.05 * rng.standard_normal((nc, nq, 2, 2))
    Hq = 0.05 * rng.standard_normal((nc, nq, 2, 2, 2))
    adv = rng.standard_normal((nc, nq, 2))
    rigid = (cut.center, cut.radius, cut.delta, np.array([0.01, -0.02]), np.array([0.1, 0.05]), 0.5)
    return {
        "lambda_derivs": (np.ascontiguousarray(X), *rigid, 2),
        "flow_rhs": (np.ascontiguousarray(X), F, H, *rigid),
        "velocity_element_matrices": (np.ascontiguousarray(mesh.N), np.ascontiguousarray(mesh.dN),
                                      np.ascontiguousarray(mesh.qp_weights), Fq, Hq, adv, 1.0, 1.0),
    }


def _flat(out):
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nr", type=int, default=16)
    ap.add_argument("--ntheta", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the numpy timings are shown")
    print(f"mesh {args.nr}x{args.ntheta}")
    print(f"{'kernel':28s} {'numpy [ms]':>11s} {'cython [ms]':>12s} {'speedup':>8s} {'max diff':>10s}")
    for name, a in inputs(args.nr, args.ntheta).items():
        py = getattr(_kernels_py, name)
        t_py = min(timeit.repeat(lambda: py(*a), number=1, repeat=args.repeat))
        if compiled is None:
            print(f"{name:28s} {1e3 * t_py:11.2f}")
            continue
        cy = getattr(compiled, name)
        t_cy = min(timeit.repeat(lambda: cy(*a), number=1, repeat=args.repeat))
        diff = float(np.max(np.abs(_flat(py(*a)) - _flat(cy(*a)))))
        print(f"{name:28s} {1e3 * t_py:11.2f} {1e3 * t_cy:12.2f} {t_py / t_cy:8.1f} {diff:10.2e}")


if __name__ == "__main__":
    main()
