"""Numba vs numpy element kernels on a refined box mesh.

Usage:
  python benchmarks/bench_kernels.py [--n 16] [--repeat 5]

Both variants are called directly (the environment switch
CURLLOD_DISABLE_NUMBA only picks the default), so one run compares them.
"""

import argparse
import time

import numpy as np

from curllod import _kernels as kern
from curllod.mesh import build_box_mesh, refine


def best_of(fn, repeat):
    fn()  # warm-up (numba compilation, caches)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=16, help="cells per side of the fine box mesh")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kern.numba is None:
        raise SystemExit("numba is not installed")

    hier = refine(build_box_mesh(args.n // 2), 1)
    f, c = hier.fine, hier.coarse
    Xf = np.ascontiguousarray(f.tet_coords)
    Xc = np.ascontiguousarray(c.tet_coords[hier.parent])
    es = np.ascontiguousarray(f.tet_edge_signs, dtype=float)
    fs = np.ascontiguousarray(f.tet_face_signs, dtype=float)
    esc = np.ascontiguousarray(c.tet_edge_signs[hier.parent], dtype=float)
    fsc = np.ascontiguousarray(c.tet_face_signs[hier.parent], dtype=float)
    eye = np.ascontiguousarray(np.broadcast_to(np.eye(3), (f.n_tets, 3, 3)))

    cases = {
        "nedelec": (Xf, es, eye, eye),
        "gradient": (Xf, es),
        "raviart_thomas": (Xf, fs),
        "mixed_nedelec_rt": (Xf, es, fs),
        "p1_stiffness": (Xf,),
        "transfer_p1": (Xf, Xc),
        "transfer_nedelec": (Xf, es, Xc, esc),
        "transfer_rt": (Xf, fs, Xc, fsc),
    }
    print("%d fine tets, best of %d" % (f.n_tets, args.repeat))
    print("%-18s %10s %10s %8s %10s" % ("kernel", "numpy [s]", "numba [s]", "speedup", "max diff"))
    for name, a in cases.items():
        np_fn, nb_fn = getattr(kern, name + "_np"), getattr(kern, name + "_nb")
        t_np = best_of(lambda: np_fn(*a), args.repeat)
        t_nb = best_of(lambda: nb_fn(*a), args.repeat)
        r_np, r_nb = np_fn(*a), nb_fn(*a)
        if not isinstance(r_np, tuple):
            r_np, r_nb = (r_np,), (r_nb,)
        diff = max(float(np.abs(x - y).max()) for x, y in zip(r_np, r_nb))
        print("%-18s %10.4f %10.4f %7.1fx %10.1e" % (name, t_np, t_nb, t_np / t_nb, diff))


if __name__ == "__main__":
    main()
