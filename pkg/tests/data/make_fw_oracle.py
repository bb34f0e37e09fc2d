"""Regenerate the frozen dense-oracle projection for the n=2, r=1 hierarchy."""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
import oracles  # noqa: E402
from curllod.mesh import build_box_mesh, refine  # noqa: E402

if __name__ == "__main__":
    hier = refine(build_box_mesh(2), 1)
    o = oracles.DenseFalkWinther(hier.coarse.vertices, hier.coarse.tets,
                                 hier.fine.vertices, hier.fine.tets)
    ce, fe, P1, P2 = o.matrices()
    out = os.path.join(os.path.dirname(os.path.abspath(__file__)), "fw_oracle_n2_r1.npz")
    np.savez_compressed(out, coarse_edges=np.array(ce), fine_edges=np.array(fe), P1=P1, P2=P2)
