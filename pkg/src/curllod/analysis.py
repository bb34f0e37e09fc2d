"""Error norms and the two experiment drivers (decay in ``m``, convergence in ``H``).

The coarse part of the multiscale solution is measured in a discrete
surrogate of the ``H(div)'`` norm: the Riesz representative of
``v -> (e, v)`` in the full (unringed) fine Raviart-Thomas space with the
``H(div)`` inner product. Since the fine RT space is a subspace of
``H(div)``, the surrogate is a mesh-dependent lower bound of the
continuous dual norm.
"""

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels as kern
from .falk_winther import projection
from .fem import DofMap, assemble_auxiliary
from .lod import CorrectorProblem, default_m, saturation_order, solve_multiscale, solve_reference
from .solver import factorize

log = logging.getLogger(__name__)

CSV_FIELDS = ("scenario", "H", "h", "m", "err_hcurl", "err_hdivdual",
              "order_hcurl", "order_hdivdual", "seconds")


@dataclass(frozen=True)
class AffineField:
    """Vector field ``f(x) = a + B x``."""

    a: tuple = (1.0, 1.0, 1.0)
    B: tuple = ((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.asarray(self.a, dtype=float) + x @ np.asarray(self.B, dtype=float).T

    @property
    def is_zero(self):
        return not (np.any(self.a) or np.any(self.B))

    def hdiv_norm(self, mesh):
        """``||f||_{H(div)}`` over the mesh (the 4-point rule is exact for quadratics)."""
        X = mesh.tet_coords
        pts = np.einsum("qk,tki->tqi", kern.QUAD_BARY, X)
        fv = self(pts.reshape(-1, 3)).reshape(pts.shape)
        l2 = np.einsum("q,t,tqi,tqi->", kern.QUAD_WEIGHTS, mesh.volumes, fv, fv)
        div = np.trace(np.asarray(self.B, dtype=float))
        return math.sqrt(l2 + div ** 2 * mesh.volumes.sum())


@dataclass
class ErrorReport:
    """Errors of one multiscale solve against the fine reference solution."""

    H: float
    h: float
    m: object
    err_hcurl: float
    err_hdivdual: float
    norm_uh: float
    norm_f: float
    seconds: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("err_hcurl", "err_hdivdual", "norm_uh", "norm_f"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("%s must be finite and nonnegative, got %r" % (name, v))


def norm_hcurl(mesh, dofs, v, region=None):
    """``sqrt(||v||^2 + ||curl v||^2)`` of a Nedelec DOF vector, optionally over some tets."""
    tets = np.arange(mesh.n_tets) if region is None else np.asarray(region, dtype=np.int64)
    if tets.size == 0:
        return 0.0
    v = np.asarray(v)
    if v.shape != (dofs.n_dofs,):
        raise ValueError("vector has shape %r, expected (%d,)" % (v.shape, dofs.n_dofs))
    K, M = kern.nedelec(mesh.tet_coords[tets], mesh.tet_edge_signs[tets])
    table = dofs.local_table(tets)
    loc = np.where(table >= 0, v[np.maximum(table, 0)], 0)
    val = np.einsum("ta,tab,tb->", loc.conj(), K + M, loc).real
    return math.sqrt(max(val, 0.0))


class DualNorm:
    """Reusable factorization for :func:`dual_norm_hdiv` on one fine mesh."""

    def __init__(self, mesh, dofs_n):
        self.mesh = mesh
        self.dofs_n = dofs_n
        rt = DofMap.raviart_thomas(mesh, ringed=False)
        M = assemble_auxiliary(mesh, "rt-mass", rt)
        D = assemble_auxiliary(mesh, "rt-div", DofMap.p0(mesh), col_dofs=rt)
        A = M + D.T @ sp.diags(1.0 / mesh.volumes) @ D
        self.mixed = assemble_auxiliary(mesh, "n-rt-mass", dofs_n, col_dofs=rt).T.tocsr()
        self.solve = factorize(A.tocsc())

    def __call__(self, e):
        e = np.asarray(e)
        if not np.any(e):
            return 0.0
        b = self.mixed @ e
        r = self.solve(b)
        return math.sqrt(max(float(np.real(np.vdot(b, r))), 0.0))


def dual_norm_hdiv(hier, e, dofs=None):
    """Discrete ``H(div)'`` norm of a fine Nedelec field (see the module docstring)."""
    fine = hier.fine
    return DualNorm(fine, dofs or DofMap.nedelec(fine))(e)


def error_report(hier, coeff, f, m, proj=None, problem=None, u_h=None, threads=1):
    t0 = time.perf_counter()
    proj = proj or projection(hier)
    problem = problem or CorrectorProblem(hier, coeff, proj)
    if u_h is None:
        u_h = solve_reference(hier, coeff, f, dofs=proj.fine_dofs, B=problem.B)
    sol = solve_multiscale(hier, coeff, f, m, proj=proj, problem=problem, threads=threads)
    fine, dofs = hier.fine, proj.fine_dofs
    err = norm_hcurl(fine, dofs, u_h - sol.u_ms)
    coarse_part = proj.prolongation @ sol.u_H
    err_dual = DualNorm(fine, dofs)(u_h - coarse_part)
    norm_f = f.hdiv_norm(fine) if hasattr(f, "hdiv_norm") else float("nan")
    return ErrorReport(hier.H, hier.h, m, err, err_dual, norm_hcurl(fine, dofs, u_h),
                       norm_f, time.perf_counter() - t0, {"solution": sol})


def observed_orders(H, errors):
    """Consecutive-level orders ``log(e_i / e_{i+1}) / log(H_i / H_{i+1})``; first entry None."""
    out = [None]
    for i in range(1, len(errors)):
        e0, e1 = errors[i - 1], errors[i]
        if e0 > 0 and e1 > 0:
            out.append(math.log(e0 / e1) / math.log(H[i - 1] / H[i]))
        else:
            out.append(None)
    return out


def fit_ratio(ms, errors):
    """Least-squares geometric ratio of ``errors`` vs ``ms`` (positive entries only)."""
    pts = [(m, math.log(e)) for m, e in zip(ms, errors) if e > 0]
    if len(pts) < 2:
        return None
    x, y = np.array(pts).T
    slope = np.polyfit(x, y, 1)[0]
    return float(math.exp(slope))


def decay_study(hier, coeff, f, m_list, threads=1, name="decay"):
    """Rows ``(m, e_m)`` with ``e_m = ||u_m - u_{m_max}||_{H(curl)}`` and the fitted ratio.

    The reference is the last entry of ``m_list``; the fit uses the entries
    below it whose patches do not yet cover the whole domain.
    """
    m_list = [int(m) for m in m_list]
    if sorted(m_list) != m_list or len(set(m_list)) != len(m_list):
        raise ValueError("m_list must be strictly increasing")
    proj = projection(hier)
    problem = CorrectorProblem(hier, coeff, proj)
    fine, dofs = hier.fine, proj.fine_dofs
    sols, secs = {}, {}
    for m in m_list:
        t0 = time.perf_counter()
        sols[m] = solve_multiscale(hier, coeff, f, m, proj=proj, problem=problem,
                                   threads=threads).u_ms
        secs[m] = time.perf_counter() - t0
        log.info("decay: m=%d done in %.1f s", m, secs[m])
    ref = sols[m_list[-1]]
    errors = [norm_hcurl(fine, dofs, sols[m] - ref) for m in m_list]
    m_sat = saturation_order(hier.coarse)
    fit_m = [m for m in m_list[:-1] if m < m_sat]
    ratio = fit_ratio(fit_m, [errors[m_list.index(m)] for m in fit_m])
    rows = [{"scenario": name, "H": hier.H, "h": hier.h, "m": m, "err_hcurl": e,
             "err_hdivdual": None, "order_hcurl": None, "order_hdivdual": None,
             "seconds": secs[m]} for m, e in zip(m_list, errors)]
    return rows, ratio


def convergence_study(scenario, H_list, h, m_rule="auto", threads=1):
    """Errors for each coarse size ``H`` on the common fine mesh of size ``h``.

    ``scenario`` must provide ``hierarchy(n, r)``, ``coefficient(mesh)``, a
    ``load`` field and a ``name``. ``m_rule`` is ``"auto"`` (``default_m``)
    or a fixed integer.
    """
    rows, reports = [], []
    for H in H_list:
        n = int(round(1.0 / H))
        r = int(round(math.log2(H / h)))
        if not (math.isclose(n * H, 1.0) and r >= 0 and math.isclose(H / 2 ** r, h)):
            raise ValueError("H=%g is not 2^r h with 1/H integer (h=%g)" % (H, h))
        hier = scenario.hierarchy(n, r)
        coeff = scenario.coefficient(hier.fine)
        m = default_m(H) if m_rule == "auto" else int(m_rule)
        rep = error_report(hier, coeff, scenario.load, m, threads=threads)
        log.info("convergence: H=%g m=%d err=%.4e (%.1f s)", H, m, rep.err_hcurl, rep.seconds)
        reports.append(rep)
    Hs = [rep.H for rep in reports]
    o1 = observed_orders(Hs, [rep.err_hcurl for rep in reports])
    o2 = observed_orders(Hs, [rep.err_hdivdual for rep in reports])
    for rep, a, b in zip(reports, o1, o2):
        rows.append({"scenario": scenario.name, "H": rep.H, "h": rep.h, "m": rep.m,
                     "err_hcurl": rep.err_hcurl, "err_hdivdual": rep.err_hdivdual,
                     "order_hcurl": a, "order_hdivdual": b, "seconds": rep.seconds})
    return rows


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows, path, timings=False):
    """Write study rows to a path or an open text stream.

    ``seconds`` stays empty unless ``timings`` (keeps output reproducible).
    """
    if hasattr(path, "write"):
        _write_rows(rows, path, timings)
        return
    with open(path, "w", newline="") as fh:
        _write_rows(rows, fh, timings)


def _write_rows(rows, fh, timings):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in rows:
        vals = [row.get(k) for k in CSV_FIELDS]
        if not timings:
            vals[-1] = None
        w.writerow([_fmt(v) for v in vals])
