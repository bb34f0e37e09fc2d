"""Localized correctors and the multiscale Galerkin method.

For a coarse element ``T`` and patch order ``m`` the element corrector of a
coarse basis function ``psi_E`` solves, on the fine mesh restricted to the
patch ``N^m(T)``,

    B_patch(K_T psi_E, w) = -B_T(psi_E, w)   for all w in W_h(N^m(T)),

where ``W_h`` is the kernel of the projection ``P``. The kernel condition is
imposed with Lagrange multipliers for every row of ``P`` that touches the
patch. Summing element correctors over the elements of ``supp psi_E`` gives
the truncated corrector ``K_m psi_E``.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import _kernels as kern
from .fem import DofMap, assemble_rhs, local_B, scatter
from .mesh import Patch, patch
from .solver import SaddleFactorization, solve

log = logging.getLogger(__name__)

KERNEL_TOL = 1e-8


class CorrectorError(RuntimeError):
    pass


def default_m(H):
    """Oversampling order ``ceil(|log2 H|) + 1``."""
    return int(np.ceil(abs(np.log2(H)) - 1e-12)) + 1


def saturation_order(mesh):
    """Smallest ``m`` with ``N^m(T)`` equal to the whole mesh for every element."""
    m = 1
    while True:
        sizes = [len(patch(mesh, T, m)) for T in _extreme_tets(mesh)]
        if min(sizes) == mesh.n_tets:
            return m
        m += 1


def _extreme_tets(mesh):
    # tets touching a corner of the bounding box need the most layers
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
                        for z in (lo[2], hi[2])])
    out = set()
    for c in corners:
        v = int(np.argmin(np.linalg.norm(mesh.vertices - c, axis=1)))
        out.update(mesh.tets_of_vertex(v).tolist())
    return sorted(out)


@dataclass
class PatchSystem:
    """Fine unknowns, constraint rows and factorized saddle matrix on one patch."""

    patch: Patch
    free: np.ndarray  # global fine DOF indices of the unknowns
    constraint_rows: np.ndarray  # coarse DOF indices of the rows of P used
    factorization: SaddleFactorization = field(repr=False)

    @property
    def n_unknowns(self):
        return self.free.size


class CorrectorProblem:
    """Shared fine-scale data for all corrector computations on a hierarchy."""

    def __init__(self, hier, coeff, proj):
        self.hier = hier
        self.coeff = coeff
        self.proj = proj
        f = hier.fine
        self.coarse_dofs = proj.coarse_dofs
        self.fine_dofs = proj.fine_dofs
        self.Bloc = local_B(f, coeff, np.arange(f.n_tets))
        table = self.fine_dofs.local_table()
        n = self.fine_dofs.n_dofs
        self.B = scatter(self.Bloc, table, table, (n, n))
        par = hier.parent
        c = hier.coarse
        self.TN = kern.transfer_nedelec(f.tet_coords, f.tet_edge_signs,
                                        c.tet_coords[par], c.tet_edge_signs[par])
        self.Pcsc = proj.P.tocsc()
        self.fine_table = table

    # -- patch systems ------------------------------------------------------------
    def free_dofs(self, pat):
        """Fine DOFs inside the patch: off the patch boundary and off the domain boundary."""
        f = self.hier.fine
        fine_tets = self.hier.children_of(pat.tets)
        faces = f.tet_faces[fine_tets].ravel()
        uf, counts = np.unique(faces, return_counts=True)
        bnd_edges = np.unique(f.face_edges[uf[counts == 1]])
        edges = np.setdiff1d(np.unique(f.tet_edges[fine_tets]), bnd_edges)
        dofs = self.fine_dofs.lookup[edges]
        return np.sort(dofs[dofs >= 0])

    def patch_system(self, pat):
        free = self.free_dofs(pat)
        A = self.B[free][:, free]
        Cfree = self.Pcsc[:, free].tocsr()
        rows = np.flatnonzero(np.diff(Cfree.indptr) > 0)
        C = Cfree[rows]
        try:
            fac = SaddleFactorization(A, C, redundant="drop")
        except np.linalg.LinAlgError as exc:
            raise CorrectorError("patch of %d tets: %s" % (len(pat), exc)) from exc
        return PatchSystem(pat, free, rows, fac)

    def element_rhs(self, T, free):
        """Right-hand sides ``-B_T(Prol psi_E, .)`` on ``free`` for the interior edges of ``T``.

        Returns the coarse DOF indices of the edges and an ``(n_free, k)`` array.
        """
        c = self.hier.coarse
        cdofs = self.coarse_dofs.lookup[c.tet_edges[T]]
        local = np.flatnonzero(cdofs >= 0)
        kids = self.hier.children_of(T)
        loc = -np.einsum("tab,tbk->tak", self.Bloc[kids], self.TN[kids][:, :, local])
        rows = self.fine_table[kids]
        pos = np.searchsorted(free, rows)
        pos = np.where((rows >= 0) & (pos < free.size), pos, 0)
        ok = (rows >= 0) & (free[pos] == rows)
        rhs = np.zeros((free.size, local.size), dtype=loc.dtype)
        R = np.broadcast_to(np.where(ok, pos, -1)[:, :, None], loc.shape)
        K = np.broadcast_to(np.arange(local.size)[None, None, :], loc.shape)
        keep = R >= 0
        np.add.at(rhs, (R[keep], K[keep]), loc[keep])
        return cdofs[local], rhs

    # -- correctors -------------------------------------------------------------------
    def element_corrector(self, T, E, m, system=None):
        """Fine DOF vector of ``K_{T,m} psi_E`` (``E`` a global coarse edge index)."""
        c = self.hier.coarse
        if E not in c.tet_edges[T]:
            raise ValueError("edge %d is not an edge of element %d" % (E, T))
        sysm = system or self.patch_system(patch(c, T, m))
        edofs, rhs = self.element_rhs(T, sysm.free)
        k = np.flatnonzero(edofs == self.coarse_dofs.lookup[E])
        if k.size == 0:
            raise ValueError("edge %d is on the boundary" % E)
        try:
            w, _ = sysm.factorization.solve(rhs[:, k[0]])
        except np.linalg.LinAlgError as exc:
            raise CorrectorError("T=%d, E=%d, m=%d: %s" % (T, E, m, exc)) from exc
        out = np.zeros(self.fine_dofs.n_dofs, dtype=w.dtype)
        out[sysm.free] = w
        return out

    def corrector_basis(self, m, keep_elements=False, check=True, threads=1):
        """Truncated correctors ``K_m psi_E`` for all coarse interior edges.

        Elements with identical patches share one factorization. With
        ``keep_elements`` the individual element correctors are stored too.
        """
        c = self.hier.coarse
        groups = {}
        for T in range(c.n_tets):
            pat = patch(c, T, m)
            groups.setdefault(pat.key(), (pat, []))[1].append(T)
        log.info("correctors m=%d: %d elements, %d distinct patches", m, c.n_tets, len(groups))

        def run(item):
            pat, Ts = item
            sysm = self.patch_system(pat)
            out = []
            for T in Ts:
                edofs, rhs = self.element_rhs(T, sysm.free)
                if edofs.size == 0:
                    continue
                try:
                    W, _ = sysm.factorization.solve(rhs)
                except np.linalg.LinAlgError as exc:
                    raise CorrectorError("T=%d, m=%d: %s" % (T, m, exc)) from exc
                out.append((T, edofs, W))
            return sysm.free, sysm.patch, out

        n, k = self.fine_dofs.n_dofs, self.coarse_dofs.n_dofs
        acc = _SparseAccumulator((n, k), self.coeff.dtype)
        elements = {} if keep_elements else None
        items = list(groups.values())
        t0 = time.perf_counter()
        ex = ThreadPoolExecutor(threads) if threads > 1 else None
        try:
            results = ex.map(run, items) if ex else map(run, items)
            for i, (free, pat, out) in enumerate(results):
                for T, edofs, W in out:
                    acc.add(np.repeat(free, edofs.size), np.tile(edofs, free.size), W.ravel())
                    if keep_elements:
                        elements[T] = (edofs, free, W, pat)
                if (i + 1) % 200 == 0:
                    log.info("  %d/%d patches, %.0f s", i + 1, len(items), time.perf_counter() - t0)
        finally:
            if ex:
                ex.shutdown()
        K = acc.result()
        basis = CorrectorBasis(K, m, elements)
        if check:
            self.validate(basis)
        return basis

    def ideal_corrector(self):
        """Correctors from one saddle solve on the whole fine mesh."""
        Prol = self.proj.prolongation
        rhs = -(self.B @ Prol).toarray()
        fac = SaddleFactorization(self.B, self.proj.P, redundant="drop")
        W, _ = fac.solve(rhs)
        return CorrectorBasis(sp.csc_matrix(W), None, None)

    def validate(self, basis):
        """Kernel property ``P K = 0`` and support of element correctors."""
        scale = max(1.0, float(abs(basis.K).max()) if basis.K.nnz else 1.0)
        res = abs(self.proj.P @ basis.K)
        worst = float(res.max()) if res.nnz else 0.0
        if worst > KERNEL_TOL * scale:
            raise CorrectorError("kernel property violated: max |P K| = %.3e" % worst)
        if basis.elements:
            for T, (edofs, free, W, pat) in basis.elements.items():
                kern_res = np.abs(self.proj.P[:, free] @ W).max(initial=0.0)
                if kern_res > KERNEL_TOL * max(1.0, np.abs(W).max(initial=0.0)):
                    raise CorrectorError("element %d: |P K_T| = %.3e" % (T, kern_res))
                allowed = self.free_dofs(pat)
                if not np.all(np.isin(free, allowed)):
                    raise CorrectorError("element %d: corrector leaves its patch" % T)
        return True


class _SparseAccumulator:
    # sums COO triplets into a CSC matrix, coalescing in bounded chunks
    CHUNK = 20_000_000

    def __init__(self, shape, dtype):
        self.shape = shape
        self.total = sp.csc_matrix(shape, dtype=dtype)
        self.parts = []
        self.size = 0

    def add(self, rows, cols, vals):
        self.parts.append((rows, cols, vals))
        self.size += vals.size
        if self.size > self.CHUNK:
            self._flush()

    def _flush(self):
        if self.parts:
            r, c, v = (np.concatenate(x) for x in zip(*self.parts))
            self.total = self.total + sp.csc_matrix((v, (r, c)), shape=self.shape)
            self.parts, self.size = [], 0

    def result(self):
        self._flush()
        self.total.sort_indices()
        return self.total


@dataclass
class CorrectorBasis:
    """Columns ``K_m psi_E`` (fine x coarse) and optionally the element correctors.

    ``elements[T] = (coarse DOFs, fine DOFs, values (n_fine_local x k), patch)``.
    """

    K: sp.csc_matrix
    m: object
    elements: dict = field(default=None, repr=False)

    def element_vector(self, T, e, n):
        edofs, free, W, _ = self.elements[T]
        out = np.zeros(n, dtype=W.dtype)
        out[free] = W[:, list(edofs).index(e)]
        return out


@dataclass
class MultiscaleSolution:
    u_H: np.ndarray
    u_ms: np.ndarray
    basis: CorrectorBasis = field(repr=False)
    meta: dict = field(default_factory=dict)


def _galerkin_matrices(B, Phi):
    """``Phi^H B Phi`` with a dense path once ``Phi`` fills up."""
    n, k = Phi.shape
    if Phi.nnz > 0.05 * n * k:
        D = Phi.toarray()
        return D.conj().T @ (B @ D), D
    return (Phi.conj().T @ (B @ Phi)).toarray(), Phi


def solve_multiscale(hier, coeff, f, m, proj=None, problem=None, basis=None, threads=1):
    """Localized multiscale solution; ``m=None`` gives the ideal (full-domain) method."""
    from .falk_winther import projection

    t0 = time.perf_counter()
    proj = proj or projection(hier)
    problem = problem or CorrectorProblem(hier, coeff, proj)
    if basis is None:
        basis = problem.ideal_corrector() if m is None else problem.corrector_basis(m, threads=threads)
    Phi = (proj.prolongation + basis.K).tocsc()
    b = assemble_rhs(hier.fine, proj.fine_dofs, f)
    A_ms, Phi_op = _galerkin_matrices(problem.B, Phi)
    rhs = Phi_op.conj().T @ b
    if not np.any(rhs):
        u_H = np.zeros(A_ms.shape[0], dtype=A_ms.dtype)
    else:
        u_H = np.linalg.solve(A_ms, rhs)
    u_ms = Phi_op @ u_H
    meta = {"H": hier.H, "h": hier.h, "m": m, "coefficient": coeff.descriptor,
            "seconds": time.perf_counter() - t0}
    return MultiscaleSolution(np.asarray(u_H), np.asarray(u_ms), basis, meta)


def solve_reference(hier, coeff, f, dofs=None, B=None):
    """Fine Galerkin solution ``u_h`` on the fine mesh of the hierarchy."""
    fine = hier.fine
    dofs = dofs or DofMap.nedelec(fine)
    if B is None:
        loc = local_B(fine, coeff, np.arange(fine.n_tets))
        table = dofs.local_table()
        B = scatter(loc, table, table, (dofs.n_dofs, dofs.n_dofs))
    b = assemble_rhs(fine, dofs, f)
    if not np.any(b):
        return np.zeros(dofs.n_dofs, dtype=B.dtype)
    return solve(B, b)
