"""Matrix of the Falk-Winther cochain projection onto coarse Nedelec elements.

The projection ``pi_H`` maps fine ringed Nedelec functions to coarse ringed
Nedelec functions. Its matrix ``P = P1 + P2`` is assembled row by row: the
row of a coarse interior edge ``E`` only involves the extended edge patch
``omega_E`` (union of the vertex patches of both endpoints).

``P1`` realizes ``S1 = M1 + sum_y Q_y(.)(y) grad(lambda_y)``, ``P2`` the
correction ``fint_E ((id - S1) Q_E u) . t_E``. Every row is a linear
functional of the fine input; instead of solving the local problems for each
fine basis function, the adjoint local problems are solved once per row and
the resulting coarse test fields are paired with the fine basis through
per-fine-tet transfer operators.

Near the domain boundary the local spaces carry the boundary conditions of
the global space: vertex contributions and ``z0_y`` are dropped for vertices
on the boundary, the RT space of ``z1_E`` is free on boundary faces, and
``Q_E`` uses Nedelec/Lagrange functions vanishing on the boundary part of the
patch. This keeps the operator a projection that commutes with the gradient.
"""

import logging
import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from . import _kernels as kern
from .fem import DofMap, assemble_gradient, prolongate, scatter, scatter_dense
from .mesh import extended_edge_patch
from .solver import SaddleFactorization

log = logging.getLogger(__name__)

PROJECTION_TOL = 1e-8


class ProjectionError(RuntimeError):
    pass


def _local_numbering(table):
    """Unique global ids in ``table`` and the table rewritten in local ids."""
    ids = np.unique(table)
    return ids, np.searchsorted(ids, table)


class _Assembler:
    """Per-hierarchy precomputation shared by all rows."""

    def __init__(self, hier):
        self.hier = hier
        c, f = hier.coarse, hier.fine
        self.coarse_dofs = DofMap.nedelec(c)
        self.fine_dofs = DofMap.nedelec(f)

        Xc = c.tet_coords
        esc, fsc = c.tet_edge_signs, c.tet_face_signs
        self.Kc, Mc = kern.nedelec(Xc, esc)
        Gc = kern.gradient(Xc, esc)
        self.NGc = Mc @ Gc  # int psi_a . grad(lambda_k)
        self.RTm, self.RTdiv = kern.raviart_thomas(Xc, fsc)
        self.Wc = kern.mixed_nedelec_rt(Xc, esc, fsc)  # int psi_a . phi_k
        self.S1c = kern.p1_stiffness(Xc)

        # pairing of fine basis functions with coarse fields, per fine tet;
        # columns: 4 coarse RT faces, 4 coarse vertex gradients, 6 coarse curls
        par = hier.parent
        Xf = f.tet_coords
        esf, fsf = f.tet_edge_signs, f.tet_face_signs
        Kf, Mf = kern.nedelec(Xf, esf)
        Gf = kern.gradient(Xf, esf)
        Wf = kern.mixed_nedelec_rt(Xf, esf, fsf)
        TN = kern.transfer_nedelec(Xf, esf, Xc[par], esc[par])
        TP = kern.transfer_p1(Xf, Xc[par])
        TR = kern.transfer_rt(Xf, fsf, Xc[par], fsc[par])
        A = np.empty((f.n_tets, 6, 14))
        A[:, :, :4] = Wf @ TR
        A[:, :, 4:8] = Mf @ Gf @ TP
        A[:, :, 8:] = Kf @ TN
        self.pairing = A
        self.fine_table = self.fine_dofs.local_table()
        self._components = {}
        self._vertex_cache = {}

    # -- coarse local problems ------------------------------------------------
    def patch(self, E):
        return extended_edge_patch(self.hier.coarse, E)

    def z1(self, E, pat):
        """RT coefficients of ``z1_E`` on the patch faces (zero on artificial faces).

        Mixed Poisson problem with ``div z = -(delta z0)_E``; the normal flux
        through each connected piece of the domain boundary inside the patch is
        fixed to the signed count of edge endpoints on that piece.
        """
        c = self.hier.coarse
        tets = pat.tets
        faces, ltab = _local_numbering(c.tet_faces[tets])
        free = ~pat.artificial_faces
        fid = np.full(faces.size, -1, dtype=np.int64)
        fid[free] = np.arange(free.sum())
        ftab = fid[ltab]
        nfree = int(free.sum())
        A = scatter_dense(self.RTm[tets], ftab, ftab, (nfree, nfree))
        cells = np.arange(tets.size)[:, None]
        C = scatter_dense(self.RTdiv[tets][:, None, :], cells, ftab, (tets.size, nfree))
        g = -c.volumes[tets] * self._delta_z0(E, tets)

        verts = pat.vertices
        label = self.boundary_components(pat)
        bface = c.face_on_boundary[c.tet_faces[tets]]
        if bface.any():
            # component of a boundary face = component of its first vertex
            fcomp = label[np.searchsorted(verts, c.faces[c.tet_faces[tets]][..., 0])]
            rows = np.where(bface, fcomp, -1)
            ncomp = int(label.max()) + 1
            flux = scatter_dense(self.RTdiv[tets][:, :, None] * np.eye(4)[None], rows, ftab,
                           (ncomp, nfree))
            h = np.zeros(ncomp)
            for y, sgn in zip(c.edges[E], (-1.0, 1.0)):
                if c.vertex_on_boundary[y]:
                    h[label[np.searchsorted(verts, y)]] += sgn
            C = np.vstack([C, flux])
            g = np.concatenate([g, h])
        fac = SaddleFactorization(A, C, gauge=True)
        z, _ = fac.solve(np.zeros(nfree), g)
        out = np.zeros(faces.size)
        out[free] = z
        return faces, out

    def boundary_components(self, pat):
        """Connected pieces of the domain boundary inside the patch.

        Returns a label per patch vertex: ``-1`` off the boundary, otherwise the
        piece index (pieces are joined through boundary edges of the patch).
        """
        key = pat.key()
        hit = self._components.get(key)
        if hit is not None:
            return hit
        c = self.hier.coarse
        verts, edges = pat.vertices, pat.edges
        bv = c.vertex_on_boundary[verts]
        label = np.full(verts.size, -1, dtype=np.int64)
        if bv.any():
            be = np.searchsorted(verts, c.edges[edges[c.edge_on_boundary[edges]]])
            g = sp.coo_matrix((np.ones(len(be)), (be[:, 0], be[:, 1])),
                              shape=(verts.size, verts.size))
            _, lab = connected_components(g, directed=False)
            label[bv] = np.unique(lab[bv], return_inverse=True)[1]
        self._components[key] = label
        return label

    def _delta_z0(self, E, tets):
        c = self.hier.coarse
        y1, y2 = c.edges[E]
        return self._z0(y2, tets) - self._z0(y1, tets)

    def _z0(self, y, tets):
        c = self.hier.coarse
        if c.vertex_on_boundary[y]:
            return np.zeros(tets.size)
        inside = np.any(c.tets[tets] == y, axis=1)
        meas = c.volumes[c.tets_of_vertex(y)].sum()
        return inside / meas

    def vertex_weights(self, y):
        """Adjoint of ``u -> (Q_y u)(y)``: weights of the vertex hats on ``omega_y``."""
        hit = self._vertex_cache.get(y)
        if hit is None:
            hit = self._vertex_cache[y] = self._vertex_weights(y)
        return hit

    def _vertex_weights(self, y):
        c = self.hier.coarse
        tets = c.tets_of_vertex(y)
        verts, vtab = _local_numbering(c.tets[tets])
        nv = verts.size
        A = scatter_dense(self.S1c[tets], vtab, vtab, (nv, nv))
        mean = scatter_dense(np.repeat((c.volumes[tets] / 4.0)[:, None, None], 4, axis=2),
                       np.zeros((tets.size, 1), dtype=np.int64), vtab, (1, nv))
        rhs = np.zeros(nv)
        rhs[np.searchsorted(verts, y)] = 1.0
        w, _ = SaddleFactorization(A, mean).solve(rhs)
        return tets, w[vtab]  # per tet of omega_y, per local vertex

    def s1_coefficients(self, E, pat):
        """Per-tet coefficients ``(zF, gV)`` of the ``E``-th ``S1`` functional."""
        c = self.hier.coarse
        tets = pat.tets
        length = c.edge_lengths[E]
        faces, z = self.z1(E, pat)
        zF = z[np.searchsorted(faces, c.tet_faces[tets])] / length
        gV = np.zeros((tets.size, 4))
        for y, sgn in zip(c.edges[E], (-1.0, 1.0)):
            if c.vertex_on_boundary[y]:
                continue
            ty, wy = self.vertex_weights(y)
            gV[np.searchsorted(tets, ty)] += sgn * wy / length
        return zF, gV

    def p2_coefficients(self, E, pat, zF, gV1):
        """Per-tet coefficients ``(gV, cE)`` of the ``E``-th ``P2`` functional."""
        c = self.hier.coarse
        tets = pat.tets
        edges, etab = _local_numbering(c.tet_edges[tets])
        verts, vtab = _local_numbering(c.tets[tets])
        ne_free = ~c.edge_on_boundary[edges]
        eid = np.full(edges.size, -1, dtype=np.int64)
        eid[ne_free] = np.arange(ne_free.sum())
        et = eid[etab]
        n_e = int(ne_free.sum())

        # S1 functional applied to coarse basis functions of the patch
        loc = np.einsum("tak,tk->ta", self.Wc[tets], zF) + np.einsum("tak,tk->ta", self.NGc[tets], gV1)
        p1loc = np.zeros(edges.size)
        np.add.at(p1loc, etab, loc)
        r = -p1loc[ne_free]
        r[eid[np.searchsorted(edges, E)]] += 1.0

        S = scatter_dense(self.Kc[tets], et, et, (n_e, n_e))
        # gradient constraints: hats of off-boundary vertices, plus one indicator
        # per connected piece of the domain boundary inside the patch
        V = self.constraint_basis(pat)
        T = V.T @ scatter_dense(np.transpose(self.NGc[tets], (0, 2, 1)), vtab, et, (verts.size, n_e))
        fac = SaddleFactorization(S, T, gauge=True)
        w, lam = fac.solve(r)
        cE = np.where(et >= 0, w[np.maximum(et, 0)], 0.0)
        gV = (V @ lam)[vtab]
        return gV, cE

    def constraint_basis(self, pat):
        """Vertex values (``|verts| x k``) spanning ``{tau in S1(patch): grad tau in N(patch)}``.

        Hats of off-boundary vertices plus one indicator per boundary piece.
        """
        label = self.boundary_components(pat)
        inner = np.flatnonzero(label < 0)
        bidx = np.flatnonzero(label >= 0)
        rows = np.concatenate([inner, bidx])
        cols = np.concatenate([np.arange(inner.size), inner.size + label[bidx]])
        ncols = inner.size + (int(label.max()) + 1 if bidx.size else 0)
        V = np.zeros((label.size, ncols))
        V[rows, cols] = 1.0
        return V

    # -- rows --------------------------------------------------------------------
    def fine_row(self, pat, coef):
        """Pair per-coarse-tet test fields ``coef (|patch|, 14)`` with all fine basis functions."""
        fine = self.hier.children_of(pat.tets)
        pos = np.searchsorted(pat.tets, self.hier.parent[fine])
        vals = np.einsum("tak,tk->ta", self.pairing[fine], coef[pos]).ravel()
        cols = self.fine_table[fine].ravel()
        keep = cols >= 0
        cols, vals = cols[keep], vals[keep]
        ucols, inv = np.unique(cols, return_inverse=True)
        return ucols, np.bincount(inv, weights=vals, minlength=ucols.size)

    def rows(self, E):
        """Fine-DOF columns and ``P1``/``P2`` values of the row of coarse edge ``E``."""
        pat = self.patch(E)
        n = len(pat)
        zF, gV1 = self.s1_coefficients(E, pat)
        gV2, cE = self.p2_coefficients(E, pat, zF, gV1)
        coef1 = np.zeros((n, 14))
        coef1[:, :4] = zF
        coef1[:, 4:8] = gV1
        coef2 = np.zeros((n, 14))
        coef2[:, 4:8] = gV2
        coef2[:, 8:] = cE
        cols1, v1 = self.fine_row(pat, coef1)
        cols2, v2 = self.fine_row(pat, coef2)
        return pat, (cols1, v1), (cols2, v2)


_CACHE = weakref.WeakKeyDictionary()


def _assembler(hier):
    a = _CACHE.get(hier)
    if a is None:
        a = _CACHE[hier] = _Assembler(hier)
    return a


def _check_edge(hier, E):
    c = hier.coarse
    if not 0 <= E < c.n_edges or c.edge_on_boundary[E]:
        raise ValueError("edge %d is not an interior coarse edge" % E)


def z1_field(hier, E):
    """``z1_E`` as ``(faces, coefficients)`` on the coarse faces of ``omega_E``."""
    _check_edge(hier, E)
    a = _assembler(hier)
    return a.z1(E, a.patch(E))


@dataclass
class ProjectionMatrix:
    """``P = P1 + P2`` (coarse interior edges x fine interior edges) and its patches."""

    P: sp.csr_matrix
    P1: sp.csr_matrix
    P2: sp.csr_matrix
    prolongation: sp.csr_matrix
    patches: list = field(repr=False)
    hier: object = field(repr=False)
    coarse_dofs: DofMap = field(repr=False)
    fine_dofs: DofMap = field(repr=False)

    @property
    def shape(self):
        return self.P.shape

    def projection_defect(self):
        """Max-abs entry of ``P Prol - I`` and its location."""
        D = (self.P @ self.prolongation).toarray() - np.eye(self.P.shape[0])
        i, j = np.unravel_index(np.argmax(np.abs(D)), D.shape)
        return float(abs(D[i, j])), (int(i), int(j))

    def locality_violations(self):
        """Entries of ``P`` outside the fine edges of the children of ``omega_E``."""
        return _locality_violations(self)

    def dump(self, path):
        """Coordinate text format, one ``row col re im`` line per stored entry."""
        P = self.P.tocoo()
        order = np.lexsort((P.col, P.row))
        with open(path, "w") as fh:
            for k in order:
                v = complex(P.data[k])
                fh.write("%d %d %.17g %.17g\n" % (P.row[k], P.col[k], v.real, v.imag))


def _locality_violations(proj):
    fine = proj.fine_dofs.mesh
    bad = []
    P = proj.P.tocsr()
    for i, pat in enumerate(proj.patches):
        allowed = np.unique(fine.tet_edges[proj.hier.children_of(pat.tets)])
        cols = proj.fine_dofs.entities[P.indices[P.indptr[i]:P.indptr[i + 1]]]
        extra = np.setdiff1d(cols, allowed)
        if extra.size:
            bad.append((i, extra))
    return bad


def _assemble(hier, which=("P1", "P2")):
    a = _assembler(hier)
    E_all = a.coarse_dofs.entities
    data = {k: ([], [], []) for k in ("P1", "P2")}
    patches = []
    for i, E in enumerate(E_all):
        try:
            pat, r1, r2 = a.rows(E)
        except np.linalg.LinAlgError as exc:
            raise type(exc)("coarse edge %d: %s" % (E, exc)) from exc
        patches.append(pat)
        for key, (cols, vals) in (("P1", r1), ("P2", r2)):
            rows, cs, vs = data[key]
            rows.append(np.full(cols.size, i))
            cs.append(cols)
            vs.append(vals)
    shape = (a.coarse_dofs.n_dofs, a.fine_dofs.n_dofs)
    out = {}
    for key in which:
        rows, cs, vs = data[key]
        if rows:
            out[key] = sp.csr_matrix((np.concatenate(vs), (np.concatenate(rows), np.concatenate(cs))),
                                     shape=shape)
        else:
            out[key] = sp.csr_matrix(shape)
    return out, patches


def assemble_P1(hier):
    """Matrix of ``S1`` (the ``M1`` part plus vertex-patch Neumann evaluations)."""
    return _assemble(hier, ("P1",))[0]["P1"]


def assemble_P2(hier):
    """Matrix of ``u -> fint_E ((id - S1) Q_E u) . t_E``."""
    return _assemble(hier, ("P2",))[0]["P2"]


def projection(hier, check=True):
    """Assemble ``P = P1 + P2`` and validate the projection and locality invariants."""
    mats, patches = _assemble(hier)
    a = _assembler(hier)
    Prol = prolongate(hier, a.coarse_dofs, a.fine_dofs)
    P = (mats["P1"] + mats["P2"]).tocsr()
    proj = ProjectionMatrix(P, mats["P1"], mats["P2"], Prol, patches, hier,
                            a.coarse_dofs, a.fine_dofs)
    if check:
        err, (i, j) = proj.projection_defect()
        if err > PROJECTION_TOL:
            raise ProjectionError("P Prol - I has entry %.3e at coarse DOFs (%d, %d) "
                                  "(edges %d, %d)" % (err, i, j, a.coarse_dofs.entities[i],
                                                      a.coarse_dofs.entities[j]))
        bad = proj.locality_violations()
        if bad:
            i, extra = bad[0]
            raise ProjectionError("row of coarse edge %d has %d entries outside its patch"
                                  % (a.coarse_dofs.entities[i], extra.size))
        log.info("projection: %d x %d, nnz %d, |P Prol - I| = %.2e",
                 P.shape[0], P.shape[1], P.nnz, err)
    return proj


def hcurl_gram(mesh, dofs, restriction=None):
    """``M + K`` (identity coefficients) for the H(curl) inner product."""
    tets = np.arange(mesh.n_tets) if restriction is None else np.asarray(restriction)
    K, M = kern.nedelec(mesh.tet_coords[tets], mesh.tet_edge_signs[tets])
    t = dofs.local_table(tets)
    return scatter(K + M, t, t, (dofs.n_dofs, dofs.n_dofs))


def stability_constant(proj, samples=20, seed=0):
    """Sampled ``max ||P v||_{H(curl)} / ||v||_{H(curl)}`` over random fine ``v``.

    The samples mix white noise, prolongated coarse fields, and fine gradients,
    each normalized; the result is a lower bound of the operator norm.
    """
    hier = proj.hier
    rng = np.random.default_rng(seed)
    Gh = hcurl_gram(hier.fine, proj.fine_dofs)
    GH = hcurl_gram(hier.coarse, proj.coarse_dofs)
    grad = assemble_gradient(hier.fine, DofMap.lagrange(hier.fine), proj.fine_dofs)
    best = 0.0
    for k in range(samples):
        kind = k % 3
        if kind == 0:
            v = rng.standard_normal(proj.fine_dofs.n_dofs)
        elif kind == 1:
            v = proj.prolongation @ rng.standard_normal(proj.coarse_dofs.n_dofs)
            v += 0.1 * rng.standard_normal(v.size) * np.abs(v).max()
        else:
            v = grad @ rng.standard_normal(grad.shape[1])
        nv = np.sqrt(v @ (Gh @ v))
        pv = proj.P @ v
        best = max(best, float(np.sqrt(pv @ (GH @ pv)) / nv))
    log.info("stability: sampled ||P|| >= %.4f over %d samples", best, samples)
    return best
