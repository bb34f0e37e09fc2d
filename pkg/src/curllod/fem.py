"""Lowest-order finite element spaces and assembly.

Four spaces are supported: Nedelec edge elements (``"N"``), Raviart-Thomas face
elements (``"RT"``), continuous piecewise affine Lagrange elements (``"P1"``)
and piecewise constants (``"P0"``). Nedelec DOFs are mean tangential traces
along edges, RT DOFs mean normal components on faces, both w.r.t. the global
orientation stored on the mesh.

Matrices follow the convention ``M[j, k] = form(basis_k, basis_j)``: rows are
test functions, columns trial functions.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import _kernels as kern

SPACES = {"N": "edges", "RT": "faces", "P1": "vertices", "P0": "cells"}


class DofMap:
    """Global DOF numbering for one space on one mesh.

    ``entities`` lists, in DOF order, the mesh entities that carry a DOF;
    everything else is masked (eliminated essential boundary condition or
    outside the region of interest).
    """

    def __init__(self, mesh, space, entities):
        if space not in SPACES:
            raise ValueError("unknown space %r" % space)
        self.mesh = mesh
        self.space = space
        self.entities = np.asarray(entities, dtype=np.int64)
        n_ent = self._n_entities()
        lookup = np.full(n_ent, -1, dtype=np.int64)
        lookup[self.entities] = np.arange(self.entities.size)
        self.lookup = lookup

    @property
    def kind(self):
        return SPACES[self.space]

    def _n_entities(self):
        m = self.mesh
        return {"N": m.n_edges, "RT": m.n_faces, "P1": m.n_vertices, "P0": m.n_tets}[self.space]

    @property
    def n_dofs(self):
        return self.entities.size

    @property
    def mask(self):
        """True on entities that carry no DOF."""
        return self.lookup < 0

    def local_table(self, tets=None):
        """``(nt, k)`` table of DOF indices (``-1`` if masked) per tet."""
        m = self.mesh
        if tets is None:
            tets = slice(None)
        table = {"N": m.tet_edges, "RT": m.tet_faces, "P1": m.tets,
                 "P0": np.arange(m.n_tets)[:, None]}[self.space][tets]
        return self.lookup[table]

    # -- constructors ---------------------------------------------------------
    @classmethod
    def nedelec(cls, mesh, ringed=True):
        e = mesh.interior_edges if ringed else np.arange(mesh.n_edges)
        return cls(mesh, "N", e)

    @classmethod
    def raviart_thomas(cls, mesh, ringed=False):
        f = np.flatnonzero(~mesh.face_on_boundary) if ringed else np.arange(mesh.n_faces)
        return cls(mesh, "RT", f)

    @classmethod
    def lagrange(cls, mesh, ringed=True):
        v = mesh.interior_vertices if ringed else np.arange(mesh.n_vertices)
        return cls(mesh, "P1", v)

    @classmethod
    def p0(cls, mesh):
        return cls(mesh, "P0", np.arange(mesh.n_tets))

    def __repr__(self):
        return "DofMap(%s, %d dofs)" % (self.space, self.n_dofs)


def _as_tensor(values, nt, dtype):
    values = np.asarray(values, dtype=dtype)
    if values.ndim == 0:
        return np.broadcast_to(values * np.eye(3, dtype=dtype), (nt, 3, 3)).copy()
    if values.ndim == 1:
        if values.shape[0] != nt:
            raise ValueError("cell-wise scalar coefficient has wrong length")
        return values[:, None, None] * np.eye(3, dtype=dtype)[None]
    if values.shape == (3, 3):
        return np.broadcast_to(values, (nt, 3, 3)).copy()
    if values.shape != (nt, 3, 3):
        raise ValueError("coefficient must be scalar, (nt,), (3, 3) or (nt, 3, 3)")
    return values


@dataclass
class Coefficient:
    """Cell-wise constant ``mu`` (real symmetric 3x3) and ``kappa`` (complex 3x3)."""

    mu: np.ndarray
    kappa: np.ndarray
    descriptor: dict = field(default_factory=dict)

    @property
    def n_tets(self):
        return self.mu.shape[0]

    @property
    def is_real(self):
        return not np.iscomplexobj(self.kappa) or not np.any(self.kappa.imag)

    @property
    def dtype(self):
        return np.float64 if self.is_real else np.complex128

    @cached_property
    def kappa_values(self):
        """``kappa`` in the working dtype (real when the imaginary part vanishes)."""
        return np.ascontiguousarray(self.kappa.real) if self.is_real else self.kappa

    @classmethod
    def from_values(cls, mesh, mu, kappa, descriptor=None):
        nt = mesh.n_tets
        mu_t = _as_tensor(mu, nt, np.float64)
        if not np.allclose(mu_t, np.transpose(mu_t, (0, 2, 1))):
            raise ValueError("mu must be symmetric")
        if np.any(np.linalg.eigvalsh(mu_t)[:, 0] <= 0):
            raise ValueError("mu must be positive definite")
        kappa_t = _as_tensor(kappa, nt, np.complex128)
        return cls(mu_t, kappa_t, dict(descriptor or {}))

    @classmethod
    def constant(cls, mesh, mu=1.0, kappa=1.0):
        return cls.from_values(mesh, mu, kappa, {"kind": "constant", "mu": mu, "kappa": kappa})

    @classmethod
    def periodic_checkerboard(cls, mesh, delta, values, kappa=1.0):
        """``mu = values[0]`` on even cells of a ``delta``-grid, ``values[1]`` on odd."""
        idx = np.floor(mesh.barycenters / delta).astype(np.int64).sum(axis=1)
        mu = np.where(idx % 2 == 0, values[0], values[1]).astype(float)
        return cls.from_values(mesh, mu, kappa, {"kind": "periodic-checkerboard",
                                                 "delta": delta, "values": tuple(values),
                                                 "kappa": kappa})

    @classmethod
    def random_checkerboard(cls, mesh, scale, low, high, seed, kappa=1.0):
        """Scalar ``mu`` i.i.d. uniform in ``[low, high]`` on cubes of side ``scale``."""
        lo = np.asarray(mesh.box[0]) if mesh.box is not None else mesh.vertices.min(axis=0)
        hi = np.asarray(mesh.box[1]) if mesh.box is not None else mesh.vertices.max(axis=0)
        shape = np.maximum(np.ceil((hi - lo) / scale - 1e-9).astype(np.int64), 1)
        rng = np.random.default_rng(seed)
        vals = rng.uniform(low, high, size=tuple(shape[::-1]))  # indexed [k, j, i]
        cell = np.floor((mesh.barycenters - lo) / scale).astype(np.int64)
        cell = np.minimum(cell, shape - 1)
        mu = vals[cell[:, 2], cell[:, 1], cell[:, 0]]
        return cls.from_values(mesh, mu, kappa, {"kind": "random-checkerboard", "scale": scale,
                                                 "range": (low, high), "seed": seed,
                                                 "kappa": kappa})


def scatter(local, rows, cols, shape):
    """Sum ``(nt, a, b)`` local blocks into a CSR matrix; ``-1`` indices are dropped."""
    R = np.broadcast_to(rows[:, :, None], local.shape)
    C = np.broadcast_to(cols[:, None, :], local.shape)
    keep = (R >= 0) & (C >= 0)
    A = sp.coo_matrix((local[keep], (R[keep], C[keep])), shape=shape)
    A.sum_duplicates()
    return A.tocsr()


def scatter_dense(local, rows, cols, shape):
    """Dense counterpart of :func:`scatter` for small local systems."""
    R = np.broadcast_to(rows[:, :, None], local.shape)
    C = np.broadcast_to(cols[:, None, :], local.shape)
    keep = (R >= 0) & (C >= 0)
    out = np.zeros(shape, dtype=local.dtype)
    np.add.at(out, (R[keep], C[keep]), local[keep])
    return out


def scatter_vector(local, rows, n):
    keep = rows >= 0
    out = np.zeros(n, dtype=local.dtype)
    np.add.at(out, rows[keep], local[keep])
    return out


def _select(mesh, restriction):
    if restriction is None:
        return np.arange(mesh.n_tets)
    return np.asarray(restriction, dtype=np.int64)


def _check_mesh(mesh, dofs):
    if dofs.mesh is not mesh:
        raise ValueError("DOF map belongs to a different mesh")


def local_B(mesh, coeff, tets):
    """Local matrices of ``B`` on the given tets, ``(nt, 6, 6)``."""
    X = mesh.tet_coords[tets]
    K, M = kern.nedelec(X, mesh.tet_edge_signs[tets], coeff.mu[tets], coeff.kappa_values[tets])
    return K + M


def assemble_B(mesh, coeff, dofs, restriction=None):
    """``B[j, k] = (mu curl psi_k, curl psi_j) + (kappa psi_k, psi_j)`` over ``restriction``."""
    _check_mesh(mesh, dofs)
    if coeff.n_tets != mesh.n_tets:
        raise ValueError("coefficient has %d cells but mesh has %d tets" % (coeff.n_tets, mesh.n_tets))
    tets = _select(mesh, restriction)
    n = dofs.n_dofs
    if tets.size == 0:
        return sp.csr_matrix((n, n), dtype=coeff.dtype)
    loc = local_B(mesh, coeff, tets)
    rows = dofs.local_table(tets)
    return scatter(loc, rows, rows, (n, n))


def assemble_gradient(mesh, dofs_p1, dofs_n):
    """Matrix of ``grad: S1 -> N``, ``G[E, z] = +-1 / length(E)``."""
    _check_mesh(mesh, dofs_p1)
    _check_mesh(mesh, dofs_n)
    E = dofs_n.entities
    inv_len = 1.0 / mesh.edge_lengths[E]
    rows = np.repeat(np.arange(E.size), 2)
    cols = dofs_p1.lookup[mesh.edges[E]].ravel()
    vals = np.column_stack([-inv_len, inv_len]).ravel()
    keep = cols >= 0
    return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])),
                         shape=(dofs_n.n_dofs, dofs_p1.n_dofs))


def nedelec_values(mesh, tets, bary):
    """Basis values ``(nt, npts, 6, 3)`` of the local Nedelec functions at barycentric points."""
    X = mesh.tet_coords[tets]
    g, _ = kern.geometry(X)
    d = X[:, kern._EJ, :] - X[:, kern._EI, :]
    c = mesh.tet_edge_signs[tets] * np.linalg.norm(d, axis=2)
    I, J = kern._EI, kern._EJ
    vals = (bary[None, :, I, None] * g[:, None, J, :] - bary[None, :, J, None] * g[:, None, I, :])
    return vals * c[:, None, :, None]


def assemble_rhs(mesh, dofs_n, f, restriction=None):
    """Load vector ``b[E] = int f . psi_E`` with the 4-point degree-2 rule.

    ``f`` maps an ``(n, 3)`` array of points to ``(n, 3)`` values.
    """
    _check_mesh(mesh, dofs_n)
    tets = _select(mesh, restriction)
    X = mesh.tet_coords[tets]
    pts = np.einsum("qk,tki->tqi", kern.QUAD_BARY, X)
    fv = np.asarray(f(pts.reshape(-1, 3))).reshape(pts.shape)
    psi = nedelec_values(mesh, tets, kern.QUAD_BARY)
    w = kern.QUAD_WEIGHTS[None, :] * mesh.volumes[tets][:, None]
    loc = np.einsum("tq,tqi,tqai->ta", w, fv, psi)
    return scatter_vector(loc, dofs_n.local_table(tets), dofs_n.n_dofs)


def prolongate(hier, coarse_dofs=None, fine_dofs=None):
    """Embedding of coarse into fine Nedelec functions as a fine x coarse matrix."""
    c, f = hier.coarse, hier.fine
    coarse_dofs = coarse_dofs or DofMap.nedelec(c)
    fine_dofs = fine_dofs or DofMap.nedelec(f)
    par = hier.parent
    T = kern.transfer_nedelec(f.tet_coords, f.tet_edge_signs, c.tet_coords[par], c.tet_edge_signs[par])
    rows = np.broadcast_to(fine_dofs.local_table()[:, :, None], T.shape).ravel()
    cols = np.broadcast_to(coarse_dofs.local_table(par)[:, None, :], T.shape).ravel()
    vals = T.ravel()
    keep = (rows >= 0) & (cols >= 0) & (np.abs(vals) > 1e-12)
    rows, cols, vals = rows[keep], cols[keep], vals[keep]
    # a fine edge shared by several tets sees the same tangential trace: keep one copy
    key = rows * coarse_dofs.n_dofs + cols
    _, first = np.unique(key, return_index=True)
    return sp.csr_matrix((vals[first], (rows[first], cols[first])),
                         shape=(fine_dofs.n_dofs, coarse_dofs.n_dofs))


def curl_incidence(mesh, dofs_rt, dofs_n):
    """``D[F, E]`` with ``curl psi_E = sum_F D[F, E] phi_F``."""
    F = dofs_rt.entities
    fe = mesh.face_edges[F]  # edges (a,b), (a,c), (b,c) of the sorted face
    X = mesh.vertices[mesh.faces[F]]
    area = 0.5 * np.linalg.norm(np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]), axis=1)
    orient = np.array([1.0, -1.0, 1.0])
    vals = orient[None, :] * mesh.edge_lengths[fe] / area[:, None]
    rows = np.repeat(np.arange(F.size), 3)
    cols = dofs_n.lookup[fe].ravel()
    keep = cols >= 0
    return sp.csr_matrix((vals.ravel()[keep], (rows[keep], cols[keep])),
                         shape=(dofs_rt.n_dofs, dofs_n.n_dofs))


AUXILIARY = ("p1-stiffness", "rt-mass", "rt-div", "n-mass", "n-curl-curl",
             "n-rt-mass", "n-rt-curl-incidence", "mean-constraint-row")


def assemble_auxiliary(mesh, which, dofs, col_dofs=None, restriction=None):
    """Coefficient-free building blocks on (a subset of) a mesh.

    ``dofs`` numbers the rows, ``col_dofs`` (default: ``dofs``) the columns.

    =====================  ======  =======  =================================
    which                  rows    columns  entry
    =====================  ======  =======  =================================
    p1-stiffness           P1      P1       ``(grad phi_k, grad phi_j)``
    rt-mass                RT      RT       ``(phi_k, phi_j)``
    rt-div                 P0      RT       ``(div phi_k, 1_T)``
    n-mass                 N       N        ``(psi_k, psi_j)``
    n-curl-curl            N       N        ``(curl psi_k, curl psi_j)``
    n-rt-mass              N       RT       ``(phi_k, psi_j)``
    n-rt-curl-incidence    RT      N        ``curl psi_k = sum_j D[j, k] phi_j``
    mean-constraint-row    P1      --       ``int phi_j`` as a ``1 x n`` row
    =====================  ======  =======  =================================
    """
    col_dofs = dofs if col_dofs is None else col_dofs
    tets = _select(mesh, restriction)
    X = mesh.tet_coords[tets]
    es = mesh.tet_edge_signs[tets]
    fs = mesh.tet_face_signs[tets]
    rows = dofs.local_table(tets)
    cols = col_dofs.local_table(tets)
    shape = (dofs.n_dofs, col_dofs.n_dofs)
    if which == "p1-stiffness":
        return scatter(kern.p1_stiffness(X), rows, cols, shape)
    if which == "rt-mass":
        return scatter(kern.raviart_thomas(X, fs)[0], rows, cols, shape)
    if which == "rt-div":
        return scatter(kern.raviart_thomas(X, fs)[1][:, None, :], rows, cols, shape)
    if which == "n-mass":
        return scatter(kern.nedelec(X, es)[1], rows, cols, shape)
    if which == "n-curl-curl":
        return scatter(kern.nedelec(X, es)[0], rows, cols, shape)
    if which == "n-rt-mass":
        return scatter(kern.mixed_nedelec_rt(X, es, fs), rows, cols, shape)
    if which == "n-rt-curl-incidence":
        return curl_incidence(mesh, dofs, col_dofs)
    if which == "mean-constraint-row":
        loc = np.repeat((mesh.volumes[tets] / 4.0)[:, None, None], 4, axis=2)
        return scatter(loc, np.zeros((tets.size, 1), dtype=np.int64), rows, (1, dofs.n_dofs))
    raise ValueError("unknown auxiliary matrix %r (expected one of %s)" % (which, AUXILIARY))
