"""Tetrahedral meshes of boxes, nested refinement, and element patches.

Edges are stored as vertex pairs ``(y1, y2)`` with ``y1 < y2``; the global unit
tangent of an edge points from ``y1`` to ``y2``. Faces are stored as sorted
vertex triples ``(a, b, c)``; their global normal is the normalised
``(x_b - x_a) x (x_c - x_a)``.
"""

from dataclasses import dataclass
from functools import cached_property
from itertools import permutations

import numpy as np

from ._kernels import LOCAL_EDGES, LOCAL_FACES

# Kuhn triangulation of the unit cube: one tetrahedron per axis permutation,
# all sharing the main diagonal from (0,0,0) to (1,1,1)
KUHN_PERMUTATIONS = list(permutations(range(3)))

_FACE_EDGES = np.array([[0, 1], [0, 2], [1, 2]])


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _csr_incidence(items, n_targets):
    """Invert an ``(n, k)`` item -> target table into CSR arrays."""
    flat = items.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_targets)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return indptr, order // items.shape[1]


class Mesh:
    """Conforming tetrahedral mesh with oriented edges and faces.

    Use :func:`build_box_mesh` for structured box meshes; the constructor accepts
    any conforming vertex/tet pair (boundary entities are detected
    topologically as faces owned by a single tetrahedron).
    """

    def __init__(self, vertices, tets, grid=None, box=None):
        vertices = np.asarray(vertices, dtype=np.float64)
        tets = np.asarray(tets, dtype=np.int64)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise ValueError("vertices must have shape (nv, 3)")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise ValueError("tets must have shape (nt, 4)")
        self.vertices = _frozen(vertices)
        self.tets = _frozen(tets)
        self.grid = grid
        self.box = box
        self._build_entities()

    def _build_entities(self):
        nv = len(self.vertices)
        nt = len(self.tets)
        T = self.tets

        loc = T[:, LOCAL_EDGES]  # (nt, 6, 2)
        pairs = np.sort(loc.reshape(-1, 2), axis=1)
        edges, inv = np.unique(pairs, axis=0, return_inverse=True)
        self.edges = _frozen(edges)
        self.tet_edges = _frozen(inv.reshape(nt, 6))
        self.tet_edge_signs = _frozen(np.where(loc[:, :, 0] < loc[:, :, 1], 1.0, -1.0))

        locf = T[:, LOCAL_FACES]  # (nt, 4, 3)
        tri = np.sort(locf.reshape(-1, 3), axis=1)
        faces, finv = np.unique(tri, axis=0, return_inverse=True)
        self.faces = _frozen(faces)
        self.tet_faces = _frozen(finv.reshape(nt, 4))
        self.tet_face_signs = _frozen(self._face_signs())

        face_count = np.bincount(self.tet_faces.ravel(), minlength=len(faces))
        if face_count.max(initial=0) > 2:
            raise ValueError("non-manifold mesh: a face is shared by more than two tets")
        bface = face_count == 1
        self.face_on_boundary = _frozen(bface)

        edge_keys = edges[:, 0] * nv + edges[:, 1]
        fe = faces[:, _FACE_EDGES]  # (nf, 3, 2)
        fkeys = fe[:, :, 0] * nv + fe[:, :, 1]
        self.face_edges = _frozen(np.searchsorted(edge_keys, fkeys))

        bedge = np.zeros(len(edges), dtype=bool)
        bedge[self.face_edges[bface].ravel()] = True
        self.edge_on_boundary = _frozen(bedge)
        bvert = np.zeros(nv, dtype=bool)
        bvert[faces[bface].ravel()] = True
        self.vertex_on_boundary = _frozen(bvert)

    def _face_signs(self):
        X = self.vertices
        F = self.faces[self.tet_faces]  # (nt, 4, 3) sorted global vertices
        a, b, c = X[F[..., 0]], X[F[..., 1]], X[F[..., 2]]
        nrm = np.cross(b - a, c - a)
        opposite = X[self.tets]  # local vertex k is opposite face k
        out = (a + b + c) / 3.0 - opposite
        return np.where((nrm * out).sum(axis=2) > 0, 1.0, -1.0)

    # -- sizes ---------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_tets(self):
        return len(self.tets)

    # -- geometry ------------------------------------------------------------
    @cached_property
    def tet_coords(self):
        return _frozen(self.vertices[self.tets])

    @cached_property
    def volumes(self):
        X = self.tet_coords
        J = X[:, 1:, :] - X[:, :1, :]
        return _frozen(np.abs(np.linalg.det(J)) / 6.0)

    @cached_property
    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return _frozen(np.linalg.norm(d, axis=1))

    @cached_property
    def edge_tangents(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return _frozen(d / self.edge_lengths[:, None])

    @cached_property
    def edge_midpoints(self):
        return _frozen(0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]]))

    @cached_property
    def barycenters(self):
        return _frozen(self.tet_coords.mean(axis=1))

    @property
    def h(self):
        """Maximal element diameter."""
        X = self.tet_coords
        d = X[:, :, None, :] - X[:, None, :, :]
        return float(np.sqrt((d * d).sum(axis=3)).max())

    @property
    def spacing(self):
        """Grid spacing of a structured box mesh (cube side), else the diameter ``h``."""
        if self.grid is None or self.box is None:
            return self.h
        ext = np.asarray(self.box[1]) - np.asarray(self.box[0])
        return float((ext / np.asarray(self.grid)).max())

    # -- incidence -------------------------------------------------------------
    @cached_property
    def vertex_tets(self):
        """CSR ``(indptr, tets)`` of the tets around each vertex."""
        return _csr_incidence(self.tets, self.n_vertices)

    @cached_property
    def edge_tets(self):
        return _csr_incidence(self.tet_edges, self.n_edges)

    @cached_property
    def face_tets(self):
        """``(nf, 2)`` owning tets per face, ``-1`` where absent."""
        ptr, idx = _csr_incidence(self.tet_faces, self.n_faces)
        out = np.full((self.n_faces, 2), -1, dtype=np.int64)
        counts = np.diff(ptr)
        out[:, 0] = idx[ptr[:-1]]
        two = counts == 2
        out[two, 1] = idx[ptr[:-1][two] + 1]
        return _frozen(out)

    def tets_of_vertex(self, y):
        ptr, idx = self.vertex_tets
        return idx[ptr[y]:ptr[y + 1]]

    # -- interior numbering ----------------------------------------------------
    @cached_property
    def interior_edges(self):
        return _frozen(np.flatnonzero(~self.edge_on_boundary))

    @cached_property
    def interior_vertices(self):
        return _frozen(np.flatnonzero(~self.vertex_on_boundary))

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces - self.n_tets

    def write(self, path):
        """Plain-text dump: ``v x y z`` per vertex, ``t i0 i1 i2 i3`` per tet."""
        with open(path, "w") as fh:
            for x in self.vertices:
                fh.write("v %.17g %.17g %.17g\n" % tuple(x))
            for t in self.tets:
                fh.write("t %d %d %d %d\n" % tuple(t))

    def __repr__(self):
        return "Mesh(nv=%d, ne=%d, nf=%d, nt=%d)" % (
            self.n_vertices, self.n_edges, self.n_faces, self.n_tets)


def read_mesh(path):
    verts, tets = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "t":
                tets.append([int(p) for p in parts[1:5]])
    return Mesh(np.array(verts), np.array(tets, dtype=np.int64))


def _grid_shape(n):
    if np.isscalar(n):
        n = (int(n),) * 3
    n = tuple(int(k) for k in n)
    if len(n) != 3 or min(n) < 1:
        raise ValueError("subdivisions per axis must be >= 1, got %r" % (n,))
    return n


def build_box_mesh(n, box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))):
    """Kuhn triangulation of an axis-aligned box with ``n`` cubes per axis.

    Each sub-cube is split into six tetrahedra sharing its main diagonal; tet
    ``6 * cube + p`` follows the axis permutation ``KUHN_PERMUTATIONS[p]``.
    """
    nx, ny, nz = _grid_shape(n)
    lo = np.asarray(box[0], dtype=float)
    hi = np.asarray(box[1], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("box must have positive extent")
    xs = [np.linspace(lo[d], hi[d], k + 1) for d, k in enumerate((nx, ny, nz))]
    Z, Y, X = np.meshgrid(xs[2], xs[1], xs[0], indexing="ij")
    vertices = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    step = np.array([1, nx + 1, (nx + 1) * (ny + 1)], dtype=np.int64)
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    base = (i.ravel() * step[0] + j.ravel() * step[1] + k.ravel() * step[2])
    tets = np.empty((base.size, 6, 4), dtype=np.int64)
    for p, perm in enumerate(KUHN_PERMUTATIONS):
        tets[:, p, 0] = base
        tets[:, p, 1] = base + step[perm[0]]
        tets[:, p, 2] = base + step[perm[0]] + step[perm[1]]
        tets[:, p, 3] = base + step.sum()
    return Mesh(vertices, tets.reshape(-1, 4), grid=(nx, ny, nz), box=(tuple(lo), tuple(hi)))


def locate_kuhn(mesh, points):
    """Index of the Kuhn tet of a box mesh containing each point (interior points)."""
    if mesh.grid is None:
        raise ValueError("point location requires a structured box mesh")
    nx, ny, nz = mesh.grid
    lo = np.asarray(mesh.box[0])
    hi = np.asarray(mesh.box[1])
    shape = np.array([nx, ny, nz])
    s = (np.asarray(points) - lo) / (hi - lo) * shape
    cell = np.clip(np.floor(s).astype(np.int64), 0, shape - 1)
    xi = s - cell
    # descending order of local coordinates selects the permutation
    order = np.argsort(-xi, axis=1, kind="stable")
    lookup = {perm: p for p, perm in enumerate(KUHN_PERMUTATIONS)}
    perm_idx = np.array([lookup[tuple(o)] for o in order], dtype=np.int64)
    cube = cell[:, 0] + nx * (cell[:, 1] + ny * cell[:, 2])
    return 6 * cube + perm_idx


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """A coarse mesh, its ``r``-fold red refinement and the fine->coarse parent map."""

    coarse: Mesh
    fine: Mesh
    parent: np.ndarray
    r: int

    @cached_property
    def children(self):
        """CSR ``(indptr, fine tets)`` grouped by coarse parent."""
        return _csr_incidence(self.parent[:, None], self.coarse.n_tets)

    def children_of(self, tets):
        ptr, idx = self.children
        tets = np.atleast_1d(np.asarray(tets, dtype=np.int64))
        return np.concatenate([idx[ptr[t]:ptr[t + 1]] for t in tets]) if tets.size else \
            np.zeros(0, dtype=np.int64)

    @property
    def H(self):
        """Coarse grid spacing."""
        return self.coarse.spacing

    @property
    def h(self):
        """Fine grid spacing."""
        return self.fine.spacing


def refine(mesh, r):
    """Red refinement applied ``r`` times; returns the nested hierarchy.

    On Kuhn box meshes one red (Bey) refinement step of every tetrahedron is
    exactly the Kuhn triangulation of the halved grid, so the fine mesh is
    generated directly and each fine tet is assigned to the coarse tet that
    contains its barycenter.
    """
    if r < 0:
        raise ValueError("refinement levels must be >= 0")
    if mesh.grid is None:
        raise ValueError("refine requires a structured box mesh")
    fine = build_box_mesh(tuple(g * 2 ** r for g in mesh.grid), mesh.box)
    parent = locate_kuhn(mesh, fine.barycenters)
    counts = np.bincount(parent, minlength=mesh.n_tets)
    if np.any(counts != 8 ** r):
        raise RuntimeError("refinement is not nested")
    return MeshHierarchy(mesh, fine, _frozen(parent), int(r))


class Patch:
    """A set of tetrahedra with boundary classification of its entities.

    ``boundary_*`` masks (over ``vertices``/``edges``/``faces`` of the patch)
    flag entities on the patch boundary, which includes parts of the domain
    boundary; ``artificial_*`` flag those on the patch boundary but not on the
    domain boundary.
    """

    def __init__(self, mesh, tets, seed=None, m=0):
        self.mesh = mesh
        self.tets = _frozen(np.unique(np.asarray(tets, dtype=np.int64)))
        self.seed = None if seed is None else _frozen(np.unique(np.asarray(seed, dtype=np.int64)))
        self.m = int(m)

    def __len__(self):
        return len(self.tets)

    @cached_property
    def tet_mask(self):
        mask = np.zeros(self.mesh.n_tets, dtype=bool)
        mask[self.tets] = True
        return _frozen(mask)

    @cached_property
    def vertices(self):
        return _frozen(np.unique(self.mesh.tets[self.tets]))

    @cached_property
    def edges(self):
        return _frozen(np.unique(self.mesh.tet_edges[self.tets]))

    @cached_property
    def faces(self):
        return _frozen(np.unique(self.mesh.tet_faces[self.tets]))

    @cached_property
    def _boundary_faces_global(self):
        f = self.mesh.tet_faces[self.tets].ravel()
        counts = np.bincount(f, minlength=self.mesh.n_faces)
        return np.flatnonzero(counts == 1)

    @cached_property
    def boundary_faces(self):
        return _frozen(np.isin(self.faces, self._boundary_faces_global))

    @cached_property
    def boundary_edges(self):
        e = np.unique(self.mesh.face_edges[self._boundary_faces_global])
        return _frozen(np.isin(self.edges, e))

    @cached_property
    def boundary_vertices(self):
        v = np.unique(self.mesh.faces[self._boundary_faces_global])
        return _frozen(np.isin(self.vertices, v))

    @property
    def artificial_faces(self):
        return self.boundary_faces & ~self.mesh.face_on_boundary[self.faces]

    @property
    def artificial_edges(self):
        return self.boundary_edges & ~self.mesh.edge_on_boundary[self.edges]

    @property
    def artificial_vertices(self):
        return self.boundary_vertices & ~self.mesh.vertex_on_boundary[self.vertices]

    @property
    def interior_edges(self):
        """Patch edges off the patch boundary (carry ringed Nedelec DOFs)."""
        return self.edges[~self.boundary_edges]

    def key(self):
        return self.tets.tobytes()

    def __repr__(self):
        return "Patch(%d tets, m=%d)" % (len(self.tets), self.m)


def neighborhood(mesh, tets):
    """Tets sharing at least one vertex with the given element set."""
    tets = np.asarray(tets, dtype=np.int64)
    vmask = np.zeros(mesh.n_vertices, dtype=bool)
    vmask[mesh.tets[tets].ravel()] = True
    return np.flatnonzero(vmask[mesh.tets].any(axis=1))


def patch(mesh, seed, m):
    """The order-``m`` element patch ``N^m(seed)``."""
    if m < 1:
        raise ValueError("patch order m must be >= 1")
    seed = np.atleast_1d(np.asarray(seed, dtype=np.int64))
    if seed.size == 0:
        raise ValueError("seed element set must be non-empty")
    tets = seed
    for _ in range(m):
        tets = neighborhood(mesh, tets)
    return Patch(mesh, tets, seed=seed, m=m)


def vertex_patch(mesh, y):
    """Nodal patch: all tets containing vertex ``y``."""
    return Patch(mesh, mesh.tets_of_vertex(int(y)))


def extended_edge_patch(mesh, e):
    """Union of the nodal patches of both endpoints of edge ``e``."""
    y1, y2 = mesh.edges[int(e)]
    return Patch(mesh, np.concatenate([mesh.tets_of_vertex(y1), mesh.tets_of_vertex(y2)]))


# -- checks ---------------------------------------------------------------------

def check_conformity(mesh, tol=1e-12):
    """True if the mesh is a conforming tiling of its bounding region.

    Every face must be shared by at most two tets, all tets must be
    non-degenerate, boundary faces of a box mesh must lie on the box, and the
    volumes must add up to the box volume.
    """
    if np.any(mesh.volumes <= tol * mesh.h ** 3):
        return False
    counts = np.bincount(mesh.tet_faces.ravel(), minlength=mesh.n_faces)
    if counts.max() > 2 or counts.min() < 1:
        return False
    if mesh.box is not None:
        lo, hi = np.asarray(mesh.box[0]), np.asarray(mesh.box[1])
        fx = mesh.vertices[mesh.faces[mesh.face_on_boundary]]  # (nb, 3, 3)
        on_plane = (np.all(np.abs(fx - lo) < tol, axis=1) | np.all(np.abs(fx - hi) < tol, axis=1))
        if not np.all(on_plane.any(axis=1)):
            return False
        if abs(mesh.volumes.sum() - np.prod(hi - lo)) > 1e-10 * np.prod(hi - lo):
            return False
    return True


def check_orientation(mesh):
    """Stored tet-edge and tet-face signs agree with recomputation from coordinates."""
    X = mesh.tet_coords
    local_dir = X[:, LOCAL_EDGES[:, 1], :] - X[:, LOCAL_EDGES[:, 0], :]
    t = mesh.edge_tangents[mesh.tet_edges]
    esign = np.sign((local_dir * t).sum(axis=2))
    if not np.array_equal(esign, mesh.tet_edge_signs):
        return False
    if not np.all(mesh.edges[:, 0] < mesh.edges[:, 1]):
        return False
    F = mesh.faces[mesh.tet_faces]
    V = mesh.vertices
    nrm = np.cross(V[F[..., 1]] - V[F[..., 0]], V[F[..., 2]] - V[F[..., 0]])
    out = V[F].mean(axis=2) - X
    fsign = np.sign((nrm * out).sum(axis=2))
    return bool(np.array_equal(fsign, mesh.tet_face_signs))


def check_nested(hier, tol=1e-12):
    """Every fine barycenter lies in its parent coarse tet."""
    c = hier.coarse
    X = c.tet_coords[hier.parent]
    J = X[:, 1:, :] - X[:, :1, :]
    lam = np.linalg.solve(np.transpose(J, (0, 2, 1)), (hier.fine.barycenters - X[:, 0, :])[..., None])[..., 0]
    lam = np.column_stack([1 - lam.sum(axis=1), lam])
    return bool(np.all(lam > -tol))
