"""Element-level kernels for the lowest-order tetrahedral elements.

Every kernel works on a batch of tetrahedra given as an ``(nt, 4, 3)`` array of
vertex coordinates and comes in two flavours: a vectorised numpy version and a
numba ``@njit`` loop version. ``CURLLOD_DISABLE_NUMBA=1`` in the environment
selects the numpy path at import time; both are always importable under their
``_np`` / ``_nb`` names so they can be compared against each other.

Local numbering: edge ``a`` joins local vertices ``LOCAL_EDGES[a]`` and face
``k`` is the one opposite local vertex ``k``. Orientation signs are supplied by
the caller (see :mod:`curllod.mesh`); the local bases carry them, so a local
basis function equals the restriction of the global one.
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("CURLLOD_DISABLE_NUMBA", "0") != "1"

LOCAL_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]], dtype=np.int64)
LOCAL_FACES = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]], dtype=np.int64)
_EI = LOCAL_EDGES[:, 0]
_EJ = LOCAL_EDGES[:, 1]

# 4-point rule, exact for polynomials of degree 2 on the reference tetrahedron
_QA = 0.5854101966249685
_QB = 0.1381966011250105
QUAD_BARY = np.array([[_QA, _QB, _QB, _QB],
                      [_QB, _QA, _QB, _QB],
                      [_QB, _QB, _QA, _QB],
                      [_QB, _QB, _QB, _QA]])
QUAD_WEIGHTS = np.full(4, 0.25)


# ----------------------------------------------------------------------------
# numpy implementations
# ----------------------------------------------------------------------------

def geometry_np(X):
    """Barycentric gradients ``(nt, 4, 3)`` and volumes ``(nt,)``."""
    X = np.asarray(X, dtype=float)
    J = X[:, 1:, :] - X[:, :1, :]
    Jinv = np.linalg.inv(J)
    g = np.empty((X.shape[0], 4, 3))
    g[:, 1:, :] = np.transpose(Jinv, (0, 2, 1))
    g[:, 0, :] = -g[:, 1:, :].sum(axis=1)
    vol = np.abs(np.linalg.det(J)) / 6.0
    return g, vol


def _lambda_mass(vol):
    L = np.full((4, 4), 1.0 / 20.0) + np.eye(4) / 20.0
    return vol[:, None, None] * L[None]


def _edge_lengths(X):
    d = X[:, _EJ, :] - X[:, _EI, :]
    return np.sqrt((d * d).sum(axis=2))


def nedelec_np(X, esign, mu, kappa):
    """Local curl-curl (weighted by ``mu``) and mass (weighted by ``kappa``).

    ``mu`` and ``kappa`` are ``(nt, 3, 3)``; entry ``[a, b]`` pairs trial ``b``
    with test ``a``.
    """
    X = np.asarray(X, dtype=float)
    g, vol = geometry_np(X)
    c = esign * _edge_lengths(X)
    curl = 2.0 * c[:, :, None] * np.cross(g[:, _EI, :], g[:, _EJ, :])
    K = vol[:, None, None] * np.einsum("tai,tij,tbj->tab", curl, mu, curl)
    L = _lambda_mass(vol)
    Gk = np.einsum("tpi,tij,tqj->tpq", g, kappa, g)
    I, J = _EI, _EJ
    M = (L[:, I[:, None], I[None, :]] * Gk[:, J[:, None], J[None, :]]
         - L[:, I[:, None], J[None, :]] * Gk[:, J[:, None], I[None, :]]
         - L[:, J[:, None], I[None, :]] * Gk[:, I[:, None], J[None, :]]
         + L[:, J[:, None], J[None, :]] * Gk[:, I[:, None], I[None, :]])
    M = M * (c[:, :, None] * c[:, None, :])
    return K, M


def gradient_np(X, esign):
    """``G[a, p]``: coefficient of ``psi_a`` in the expansion of ``grad lambda_p``."""
    X = np.asarray(X, dtype=float)
    lens = _edge_lengths(X)
    G = np.zeros((X.shape[0], 6, 4))
    rows = np.arange(6)
    G[:, rows, _EJ] = esign / lens
    G[:, rows, _EI] = -esign / lens
    return G


def raviart_thomas_np(X, fsign):
    """Local RT mass ``(nt, 4, 4)`` and cell divergence integrals ``(nt, 4)``."""
    X = np.asarray(X, dtype=float)
    g, vol = geometry_np(X)
    area = 3.0 * vol[:, None] * np.sqrt((g * g).sum(axis=2))
    d = fsign * area / (3.0 * vol[:, None])
    L = _lambda_mass(vol)
    D = X[:, :, None, :] - X[:, None, :, :]  # D[p, a] = X_p - X_a
    R = np.einsum("tpq,tpai,tqbi->tab", L, D, D)
    mass = R * (d[:, :, None] * d[:, None, :])
    div = fsign * area
    return mass, div


def mixed_nedelec_rt_np(X, esign, fsign):
    """``W[a, k] = int psi_a . phi_k`` for Nedelec ``a`` and RT ``k``."""
    X = np.asarray(X, dtype=float)
    g, vol = geometry_np(X)
    c = esign * _edge_lengths(X)
    area = 3.0 * vol[:, None] * np.sqrt((g * g).sum(axis=2))
    d = fsign * area / (3.0 * vol[:, None])
    L = _lambda_mass(vol)
    D = X[:, :, None, :] - X[:, None, :, :]
    H = np.einsum("tpi,tqki->tpqk", g, D)  # g_p . (X_q - X_k)
    W = (np.einsum("taq,taqk->tak", L[:, _EI, :], H[:, _EJ, :, :])
         - np.einsum("taq,taqk->tak", L[:, _EJ, :], H[:, _EI, :, :]))
    return W * c[:, :, None] * d[:, None, :]


def p1_stiffness_np(X):
    g, vol = geometry_np(X)
    return vol[:, None, None] * np.einsum("tpi,tqi->tpq", g, g)


def _coarse_bary(Xc, gc, pts):
    # pts (nt, npts, 3) -> barycentrics w.r.t. the coarse tets (nt, npts, 4)
    lam = np.einsum("tki,tpi->tpk", gc, pts - Xc[:, None, 0, :])
    lam[:, :, 0] += 1.0
    return lam


def transfer_p1_np(Xf, Xc):
    """``T[i, k]``: coarse hat function ``k`` evaluated at fine vertex ``i``."""
    gc, _ = geometry_np(Xc)
    return _coarse_bary(np.asarray(Xc, float), gc, np.asarray(Xf, float))


def transfer_nedelec_np(Xf, esign_f, Xc, esign_c):
    """``T[a, b]``: fine edge DOF (mean tangential trace) of coarse ``psi_b``."""
    Xf = np.asarray(Xf, float)
    Xc = np.asarray(Xc, float)
    gc, _ = geometry_np(Xc)
    cc = esign_c * _edge_lengths(Xc)
    mid = 0.5 * (Xf[:, _EI, :] + Xf[:, _EJ, :])
    tang = Xf[:, _EJ, :] - Xf[:, _EI, :]
    tang = tang * (esign_f / np.sqrt((tang * tang).sum(axis=2)))[:, :, None]
    lam = _coarse_bary(Xc, gc, mid)  # (nt, 6 fine edges, 4)
    # psi_b(x) = c_b (lam_I g_J - lam_J g_I)
    gJt = np.einsum("tbi,tai->tab", gc[:, _EJ, :], tang)
    gIt = np.einsum("tbi,tai->tab", gc[:, _EI, :], tang)
    T = lam[:, :, _EI] * gJt - lam[:, :, _EJ] * gIt
    return T * cc[:, None, :]


def transfer_rt_np(Xf, fsign_f, Xc, fsign_c):
    """``T[f, k]``: fine face DOF (mean normal flux) of coarse ``phi_k``."""
    Xf = np.asarray(Xf, float)
    Xc = np.asarray(Xc, float)
    gf, _ = geometry_np(Xf)
    gc, volc = geometry_np(Xc)
    area_c = 3.0 * volc[:, None] * np.sqrt((gc * gc).sum(axis=2))
    dc = fsign_c * area_c / (3.0 * volc[:, None])
    cent = Xf[:, LOCAL_FACES, :].mean(axis=2)  # (nt, 4, 3)
    nrm = -gf / np.sqrt((gf * gf).sum(axis=2))[:, :, None] * fsign_f[:, :, None]
    # phi_k(x) . n = d_k (x - Xc_k) . n
    diff = cent[:, :, None, :] - Xc[:, None, :, :]  # (nt, f, k, 3)
    return np.einsum("tfki,tfi->tfk", diff, nrm) * dc[:, None, :]


# ----------------------------------------------------------------------------
# numba implementations
# ----------------------------------------------------------------------------

if numba is not None:
    _njit = numba.njit(cache=True, nogil=True)
    # tuples are compile-time constants (global arrays would defeat caching)
    _TI = (0, 0, 0, 1, 1, 2)
    _TJ = (1, 2, 3, 2, 3, 3)
    _TF = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))

    @_njit
    def _geom1(X, g):
        a00 = X[1, 0] - X[0, 0]; a01 = X[1, 1] - X[0, 1]; a02 = X[1, 2] - X[0, 2]
        a10 = X[2, 0] - X[0, 0]; a11 = X[2, 1] - X[0, 1]; a12 = X[2, 2] - X[0, 2]
        a20 = X[3, 0] - X[0, 0]; a21 = X[3, 1] - X[0, 1]; a22 = X[3, 2] - X[0, 2]
        det = (a00 * (a11 * a22 - a12 * a21) - a01 * (a10 * a22 - a12 * a20)
               + a02 * (a10 * a21 - a11 * a20))
        inv = 1.0 / det
        # columns of J^{-1} where J has the edge vectors as rows
        g[1, 0] = (a11 * a22 - a12 * a21) * inv
        g[1, 1] = -(a10 * a22 - a12 * a20) * inv
        g[1, 2] = (a10 * a21 - a11 * a20) * inv
        g[2, 0] = -(a01 * a22 - a02 * a21) * inv
        g[2, 1] = (a00 * a22 - a02 * a20) * inv
        g[2, 2] = -(a00 * a21 - a01 * a20) * inv
        g[3, 0] = (a01 * a12 - a02 * a11) * inv
        g[3, 1] = -(a00 * a12 - a02 * a10) * inv
        g[3, 2] = (a00 * a11 - a01 * a10) * inv
        for i in range(3):
            g[0, i] = -(g[1, i] + g[2, i] + g[3, i])
        return abs(det) / 6.0

    @_njit
    def geometry_nb(X):
        nt = X.shape[0]
        g = np.empty((nt, 4, 3))
        vol = np.empty(nt)
        for t in range(nt):
            vol[t] = _geom1(X[t], g[t])
        return g, vol

    @_njit
    def _lens1(X, out):
        for a in range(6):
            i = _TI[a]
            j = _TJ[a]
            s = 0.0
            for k in range(3):
                d = X[j, k] - X[i, k]
                s += d * d
            out[a] = np.sqrt(s)

    @_njit
    def nedelec_nb(X, esign, mu, kappa):
        nt = X.shape[0]
        K = np.zeros((nt, 6, 6))
        M = np.zeros((nt, 6, 6), dtype=kappa.dtype)
        g = np.empty((4, 3))
        lens = np.empty(6)
        c = np.empty(6)
        curl = np.empty((6, 3))
        Gk = np.zeros((4, 4), dtype=kappa.dtype)
        L = np.empty((4, 4))
        for t in range(nt):
            vol = _geom1(X[t], g)
            _lens1(X[t], lens)
            for a in range(6):
                c[a] = esign[t, a] * lens[a]
                i = _TI[a]
                j = _TJ[a]
                curl[a, 0] = 2.0 * c[a] * (g[i, 1] * g[j, 2] - g[i, 2] * g[j, 1])
                curl[a, 1] = 2.0 * c[a] * (g[i, 2] * g[j, 0] - g[i, 0] * g[j, 2])
                curl[a, 2] = 2.0 * c[a] * (g[i, 0] * g[j, 1] - g[i, 1] * g[j, 0])
            for p in range(4):
                for q in range(4):
                    L[p, q] = vol * (2.0 if p == q else 1.0) / 20.0
                    sk = 0.0 * Gk[0, 0]
                    for u in range(3):
                        for v in range(3):
                            sk += g[p, u] * kappa[t, u, v] * g[q, v]
                    Gk[p, q] = sk
            for a in range(6):
                for b in range(6):
                    s = 0.0
                    for u in range(3):
                        for v in range(3):
                            s += curl[a, u] * mu[t, u, v] * curl[b, v]
                    K[t, a, b] = vol * s
                    i = _TI[a]; j = _TJ[a]; k = _TI[b]; l = _TJ[b]
                    M[t, a, b] = c[a] * c[b] * (L[i, k] * Gk[j, l] - L[i, l] * Gk[j, k]
                                                - L[j, k] * Gk[i, l] + L[j, l] * Gk[i, k])
        return K, M

    @_njit
    def gradient_nb(X, esign):
        nt = X.shape[0]
        G = np.zeros((nt, 6, 4))
        lens = np.empty(6)
        for t in range(nt):
            _lens1(X[t], lens)
            for a in range(6):
                G[t, a, _TJ[a]] = esign[t, a] / lens[a]
                G[t, a, _TI[a]] = -esign[t, a] / lens[a]
        return G

    @_njit
    def _rt_scale1(g, vol, fsign_t, d):
        for k in range(4):
            gn = np.sqrt(g[k, 0] ** 2 + g[k, 1] ** 2 + g[k, 2] ** 2)
            d[k] = fsign_t[k] * gn  # = sign * area / (3 vol)

    @_njit
    def raviart_thomas_nb(X, fsign):
        nt = X.shape[0]
        mass = np.zeros((nt, 4, 4))
        div = np.zeros((nt, 4))
        g = np.empty((4, 3))
        d = np.empty(4)
        for t in range(nt):
            vol = _geom1(X[t], g)
            _rt_scale1(g, vol, fsign[t], d)
            for k in range(4):
                div[t, k] = d[k] * 3.0 * vol
            for a in range(4):
                for b in range(4):
                    s = 0.0
                    for p in range(4):
                        for q in range(4):
                            w = vol * (2.0 if p == q else 1.0) / 20.0
                            dot = 0.0
                            for u in range(3):
                                dot += (X[t, p, u] - X[t, a, u]) * (X[t, q, u] - X[t, b, u])
                            s += w * dot
                    mass[t, a, b] = d[a] * d[b] * s
        return mass, div

    @_njit
    def mixed_nedelec_rt_nb(X, esign, fsign):
        nt = X.shape[0]
        W = np.zeros((nt, 6, 4))
        g = np.empty((4, 3))
        d = np.empty(4)
        lens = np.empty(6)
        for t in range(nt):
            vol = _geom1(X[t], g)
            _rt_scale1(g, vol, fsign[t], d)
            _lens1(X[t], lens)
            for a in range(6):
                i = _TI[a]
                j = _TJ[a]
                ca = esign[t, a] * lens[a]
                for k in range(4):
                    s = 0.0
                    for q in range(4):
                        dj = 0.0
                        di = 0.0
                        for u in range(3):
                            diff = X[t, q, u] - X[t, k, u]
                            dj += g[j, u] * diff
                            di += g[i, u] * diff
                        wi = vol * (2.0 if i == q else 1.0) / 20.0
                        wj = vol * (2.0 if j == q else 1.0) / 20.0
                        s += wi * dj - wj * di
                    W[t, a, k] = ca * d[k] * s
        return W

    @_njit
    def p1_stiffness_nb(X):
        nt = X.shape[0]
        A = np.zeros((nt, 4, 4))
        g = np.empty((4, 3))
        for t in range(nt):
            vol = _geom1(X[t], g)
            for p in range(4):
                for q in range(4):
                    A[t, p, q] = vol * (g[p, 0] * g[q, 0] + g[p, 1] * g[q, 1] + g[p, 2] * g[q, 2])
        return A

    @_njit
    def _bary1(Xc, gc, x, lam):
        for k in range(4):
            s = 1.0 if k == 0 else 0.0
            for u in range(3):
                s += gc[k, u] * (x[u] - Xc[0, u])
            lam[k] = s

    @_njit
    def transfer_p1_nb(Xf, Xc):
        nt = Xf.shape[0]
        T = np.zeros((nt, 4, 4))
        gc = np.empty((4, 3))
        lam = np.empty(4)
        for t in range(nt):
            _geom1(Xc[t], gc)
            for i in range(4):
                _bary1(Xc[t], gc, Xf[t, i], lam)
                for k in range(4):
                    T[t, i, k] = lam[k]
        return T

    @_njit
    def transfer_nedelec_nb(Xf, esign_f, Xc, esign_c):
        nt = Xf.shape[0]
        T = np.zeros((nt, 6, 6))
        gc = np.empty((4, 3))
        lens_c = np.empty(6)
        lam = np.empty(4)
        mid = np.empty(3)
        tang = np.empty(3)
        for t in range(nt):
            _geom1(Xc[t], gc)
            _lens1(Xc[t], lens_c)
            for a in range(6):
                i = _TI[a]
                j = _TJ[a]
                nrm = 0.0
                for u in range(3):
                    mid[u] = 0.5 * (Xf[t, i, u] + Xf[t, j, u])
                    tang[u] = Xf[t, j, u] - Xf[t, i, u]
                    nrm += tang[u] * tang[u]
                nrm = esign_f[t, a] / np.sqrt(nrm)
                for u in range(3):
                    tang[u] *= nrm
                _bary1(Xc[t], gc, mid, lam)
                for b in range(6):
                    k = _TI[b]
                    l = _TJ[b]
                    s = 0.0
                    for u in range(3):
                        s += (lam[k] * gc[l, u] - lam[l] * gc[k, u]) * tang[u]
                    T[t, a, b] = esign_c[t, b] * lens_c[b] * s
        return T

    @_njit
    def transfer_rt_nb(Xf, fsign_f, Xc, fsign_c):
        nt = Xf.shape[0]
        T = np.zeros((nt, 4, 4))
        gf = np.empty((4, 3))
        gc = np.empty((4, 3))
        dc = np.empty(4)
        cent = np.empty(3)
        nrm = np.empty(3)
        for t in range(nt):
            _geom1(Xf[t], gf)
            volc = _geom1(Xc[t], gc)
            _rt_scale1(gc, volc, fsign_c[t], dc)
            for f in range(4):
                gn = np.sqrt(gf[f, 0] ** 2 + gf[f, 1] ** 2 + gf[f, 2] ** 2)
                for u in range(3):
                    nrm[u] = -gf[f, u] / gn * fsign_f[t, f]
                    cent[u] = (Xf[t, _TF[f][0], u] + Xf[t, _TF[f][1], u]
                               + Xf[t, _TF[f][2], u]) / 3.0
                for k in range(4):
                    s = 0.0
                    for u in range(3):
                        s += (cent[u] - Xc[t, k, u]) * nrm[u]
                    T[t, f, k] = dc[k] * s
        return T


# ----------------------------------------------------------------------------
# dispatch
# ----------------------------------------------------------------------------

def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def _prep(X, *signs):
    out = [np.ascontiguousarray(X, dtype=np.float64)]
    out += [np.ascontiguousarray(s, dtype=np.float64) for s in signs]
    return out


def geometry(X):
    return _pick("geometry")(*_prep(X))


def nedelec(X, esign, mu=None, kappa=None):
    X, esign = _prep(X, esign)
    nt = X.shape[0]
    if mu is None:
        mu = np.broadcast_to(np.eye(3), (nt, 3, 3))
    if kappa is None:
        kappa = np.broadcast_to(np.eye(3), (nt, 3, 3))
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    kdtype = np.complex128 if np.iscomplexobj(kappa) else np.float64
    kappa = np.ascontiguousarray(kappa, dtype=kdtype)
    return _pick("nedelec")(X, esign, mu, kappa)


def gradient(X, esign):
    return _pick("gradient")(*_prep(X, esign))


def raviart_thomas(X, fsign):
    return _pick("raviart_thomas")(*_prep(X, fsign))


def mixed_nedelec_rt(X, esign, fsign):
    return _pick("mixed_nedelec_rt")(*_prep(X, esign, fsign))


def p1_stiffness(X):
    return _pick("p1_stiffness")(*_prep(X))


def transfer_p1(Xf, Xc):
    Xf, Xc = _prep(Xf, Xc)
    return _pick("transfer_p1")(Xf, Xc)


def transfer_nedelec(Xf, esign_f, Xc, esign_c):
    Xf, esign_f, Xc, esign_c = _prep(Xf, esign_f, Xc, esign_c)
    return _pick("transfer_nedelec")(Xf, esign_f, Xc, esign_c)


def transfer_rt(Xf, fsign_f, Xc, fsign_c):
    Xf, fsign_f, Xc, fsign_c = _prep(Xf, fsign_f, Xc, fsign_c)
    return _pick("transfer_rt")(Xf, fsign_f, Xc, fsign_c)
