"""Direct sparse solves and Lagrange-multiplier saddle-point systems.

Two direct backends are available: SuperLU (always, via scipy) and Intel
PARDISO through the optional ``pypardiso`` package, which is much faster on
the 3D saddle systems of the corrector problems. ``CURLLOD_SOLVER`` selects
``auto`` (default: PARDISO for large real systems when installed),
``superlu`` or ``pardiso``.
"""

import glob
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)

DEBUG = os.environ.get("CURLLOD_DEBUG", "0") == "1"
RESIDUAL_TOL = 1e-10
RANK_TOL = 1e-12
PARDISO_MIN_SIZE = 3000
REFINE_TOL = 1e-14
FALLBACK_TOL = 1e-12
MAX_REFINE = 5


class SingularMatrixError(np.linalg.LinAlgError):
    """Factorization broke down; ``pivot`` is the first vanishing pivot (or -1)."""

    def __init__(self, message, pivot=-1):
        super().__init__(message)
        self.pivot = pivot


class RankDeficiencyError(np.linalg.LinAlgError):
    """Constraint block is rank deficient beyond the declared gauge."""

    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = [int(r) for r in rows]


def _load_pardiso():
    if "PYPARDISO_MKL_RT" not in os.environ:
        for d in (os.path.join(sys.prefix, "lib"), "/usr/local/lib", "/usr/lib"):
            hits = sorted(glob.glob(os.path.join(d, "libmkl_rt.so*")))
            if hits:
                os.environ["PYPARDISO_MKL_RT"] = hits[0]
                break
    try:
        import pypardiso
    except (ImportError, OSError):
        return None
    return pypardiso


_PARDISO = None


def pardiso_available():
    """Whether the optional PARDISO backend can be loaded."""
    global _PARDISO
    if _PARDISO is None:
        _PARDISO = _load_pardiso() or False
    return bool(_PARDISO)


def backend_for(A):
    """Name of the backend ``factorize`` will use for ``A``."""
    choice = os.environ.get("CURLLOD_SOLVER", "auto")
    if choice not in ("auto", "superlu", "pardiso"):
        raise ValueError("CURLLOD_SOLVER must be auto, superlu or pardiso, got %r" % choice)
    if choice == "superlu":
        return "superlu"
    real = not np.iscomplexobj(A.data if sp.issparse(A) else A)
    if choice == "auto" and A.shape[0] < PARDISO_MIN_SIZE:
        return "superlu"
    if real and pardiso_available():
        return "pardiso"
    if choice == "pardiso" and real:
        raise ImportError("CURLLOD_SOLVER=pardiso but pypardiso is not usable")
    return "superlu"


def _first_zero_pivot(A):
    if A.shape[0] > 4000:
        return -1
    _, _, U = sla.lu(A.toarray() if sp.issparse(A) else np.asarray(A))
    d = np.abs(np.diag(U))
    scale = max(d.max(initial=0.0), 1.0)
    bad = np.flatnonzero(d <= 1e-13 * scale)
    return int(bad[0]) if bad.size else -1


class _Pardiso:
    """PARDISO factorization with iterative refinement and a fallback chain.

    Static pivoting (with pivot perturbation) can leave residuals far above
    roundoff on badly scaled saddle matrices. If refinement does not bring the
    residual below ``FALLBACK_TOL``, the matrix is refactorized without
    scaling/matching, and finally with SuperLU.
    """

    # 1-based iparm settings per attempt; {} keeps the MKL defaults
    ATTEMPTS = ({}, {1: 1, 2: 2, 10: 13, 11: 0, 13: 0})

    def __init__(self, A):
        self.A = sp.csr_matrix(A, dtype=np.float64)
        self.A.sort_indices()
        self.attempt = 0
        self.solver = None
        self.lu = None
        self.refinements = 0
        self.residual = 0.0
        self._factor()

    def _free(self):
        if self.solver is not None:
            self.solver.free_memory(everything=True)
            self.solver = None

    def _factor(self):
        self._free()
        if self.attempt < len(self.ATTEMPTS):
            self.solver = _PARDISO.PyPardisoSolver()
            for i, v in self.ATTEMPTS[self.attempt].items():
                self.solver.set_iparm(i, v)
            self.solver.factorize(self.A)
        else:
            self.lu = spla.splu(self.A.tocsc(), permc_spec="MMD_AT_PLUS_A")

    def _raw(self, b):
        # no closures over self: a reference cycle would delay freeing MKL memory
        if self.lu is not None:
            return self.lu.solve(b)
        return self.solver.solve(self.A, np.ascontiguousarray(b)).reshape(b.shape)

    def _refined(self, b):
        x = self._raw(b)
        nb = np.linalg.norm(b, axis=0)
        r = b - self.A @ x
        nr = np.linalg.norm(r, axis=0)
        for _ in range(MAX_REFINE):
            if np.all(nr <= REFINE_TOL * nb):
                break
            x_new = x + self._raw(r)
            r_new = b - self.A @ x_new
            nr_new = np.linalg.norm(r_new, axis=0)
            if np.sum(nr_new) >= np.sum(nr):
                break
            x, r, nr = x_new, r_new, nr_new
            self.refinements += 1
        return x, float(np.max(nr / np.where(nb > 0, nb, 1.0)))

    def __call__(self, b):
        b = np.asarray(b)
        if np.iscomplexobj(b):
            return self(b.real) + 1j * self(b.imag)
        b = np.ascontiguousarray(b, dtype=np.float64)
        x, self.residual = self._refined(b)
        while self.residual > FALLBACK_TOL and self.attempt < len(self.ATTEMPTS):
            self.attempt += 1
            log.debug("PARDISO residual %.2e on n=%d, refactorizing (attempt %d)",
                      self.residual, self.A.shape[0], self.attempt)
            self._factor()
            x, self.residual = self._refined(b)
        return x

    def __del__(self):
        try:
            self._free()
        except Exception:
            pass


def factorize(A):
    """Direct factorization of a sparse square matrix; returns a solve callable."""
    A = sp.csc_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise ValueError("matrix must be square, got %r" % (A.shape,))
    if A.shape[0] == 0:
        return lambda b: np.zeros_like(b)
    if backend_for(A) == "pardiso":
        return _Pardiso(A)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
    except RuntimeError as exc:
        piv = _first_zero_pivot(A)
        raise SingularMatrixError("singular matrix (%s), pivot %d" % (exc, piv), piv) from None
    if np.iscomplexobj(A.data):
        return lu.solve

    def real_solve(b):
        b = np.asarray(b)
        if np.iscomplexobj(b):
            return lu.solve(np.ascontiguousarray(b.real)) + 1j * lu.solve(np.ascontiguousarray(b.imag))
        return lu.solve(b)
    return real_solve


def _check_residual(A, x, b, what):
    r = np.linalg.norm(A @ x - b)
    nb = np.linalg.norm(b)
    if r > RESIDUAL_TOL * max(nb, 1e-300) and r > 1e-14:
        raise np.linalg.LinAlgError("%s: relative residual %.3e exceeds %.0e"
                                    % (what, r / max(nb, 1e-300), RESIDUAL_TOL))


def solve(A, b):
    """Solve ``A x = b`` by a direct factorization with pivoting."""
    A = sp.csc_matrix(A)
    b = np.asarray(b)
    x = factorize(A)(b.astype(np.result_type(A.dtype, b.dtype)))
    if DEBUG:
        _check_residual(A, x, b, "solve")
    return x


@dataclass
class SaddleSystem:
    """``[[A, C^H], [C, 0]] [w; lam] = [f; g]``."""

    A: object
    C: object
    f: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError("A must be square")
        if self.C.shape[1] != n:
            raise ValueError("C has %d columns, expected %d" % (self.C.shape[1], n))
        self.f = np.asarray(self.f)
        self.g = np.asarray(self.g)
        if self.f.shape[0] != n or self.g.shape[0] != self.C.shape[0]:
            raise ValueError("right-hand side dimensions do not match the blocks")


def dependent_rows(C, tol=RANK_TOL):
    """Indices of rows of ``C`` that are numerically spanned by the others.

    Pivoted Cholesky of the Gram matrix ``C C^H``; rows whose pivot falls
    below ``tol`` times the largest diagonal entry are reported.
    """
    k = C.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    G = C @ C.conj().T
    G = G.toarray() if sp.issparse(G) else np.array(G)
    G = 0.5 * (G + G.conj().T)
    scale = float(np.real(np.diag(G)).max())
    if scale <= 0:
        return np.arange(k)
    pstrf = sla.lapack.zpstrf if np.iscomplexobj(G) else sla.lapack.dpstrf
    _, piv, rank, _ = pstrf(G, tol=tol * scale, lower=1)
    return np.sort(piv[rank:] - 1).astype(np.int64)


class SaddleFactorization:
    """Factorized saddle matrix, reusable for many right-hand sides.

    Identically zero constraint rows are pruned; with ``gauge=True`` the
    lowest-indexed remaining row is dropped as well. Further linear
    dependence among the rows raises :class:`RankDeficiencyError`, unless
    ``redundant="drop"``: then the dependent rows are dropped and listed in
    ``self.redundant``. Multipliers of removed rows are reported as zero.

    Dense ``A`` and ``C`` (small local problems) use dense LU.
    """

    def __init__(self, A, C, gauge=False, redundant="error"):
        if redundant not in ("error", "drop"):
            raise ValueError("redundant must be 'error' or 'drop'")
        dense = not (sp.issparse(A) or sp.issparse(C))
        self.n = A.shape[0]
        self.k = C.shape[0]
        if dense:
            C = np.asarray(C)
            nnz_rows = np.flatnonzero(np.any(C != 0, axis=1))
        else:
            A = sp.csr_matrix(A)
            C = sp.csr_matrix(C, copy=True)
            C.eliminate_zeros()
            nnz_rows = np.flatnonzero(np.diff(C.indptr) > 0)
        self.pruned = np.setdiff1d(np.arange(self.k), nnz_rows)
        if gauge and nnz_rows.size:
            self.dropped = nnz_rows[:1]
            nnz_rows = nnz_rows[1:]
        else:
            self.dropped = np.zeros(0, dtype=np.int64)
        dep = dependent_rows(C[nnz_rows])
        self.redundant = nnz_rows[dep]
        if dep.size:
            if redundant == "error":
                raise RankDeficiencyError(
                    "constraint rows %s are linearly dependent (beyond gauge)"
                    % self.redundant.tolist(), self.redundant)
            nnz_rows = np.delete(nnz_rows, dep)
        self.rows = nnz_rows
        Ck = C[nnz_rows]
        try:
            if dense:
                K = np.block([[np.asarray(A), Ck.conj().T],
                              [Ck, np.zeros((Ck.shape[0], Ck.shape[0]), dtype=Ck.dtype)]])
                self.K = K
                self._solve = _dense_factorize(K)
            else:
                K = sp.bmat([[A, Ck.conj().T], [Ck, None]], format="csc")
                self.K = K
                self._solve = factorize(K)
        except SingularMatrixError as exc:
            raise SingularMatrixError("saddle system singular: A not elliptic on ker C (%s)"
                                      % exc, exc.pivot) from None

    def solve(self, f, g=None):
        f = np.asarray(f)
        multi = f.ndim == 2
        F = f if multi else f[:, None]
        if g is None:
            G = np.zeros((self.k, F.shape[1]), dtype=F.dtype)
        else:
            G = np.asarray(g)
            G = G if G.ndim == 2 else G[:, None]
        if self.pruned.size and np.any(G[self.pruned] != 0):
            raise RankDeficiencyError("inconsistent right-hand side on zero constraint rows",
                                      self.pruned[np.any(G[self.pruned] != 0, axis=1)])
        dtype = np.result_type(self.K.dtype, F.dtype, G.dtype)
        rhs = np.vstack([F, G[self.rows]]).astype(dtype)
        sol = self._solve(rhs)
        if DEBUG:
            _check_residual(self.K, sol, rhs, "solve_saddle")
        w = sol[:self.n]
        lam = np.zeros((self.k, F.shape[1]), dtype=dtype)
        lam[self.rows] = sol[self.n:]
        if not multi:
            return w[:, 0], lam[:, 0]
        return w, lam


def _dense_factorize(K):
    if K.shape[0] == 0:
        return lambda b: np.zeros_like(b)
    lu, piv = sla.lu_factor(K, check_finite=False)
    d = np.abs(np.diag(lu))
    bad = np.flatnonzero(d <= 1e-12 * max(d.max(), 1e-300))
    if bad.size:
        raise SingularMatrixError("singular matrix, pivot %d" % bad[0], int(bad[0]))
    return lambda b: sla.lu_solve((lu, piv), b, check_finite=False)


def solve_saddle(system, gauge=False, redundant="error"):
    """Solve a :class:`SaddleSystem`; returns ``(primal, multiplier)``."""
    fac = SaddleFactorization(system.A, system.C, gauge=gauge, redundant=redundant)
    return fac.solve(system.f, system.g)
