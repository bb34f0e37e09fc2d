import numpy as np
import pytest
import scipy.sparse as sp

from curllod import solver
from curllod.solver import (RankDeficiencyError, SaddleFactorization, SaddleSystem,
                            SingularMatrixError, solve, solve_saddle)


def test_identity_and_small_systems():
    b = np.arange(5.0)
    np.testing.assert_array_equal(solve(sp.identity(5), b), b)
    x = solve(sp.csc_matrix([[2.0, 1.0], [1.0, 3.0]]), np.array([3.0, 5.0]))
    np.testing.assert_allclose(x, [0.8, 1.4], rtol=1e-14)


def test_spd_dense_system():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((50, 50))
    A = X @ X.T + 50 * np.eye(50)
    b = rng.standard_normal(50)
    x = solve(sp.csc_matrix(A), b)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)


def test_complex_system():
    rng = np.random.default_rng(1)
    A = sp.random(80, 80, density=0.1, random_state=2) + sp.identity(80) * (4 + 1j)
    b = rng.standard_normal(80) + 1j * rng.standard_normal(80)
    x = solve(A, b)
    assert np.linalg.norm(A @ x - b) < 1e-12 * np.linalg.norm(b)


def test_singular_matrix_reports_pivot():
    A = sp.csc_matrix(np.diag([1.0, 0.0, 2.0]))
    with pytest.raises(SingularMatrixError) as exc:
        solve(A, np.ones(3))
    assert exc.value.pivot == 1


def test_saddle_example():
    sys_ = SaddleSystem(sp.identity(2, format="csr"), sp.csr_matrix([[1.0, 0.0]]),
                        np.array([1.0, 1.0]), np.array([0.0]))
    w, lam = solve_saddle(sys_)
    np.testing.assert_allclose(w, [0.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(lam, [1.0], atol=1e-15)


def test_saddle_without_constraints_is_plain_solve():
    A = sp.csc_matrix([[4.0, 1.0], [1.0, 3.0]])
    f = np.array([1.0, 2.0])
    w, lam = solve_saddle(SaddleSystem(A, sp.csr_matrix((0, 2)), f, np.zeros(0)))
    np.testing.assert_allclose(w, solve(A, f), rtol=1e-14)
    assert lam.shape == (0,)


def test_saddle_consistency_random():
    rng = np.random.default_rng(3)
    n, k = 60, 7
    X = rng.standard_normal((n, n))
    A = sp.csr_matrix(X @ X.T + n * np.eye(n))
    C = sp.csr_matrix(rng.standard_normal((k, n)))
    f, g = rng.standard_normal(n), rng.standard_normal(k)
    w, lam = solve_saddle(SaddleSystem(A, C, f, g))
    np.testing.assert_allclose(A @ w + C.T @ lam, f, atol=1e-10)
    np.testing.assert_allclose(C @ w, g, atol=1e-10)
    # dense path agrees with the sparse one
    w2, lam2 = SaddleFactorization(A.toarray(), C.toarray()).solve(f, g)
    np.testing.assert_allclose(w2, w, atol=1e-10)
    np.testing.assert_allclose(lam2, lam, atol=1e-10)


def test_rank_deficiency_names_rows():
    C = sp.csr_matrix([[1.0, 0, 0], [0, 1, 0], [1, 1, 0]])
    with pytest.raises(RankDeficiencyError) as exc:
        SaddleFactorization(sp.identity(3, format="csr"), C)
    assert len(exc.value.rows) == 1 and exc.value.rows[0] in (0, 1, 2)
    fac = SaddleFactorization(sp.identity(3, format="csr"), C, redundant="drop")
    assert fac.redundant.size == 1
    w, _ = fac.solve(np.ones(3))
    np.testing.assert_allclose(w, [0, 0, 1], atol=1e-14)


def test_gauge_and_zero_rows():
    # all-ones kernel: the pure Neumann Laplacian on a path with a mean row
    n = 6
    L = sp.diags([-np.ones(n - 1), np.r_[1, 2 * np.ones(n - 2), 1], -np.ones(n - 1)],
                 [-1, 0, 1], format="csr")
    C = sp.csr_matrix(np.vstack([np.zeros(n), np.ones(n)]))
    fac = SaddleFactorization(L, C)
    assert fac.pruned.tolist() == [0]
    f = np.arange(n) - (n - 1) / 2.0
    w, lam = fac.solve(f)
    np.testing.assert_allclose(L @ w, f, atol=1e-12)
    assert abs(w.sum()) < 1e-12 and lam[0] == 0
    with pytest.raises(RankDeficiencyError):
        fac.solve(f, np.array([1.0, 0.0]))
    gauged = SaddleFactorization(sp.identity(2, format="csr"),
                                 sp.csr_matrix([[1.0, 0], [0, 1]]), gauge=True)
    assert gauged.dropped.tolist() == [0]


def test_singular_saddle_reported():
    A = sp.csr_matrix(np.diag([1.0, 0.0, 0.0]))
    C = sp.csr_matrix([[0.0, 1.0, 0.0]])
    with pytest.raises(SingularMatrixError):
        SaddleFactorization(A, C).solve(np.ones(3))


def test_multiple_right_hand_sides():
    rng = np.random.default_rng(4)
    A = sp.csr_matrix(np.diag(rng.uniform(1, 2, 10)))
    C = sp.csr_matrix(rng.standard_normal((2, 10)))
    F = rng.standard_normal((10, 3))
    fac = SaddleFactorization(A, C)
    W, L = fac.solve(F)
    for j in range(3):
        w, lam = fac.solve(F[:, j])
        np.testing.assert_allclose(W[:, j], w, atol=1e-13)
        np.testing.assert_allclose(L[:, j], lam, atol=1e-13)


def test_backend_selection(monkeypatch):
    A = sp.identity(10, format="csc")
    monkeypatch.setenv("CURLLOD_SOLVER", "superlu")
    assert solver.backend_for(A) == "superlu"
    monkeypatch.setenv("CURLLOD_SOLVER", "auto")
    assert solver.backend_for(A) == "superlu"  # small systems stay on SuperLU
    monkeypatch.setenv("CURLLOD_SOLVER", "bogus")
    with pytest.raises(ValueError):
        solver.backend_for(A)


@pytest.mark.skipif(not solver.pardiso_available(), reason="pypardiso not installed")
def test_pardiso_matches_superlu(monkeypatch):
    rng = np.random.default_rng(5)
    n = 4000
    A = sp.random(n, n, density=5e-4, random_state=6) + sp.identity(n) * 10
    A = (A + A.T).tocsc()
    b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    monkeypatch.setenv("CURLLOD_SOLVER", "pardiso")
    assert solver.backend_for(A) == "pardiso"
    xp = solver.factorize(A)(b)
    monkeypatch.setenv("CURLLOD_SOLVER", "superlu")
    xs = solver.factorize(A)(b)
    np.testing.assert_allclose(xp, xs, atol=1e-10)


@pytest.mark.skipif(not solver.pardiso_available(), reason="pypardiso not installed")
def test_pardiso_fallback_chain(monkeypatch):
    # force every fallback: the last attempt is SuperLU and must still be accurate
    monkeypatch.setattr(solver, "FALLBACK_TOL", -1.0)
    monkeypatch.setenv("CURLLOD_SOLVER", "pardiso")
    rng = np.random.default_rng(8)
    n = 500
    A = (sp.random(n, n, density=0.01, random_state=9) + sp.identity(n) * 5).tocsc()
    b = rng.standard_normal((n, 2))
    f = solver.factorize(A)
    x = f(b)
    assert f.attempt == len(f.ATTEMPTS)
    assert np.linalg.norm(A @ x - b) <= 1e-12 * np.linalg.norm(b)
