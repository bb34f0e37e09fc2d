import numpy as np
import pytest

from curllod import _kernels as kern

import oracles

NUMBA = kern.numba is not None


def random_tets(nt, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((nt, 4, 3))
    # keep them comfortably non-degenerate
    X[:, 1:] += 2 * np.eye(3)
    return X


def signs(nt, k, seed=1):
    return np.random.default_rng(seed).choice([-1.0, 1.0], size=(nt, k))


def test_stroud_rule_degree():
    bary, w = oracles.stroud_rule(3)
    # int lambda_0^a lambda_1^b over the simplex / vol = a! b! 3! / (a + b + 3)!
    from math import factorial
    for a, b in [(5, 0), (2, 3), (1, 4), (0, 0)]:
        exact = factorial(a) * factorial(b) * 6 / factorial(a + b + 3)
        assert np.isclose(np.sum(w * bary[:, 0] ** a * bary[:, 1] ** b), exact, rtol=1e-13)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_local_matrices_match_quadrature_oracle(seed):
    X = random_tets(1, seed)
    K, M = kern.nedelec(X, np.ones((1, 6)))
    R, div = kern.raviart_thomas(X, np.ones((1, 4)))
    S = kern.p1_stiffness(X)
    Ko, Mo, Ro, So = oracles.element_matrices(X[0])
    scale = max(np.abs(Ko).max(), 1.0)
    np.testing.assert_allclose(K[0], Ko, atol=1e-12 * scale)
    np.testing.assert_allclose(M[0], Mo, atol=1e-12 * max(np.abs(Mo).max(), 1.0))
    np.testing.assert_allclose(R[0], Ro, atol=1e-12 * max(np.abs(Ro).max(), 1.0))
    np.testing.assert_allclose(S[0], So, atol=1e-12 * max(np.abs(So).max(), 1.0))


def test_edge_signs_flip_rows_and_columns():
    X = random_tets(3)
    s = signs(3, 6)
    K1, M1 = kern.nedelec(X, np.ones((3, 6)))
    K2, M2 = kern.nedelec(X, s)
    D = s[:, :, None] * s[:, None, :]
    np.testing.assert_allclose(K2, K1 * D, atol=1e-13)
    np.testing.assert_allclose(M2, M1 * D, atol=1e-13)


def test_coefficients_enter_linearly():
    X = random_tets(2)
    es = np.ones((2, 6))
    mu = np.broadcast_to(3.0 * np.eye(3), (2, 3, 3))
    kappa = np.broadcast_to((2.0 + 1.0j) * np.eye(3), (2, 3, 3))
    K, M = kern.nedelec(X, es, mu, kappa)
    K0, M0 = kern.nedelec(X, es)
    np.testing.assert_allclose(K, 3 * K0, rtol=1e-13)
    np.testing.assert_allclose(M, (2 + 1j) * M0, rtol=1e-13)


def test_de_rham_on_one_tet():
    X = random_tets(4)
    es = np.ones((4, 6))
    G = kern.gradient(X, es)  # (nt, 6, 4)
    K, M = kern.nedelec(X, es)
    np.testing.assert_allclose(np.einsum("tab,tbk->tak", K, G), 0, atol=1e-11)
    S = kern.p1_stiffness(X)
    np.testing.assert_allclose(np.einsum("tak,tab,tbl->tkl", G, M, G), S, atol=1e-12)
    np.testing.assert_allclose(S.sum(axis=2), 0, atol=1e-12)


def test_rt_divergence_scaling():
    X = random_tets(2)
    _, div = kern.raviart_thomas(X, np.ones((2, 4)))
    for t in range(2):
        for k in range(4):
            a, b, c = X[t][[v for v in range(4) if v != k]]
            area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
            assert np.isclose(div[t, k], area)


@pytest.mark.skipif(not NUMBA, reason="numba not installed")
@pytest.mark.parametrize("name", ["geometry", "nedelec", "gradient", "raviart_thomas",
                                  "mixed_nedelec_rt", "p1_stiffness"])
def test_numba_matches_numpy(name):
    nt = 7
    X = random_tets(nt, 5)
    args = {"geometry": (X,), "p1_stiffness": (X,),
            "nedelec": (X, signs(nt, 6), np.broadcast_to(np.eye(3), (nt, 3, 3)).copy(),
                        np.broadcast_to(np.eye(3), (nt, 3, 3)).copy()),
            "gradient": (X, signs(nt, 6)),
            "raviart_thomas": (X, signs(nt, 4)),
            "mixed_nedelec_rt": (X, signs(nt, 6), signs(nt, 4, 2))}[name]
    a = getattr(kern, name + "_np")(*args)
    b = getattr(kern, name + "_nb")(*args)
    for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
        np.testing.assert_allclose(x, y, rtol=1e-13, atol=1e-13)


@pytest.mark.skipif(not NUMBA, reason="numba not installed")
@pytest.mark.parametrize("name", ["transfer_p1", "transfer_nedelec", "transfer_rt"])
def test_numba_matches_numpy_transfers(hier21, name):
    f, c, par = hier21.fine, hier21.coarse, hier21.parent
    args = {"transfer_p1": (f.tet_coords, c.tet_coords[par]),
            "transfer_nedelec": (f.tet_coords, f.tet_edge_signs, c.tet_coords[par],
                                 c.tet_edge_signs[par]),
            "transfer_rt": (f.tet_coords, f.tet_face_signs, c.tet_coords[par],
                            c.tet_face_signs[par])}[name]
    args = tuple(np.ascontiguousarray(a, dtype=float) for a in args)
    np.testing.assert_allclose(getattr(kern, name + "_np")(*args),
                               getattr(kern, name + "_nb")(*args), rtol=1e-13, atol=1e-13)


def test_complex_kappa_numba_matches_numpy():
    if not NUMBA:
        pytest.skip("numba not installed")
    nt = 3
    X = random_tets(nt)
    mu = np.broadcast_to(np.eye(3), (nt, 3, 3)).copy()
    kappa = np.broadcast_to((1 + 2j) * np.eye(3), (nt, 3, 3)).copy()
    a = kern.nedelec_np(X, signs(nt, 6), mu, kappa)
    b = kern.nedelec_nb(X, signs(nt, 6), mu, kappa)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-13)
