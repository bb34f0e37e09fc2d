import numpy as np
import pytest

from curllod import fem, lod
from curllod.analysis import AffineField, norm_hcurl
from curllod.mesh import build_box_mesh, patch

from conftest import checkerboard, hierarchy, projection

LOAD = AffineField((1.0, -0.5, 0.25), ((0, 1, 0), (0, 0, 1), (1, 0, 0)))


@pytest.fixture(scope="module")
def setup21():
    hier = hierarchy(2, 1)
    coeff = checkerboard(hier, seed=0)
    proj = projection(2, 1)
    return hier, coeff, proj, lod.CorrectorProblem(hier, coeff, proj)


@pytest.fixture(scope="module")
def basis1(setup21):
    return setup21[3].corrector_basis(1, keep_elements=True)


def test_default_m_and_saturation():
    assert [lod.default_m(H) for H in (0.5, 0.25, 0.125, 1.0)] == [2, 3, 4, 1]
    assert lod.saturation_order(build_box_mesh(1)) == 1
    m = lod.saturation_order(build_box_mesh(2))
    c = build_box_mesh(2)
    assert all(len(patch(c, T, m)) == c.n_tets for T in range(c.n_tets))
    assert any(len(patch(c, T, m - 1)) < c.n_tets for T in range(c.n_tets))


def test_element_correctors_kernel_and_support(setup21, basis1):
    hier, _, proj, prob = setup21
    assert basis1.elements
    c = hier.coarse
    P = proj.P
    for T, (edofs, free, W, pat) in basis1.elements.items():
        assert np.abs(P[:, free] @ W).max() <= 1e-8
        assert set(pat.tets.tolist()) == set(patch(c, T, 1).tets.tolist())
        for e in edofs:
            v = basis1.element_vector(T, e, proj.fine_dofs.n_dofs)
            outside = np.setdiff1d(np.arange(v.size), prob.free_dofs(pat))
            assert not np.any(v[outside])


def test_element_corrector_single_solve(setup21, basis1):
    hier, _, proj, prob = setup21
    T = 5
    edofs = basis1.elements[T][0]
    E = int(proj.coarse_dofs.entities[edofs[0]])
    v = prob.element_corrector(T, E, 1)
    np.testing.assert_allclose(v, basis1.element_vector(T, edofs[0], v.size), atol=1e-12)
    bnd = int(np.flatnonzero(hier.coarse.edge_on_boundary[hier.coarse.tet_edges[T]])[0])
    with pytest.raises(ValueError):
        prob.element_corrector(T, int(hier.coarse.tet_edges[T][bnd]), 1)


def test_saturated_correctors_match_ideal(setup21):
    hier, coeff, proj, prob = setup21
    m = lod.saturation_order(hier.coarse)
    K_m = prob.corrector_basis(m).K
    K_id = prob.ideal_corrector().K
    D = (K_m - K_id).toarray()
    dofs = proj.fine_dofs
    for j in range(D.shape[1]):
        assert norm_hcurl(hier.fine, dofs, D[:, j]) <= 1e-8


def test_galerkin_orthogonality(setup21, basis1):
    hier, coeff, proj, prob = setup21
    u_h = lod.solve_reference(hier, coeff, LOAD, dofs=proj.fine_dofs, B=prob.B)
    sol = lod.solve_multiscale(hier, coeff, LOAD, 1, proj=proj, problem=prob, basis=basis1)
    Phi = proj.prolongation + basis1.K
    rng = np.random.default_rng(0)
    e = u_h - sol.u_ms
    for _ in range(20):
        v = Phi @ rng.standard_normal(Phi.shape[1])
        assert abs(v @ (prob.B @ e)) <= 1e-8 * np.linalg.norm(u_h) * np.linalg.norm(v)


def test_reference_residual(setup21):
    hier, coeff, proj, prob = setup21
    u_h = lod.solve_reference(hier, coeff, LOAD, dofs=proj.fine_dofs)
    b = fem.assemble_rhs(hier.fine, proj.fine_dofs, LOAD)
    assert np.linalg.norm(prob.B @ u_h - b) <= 1e-10 * np.linalg.norm(b)


def test_zero_load_and_linearity(setup21, basis1):
    hier, coeff, proj, prob = setup21
    zero = lod.solve_multiscale(hier, coeff, AffineField((0, 0, 0)), 1, proj, prob, basis1)
    assert not np.any(zero.u_ms)
    assert not np.any(lod.solve_reference(hier, coeff, AffineField((0, 0, 0)), proj.fine_dofs))
    a = lod.solve_multiscale(hier, coeff, LOAD, 1, proj, prob, basis1).u_ms
    scaled = AffineField(tuple(-3 * x for x in LOAD.a), tuple(tuple(-3 * x for x in r) for r in LOAD.B))
    b = lod.solve_multiscale(hier, coeff, scaled, 1, proj, prob, basis1).u_ms
    np.testing.assert_allclose(b, -3 * a, atol=1e-12 * np.abs(a).max())


def test_saturated_solution_matches_ideal(setup21):
    # the spaces for different m are not nested, so only the saturated limit is asserted
    hier, coeff, proj, prob = setup21
    dofs = proj.fine_dofs
    ideal = lod.solve_multiscale(hier, coeff, LOAD, None, proj, prob)
    m = lod.saturation_order(hier.coarse)
    u_m = lod.solve_multiscale(hier, coeff, LOAD, m, proj, prob).u_ms
    assert norm_hcurl(hier.fine, dofs, u_m - ideal.u_ms) <= 1e-8 * norm_hcurl(hier.fine, dofs, ideal.u_ms)


def test_identity_hierarchy_reproduces_reference():
    hier = hierarchy(2, 0)
    coeff = fem.Coefficient.random_checkerboard(hier.fine, 0.5, 1, 10, seed=1)
    proj = projection(2, 0)
    sol = lod.solve_multiscale(hier, coeff, LOAD, 1, proj=proj)
    assert abs(sol.basis.K).max() <= 1e-12
    u_h = lod.solve_reference(hier, coeff, LOAD, proj.fine_dofs)
    np.testing.assert_allclose(sol.u_ms, u_h, atol=1e-12 * np.abs(u_h).max())


def test_complex_kappa():
    hier = hierarchy(2, 1)
    c = checkerboard(hier, seed=2)
    coeff = fem.Coefficient.from_values(hier.fine, c.mu, 1.0 + 0.5j)
    proj = projection(2, 1)
    prob = lod.CorrectorProblem(hier, coeff, proj)
    sol = lod.solve_multiscale(hier, coeff, LOAD, 1, proj, prob)
    assert np.iscomplexobj(sol.u_ms)
    u_h = lod.solve_reference(hier, coeff, LOAD, proj.fine_dofs, prob.B)
    Phi = proj.prolongation + sol.basis.K
    r = Phi.conj().T @ (prob.B @ (u_h - sol.u_ms))
    assert np.abs(r).max() <= 1e-8 * np.abs(u_h).max()


def test_threads_give_identical_basis(setup21, basis1):
    K2 = setup21[3].corrector_basis(1, threads=2).K
    assert abs(K2 - basis1.K).max() == 0
