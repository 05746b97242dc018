import numpy as np
import pytest
import scipy.linalg as sla

from obstacle_fem.assembly import (
    ProblemData,
    assemble_mixed,
    assemble_stabilized,
    condensed_bubble_alpha,
    consistency_residual,
    default_alpha,
    inverse_constant,
    laplacian_gram,
)
from obstacle_fem.benchmark import problem_data
from obstacle_fem.fespace import MULTIPLIER_SPACE, SpaceSpec, displacement_space
from obstacle_fem.mesh import Mesh, generate_disk_mesh

P1, P2 = displacement_space(1), displacement_space(2)
P1B, P2B = displacement_space(1, True), displacement_space(2, True)


def reference_triangle():
    # all vertices free so the full local matrices survive elimination
    return Mesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [False] * 3, 2.0)


def test_p1_reference_stiffness():
    s = assemble_mixed(reference_triangle(), P1)
    np.testing.assert_allclose(s.A.toarray(), 0.5 * np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]), atol=1e-15)


def test_p0_p1_coupling_row(coarse_mesh):
    m = Mesh([[0, 0], [2, 0], [0.5, 1.5]], [[0, 1, 2]], [False] * 3, 2.0)
    s = assemble_mixed(m, P1)
    np.testing.assert_allclose(s.B.toarray(), [[m.areas[0] / 3] * 3], rtol=1e-14)


def test_bubble_coupling_entry():
    m = reference_triangle()
    s = assemble_mixed(m, P1B)
    assert s.B.toarray()[0, 3] == pytest.approx(9 / 20 * 0.5, rel=1e-14)


@pytest.mark.parametrize("V", [P1, P2, P1B, P2B])
def test_symmetric_and_positive(V, tiny_mesh):
    s = assemble_mixed(tiny_mesh, V)
    A = s.A.toarray()
    np.testing.assert_allclose(A, A.T, atol=1e-14)
    sla.cholesky(A)  # raises if not positive definite


@pytest.mark.parametrize("V", [P1, P1B])
def test_b_nonnegative(V, coarse_mesh):
    assert np.all(assemble_mixed(coarse_mesh, V).B.data >= 0)


def test_k1_stabilized_matches_mixed(coarse_mesh):
    d = problem_data(1, 0.01)
    m = assemble_mixed(coarse_mesh, P1, data=d)
    s = assemble_stabilized(coarse_mesh, P1, data=d)
    assert (m.A != s.A).nnz == 0
    assert (m.B != s.B).nnz == 0
    np.testing.assert_array_equal(m.f, s.f)


def test_c_diagonal_and_g_alpha(coarse_mesh):
    alpha = 0.05
    d = ProblemData(load=-1.0, obstacle=0.0, alpha=alpha, degree=2)
    s = assemble_stabilized(coarse_mesh, P2, data=d)
    h2A = coarse_mesh.diameters**2 * coarse_mesh.areas
    C = s.C.toarray()
    np.testing.assert_allclose(np.diag(C), alpha * h2A, rtol=1e-13)
    assert np.count_nonzero(C - np.diag(np.diag(C))) == 0
    np.testing.assert_allclose(s.g, alpha * h2A, rtol=1e-13)


def test_stabilized_against_direct_formula(tiny_mesh):
    """A_a, B_a, f_a rebuilt from independently assembled pieces."""
    alpha = 0.02
    d = ProblemData(load=lambda x, y: 1 + x * y, obstacle=lambda x, y: x - y, alpha=alpha, degree=2)
    s = assemble_stabilized(tiny_mesh, P2, data=d)
    m = assemble_mixed(tiny_mesh, P2, data=d)
    L = laplacian_gram(tiny_mesh, P2)
    np.testing.assert_allclose(s.A.toarray(), m.A.toarray() - alpha * L.toarray(), atol=1e-13)
    # P2 Laplacians are elementwise constants: B_a = B + a h^2 |K| lap(phi)
    np.testing.assert_allclose((s.B - m.B).toarray().sum(), alpha * np.sum(laplacian_row_sums(tiny_mesh)), atol=1e-12)


def laplacian_row_sums(mesh):
    from obstacle_fem.assembly import ElementTables
    from obstacle_fem.fespace import build_dofmap

    tab = ElementTables(mesh, "P2", 4)
    dm = build_dofmap(mesh, P2)
    free = ~dm.constrained[dm.cell_dofs]
    lap = tab.laps[:, :, 0]
    return (mesh.diameters**2 * mesh.areas)[:, None] * lap * free


def test_determinism(coarse_mesh):
    d = problem_data(2)
    a = assemble_stabilized(coarse_mesh, P2, data=d)
    b = assemble_stabilized(coarse_mesh, P2, data=d)
    for x, y in ((a.A, b.A), (a.B, b.B)):
        assert np.array_equal(x.data, y.data) and np.array_equal(x.indices, y.indices)
    assert np.array_equal(a.f, b.f) and np.array_equal(a.g, b.g)


def test_threaded_assembly_identical(coarse_mesh, monkeypatch):
    import obstacle_fem.assembly as asm

    d = problem_data(2)
    ref = assemble_stabilized(coarse_mesh, P2, data=d)
    monkeypatch.setenv("OBSTACLE_FEM_THREADS", "4")
    orig = asm._chunked
    monkeypatch.setattr(asm, "_chunked", lambda fn, nt, chunk=8192: orig(fn, nt, 17))
    thr = assemble_stabilized(coarse_mesh, P2, data=d)
    assert np.array_equal(ref.A.data, thr.A.data)
    assert np.array_equal(ref.f, thr.f)


def test_quadrature_audit(coarse_mesh):
    d = ProblemData(load=lambda x, y: x**2 - y, obstacle=lambda x, y: x * y, alpha=0.01, degree=2)
    a4 = assemble_stabilized(coarse_mesh, P2B, data=d, order=4)
    a6 = assemble_stabilized(coarse_mesh, P2B, data=d, order=6)
    assert abs(a4.A - a6.A).max() <= 1e-12
    assert abs(a4.B - a6.B).max() <= 1e-12


def test_condensed_alpha_reference_value():
    # (int b)^2 / (|grad b|^2 h^2 |K|) = 0.225^2 / (8.1 * 2 * 0.5)
    np.testing.assert_allclose(condensed_bubble_alpha(reference_triangle()), [0.00625], rtol=1e-13)


def test_inverse_constant_positive_definiteness(tiny_mesh):
    c = inverse_constant(tiny_mesh, P2)
    assert 0 < c < 1
    for frac, pd in ((0.9, True), (1.2, False)):
        s = assemble_stabilized(tiny_mesh, P2, data=ProblemData(alpha=frac * c, degree=2))
        ev = np.linalg.eigvalsh(s.A.toarray())
        assert (ev.min() > 0) == pd


def test_inverse_constant_infinite_for_p1(tiny_mesh):
    assert inverse_constant(tiny_mesh, P1) == float("inf")


def test_default_alpha():
    assert default_alpha(1) == 0.01 and default_alpha(2) == 0.1


def test_rejects_nonpositive_alpha(tiny_mesh):
    with pytest.raises(ValueError):
        assemble_stabilized(tiny_mesh, P1, data=ProblemData(alpha=0.0))
    with pytest.raises(ValueError):
        ProblemData(alpha=-1.0)


def test_alpha_length_checked(tiny_mesh):
    with pytest.raises(ValueError):
        assemble_stabilized(tiny_mesh, P1, data=ProblemData(alpha=np.ones(3)))


def test_consistency_exact_pair(coarse_mesh):
    # u = (x^2 + y^2)/4 has lap u = 1, so lam = -lap u - f = 0 with f = -1
    d = ProblemData(load=-1.0, alpha=0.1, degree=2)
    assert consistency_residual(coarse_mesh, P2, d, 1.0, 0.0) <= 1e-10


def in_triangle(corners):
    def field(x, y):
        p = np.stack([x, y], axis=-1)
        a, b, c = corners
        T = np.column_stack([b - a, c - a])
        l = np.linalg.solve(T, (p - a).reshape(-1, 2).T).T.reshape(p.shape)
        inside = (l[..., 0] >= -1e-12) & (l[..., 1] >= -1e-12) & (l.sum(axis=-1) <= 1 + 1e-12)
        return inside.astype(float)

    return field


def test_consistency_perturbed_element(coarse_mesh):
    # with P1 test functions only the multiplier direction sees the change
    d = ProblemData(load=-1.0, alpha=0.1, degree=1)
    K = 7
    lam = in_triangle(coarse_mesh.vertices[coarse_mesh.triangles[K]])
    r = consistency_residual(coarse_mesh, P1, d, 1.0, lam, order=6)
    expected = 0.1 * coarse_mesh.diameters[K] ** 2 * coarse_mesh.areas[K]
    assert r == pytest.approx(expected, rel=1e-12)


def test_consistency_zero():
    m = generate_disk_mesh(2.0, 1.0)
    assert consistency_residual(m, P2, ProblemData(load=0.0, alpha=0.1, degree=2), 0.0, 0.0) == 0.0


def test_mixed_rejects_non_p0_multiplier(tiny_mesh):
    with pytest.raises(ValueError):
        assemble_mixed(tiny_mesh, P1, SpaceSpec("P1", dirichlet=False))
