import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lbtrace.exceptions import OutsideElement, UnsupportedDegree
from lbtrace.fespace import (barycentric, build_space, eval_basis, evaluate_at_rules,
                             interpolate, shape_gradients, shape_values, barycentric_gradients,
                             tangential_gradient)
from lbtrace.levelset import sphere
from lbtrace.mesh import CutElementSet, TET_EDGES, build_uniform_mesh, classify_cut_elements
from lbtrace.quadrature import build_rules

bary = arrays(np.float64, 4, elements=st.floats(0.0, 1.0)).filter(lambda l: l.sum() > 1e-3).map(
    lambda l: l / l.sum())


def single_tet_space(k):
    mesh = build_uniform_mesh(1, ((0, 0, 0), (1, 1, 1)))
    cs = CutElementSet(np.array([2]), np.zeros((1, 4), dtype=np.int8), np.array([-1], np.int8))
    return build_space(mesh, cs, k)


@pytest.mark.parametrize("k, M", [(1, 4), (2, 10)])
def test_single_tet_dofs(k, M):
    assert single_tet_space(k).M == M


def test_unsupported_degree():
    with pytest.raises(UnsupportedDegree):
        single_tet_space(3)
    with pytest.raises(UnsupportedDegree):
        single_tet_space(0)


@pytest.fixture(scope="module")
def sphere_spaces():
    s = sphere(bbox=((-2,) * 3, (2,) * 3))
    mesh = build_uniform_mesh(8)
    cut = classify_cut_elements(mesh, s)
    rules = build_rules(mesh, cut, s, q=4)
    return s, mesh, rules, {k: build_space(mesh, rules.cutset, k) for k in (1, 2)}


def test_shared_dofs_and_lexicographic_order(sphere_spaces):
    s, mesh, rules, spaces = sphere_spaces
    for k, V in spaces.items():
        assert V.element_dofs.max() == V.M - 1
        assert len(np.unique(V.element_dofs)) == V.M
        # lexicographic order of node positions
        keys = V.dof_coords
        order = np.lexsort(keys.T[::-1])
        np.testing.assert_array_equal(order, np.arange(V.M))
        # local node positions agree with the global coordinates
        X = V.element_vertices()
        if k == 2:
            X = np.concatenate([X, 0.5 * (X[:, TET_EDGES[:, 0]] + X[:, TET_EDGES[:, 1]])], axis=1)
        np.testing.assert_allclose(V.dof_coords[V.element_dofs], X, atol=1e-14)
    # P1 dofs are exactly the distinct vertices of the cut elements
    assert spaces[1].M == len(np.unique(mesh.tets[rules.cutset.ids]))


def test_sphere_dof_counts():
    """Measured counts of the cut-element spaces on [-2, 2]^3."""
    s = sphere(bbox=((-2,) * 3, (2,) * 3))
    out = {}
    for N in (16, 32):
        mesh = build_uniform_mesh(N)
        cut = classify_cut_elements(mesh, s)
        out[N] = build_space(mesh, cut, 2).M
    assert out[16] == 2604
    assert out[32] == 10956


def test_vertex_and_midpoint_values():
    for k in (1, 2):
        V = single_tet_space(k)
        X = V.element_vertices(0)
        nodes = list(X)
        if k == 2:
            nodes += [0.5 * (X[a] + X[b]) for a, b in TET_EDGES]
        for i, x in enumerate(nodes):
            ev = eval_basis(V, 0, x)
            np.testing.assert_allclose(ev.values, np.eye(len(nodes))[i], atol=1e-14)


def test_gradients_match_differences(rng):
    V = single_tet_space(2)
    X = V.element_vertices(0)
    for _ in range(10):
        lam = rng.dirichlet(np.ones(4))
        x = lam @ X
        ev = eval_basis(V, 0, x)
        h = 1e-6
        fd = np.empty_like(ev.gradients)
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            fd[:, d] = (shape_values(barycentric(X, x + e), 2) -
                        shape_values(barycentric(X, x - e), 2)) / (2 * h)
        np.testing.assert_allclose(ev.gradients, fd, atol=1e-6)


def test_outside_element():
    V = single_tet_space(1)
    with pytest.raises(OutsideElement):
        eval_basis(V, 0, np.array([5.0, 5.0, 5.0]))
    X = V.element_vertices(0)
    eval_basis(V, 0, X[0] - 1e-12 * (X.mean(axis=0) - X[0]))


@settings(max_examples=100, deadline=None)
@given(lam=bary, k=st.sampled_from([1, 2]))
def test_partition_of_unity(lam, k):
    V = single_tet_space(k)
    X = V.element_vertices(0)
    ev = eval_basis(V, 0, lam @ X)
    assert abs(ev.values.sum() - 1) < 1e-13
    assert np.abs(ev.gradients.sum(axis=0)).max() < 1e-12


def test_partition_of_unity_at_surface_points(sphere_spaces):
    s, mesh, rules, spaces = sphere_spaces
    for V in spaces.values():
        phi, grad, _ = evaluate_at_rules(V, rules)
        assert np.abs(phi.sum(axis=1) - 1).max() < 1e-13
        assert np.abs(grad.sum(axis=1)).max() < 1e-12


@settings(max_examples=30, deadline=None)
@given(c=arrays(np.float64, 10, elements=st.floats(-3, 3)), lam=bary)
def test_quadratic_interpolation_exact(c, lam):
    V = single_tet_space(2)

    def p(x):
        x0, x1, x2 = x[..., 0], x[..., 1], x[..., 2]
        return (c[0] + c[1] * x0 + c[2] * x1 + c[3] * x2 + c[4] * x0 * x0 + c[5] * x1 * x1
                + c[6] * x2 * x2 + c[7] * x0 * x1 + c[8] * x0 * x2 + c[9] * x1 * x2)

    u = interpolate(V, p)
    x = lam @ V.element_vertices(0)
    ev = eval_basis(V, 0, x)
    assert abs(ev.values @ u[ev.dofs] - p(x)) <= 1e-12 * (1 + np.abs(c).sum())


def test_linear_interpolation_exact(sphere_spaces, rng):
    s, mesh, rules, spaces = sphere_spaces
    a = rng.standard_normal(4)
    p = lambda x: a[0] + x @ a[1:]
    for V in spaces.values():
        u = interpolate(V, p)
        phi, grad, el = evaluate_at_rules(V, rules)
        vals = np.einsum("pa,pa->p", phi, u[V.element_dofs[el]])
        np.testing.assert_allclose(vals, p(rules.points), atol=1e-12)
        g = np.einsum("pad,pa->pd", grad, u[V.element_dofs[el]])
        np.testing.assert_allclose(g, np.broadcast_to(a[1:], g.shape), atol=1e-11)


def _element_at(V, x):
    X = V.element_vertices()
    lam = barycentric(X, np.broadcast_to(x, (len(X), 3)))
    return int(np.argmax(lam.min(axis=1)))


def test_tangential_gradient_examples():
    s = sphere(bbox=((-2,) * 3, (2,) * 3))
    pole = np.array([0.0, 0.0, 1.0])
    for N in (8, 16):
        mesh = build_uniform_mesh(N)
        cut = classify_cut_elements(mesh, s)
        V1, V2 = build_space(mesh, cut, 1), build_space(mesh, cut, 2)
        e1, e2 = _element_at(V1, pole), _element_at(V2, pole)
        assert np.allclose(tangential_gradient(V1, s, e1, pole, np.ones(V1.M)), 0, atol=1e-14)
        g3 = tangential_gradient(V1, s, e1, pole, interpolate(V1, lambda x: x[..., 2]))
        # x3 is linear, so the interpolant is exact and its gradient is normal
        assert np.linalg.norm(g3) <= 1e-12 + mesh.h
        g1 = tangential_gradient(V2, s, e2, pole, interpolate(V2, lambda x: x[..., 0]))
        np.testing.assert_allclose(g1, [1, 0, 0], atol=1e-12 + mesh.h ** 2)


def test_barycentric_gradients_consistent(rng):
    X = rng.standard_normal((4, 3))
    G = barycentric_gradients(X)
    # d lambda_i / dx applied to vertex differences gives Kronecker deltas
    np.testing.assert_allclose((X - X[0]) @ G.T, np.eye(4) - np.eye(4)[0], atol=1e-10)
    lam = rng.dirichlet(np.ones(4))
    np.testing.assert_allclose(shape_gradients(lam, G, 1), G)
