import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lbtrace.exceptions import FrameFailure
from lbtrace.levelset import LevelSetSurface, sphere, tooth
from lbtrace.mesh import build_uniform_mesh, classify_cut_elements
from lbtrace.quadrature import (build_element_rule, build_rules, choose_frame, gauss_legendre,
                                integrate_global, write_quadrature_csv)

from sphere_oracles import star_integral, tooth_radius

FOUR_PI = 4 * np.pi


def plane(normal, offset, bbox=((0, 0, 0), (1, 1, 1))):
    n = np.asarray(normal, dtype=float)
    return LevelSetSurface(lambda x: x @ n - offset,
                           lambda x: np.broadcast_to(n, x.shape).copy(), bbox=bbox)


@pytest.fixture(scope="module")
def sphere16():
    s = sphere(bbox=((-2,) * 3, (2,) * 3))
    mesh = build_uniform_mesh(16)
    cut = classify_cut_elements(mesh, s)
    return s, mesh, cut, build_rules(mesh, cut, s, q=6)


def test_gauss_legendre_exact_for_polynomials():
    x, w = gauss_legendre(5)
    for p in range(10):
        assert w @ x ** p == pytest.approx(1 / (p + 1), rel=1e-14)


def test_flat_plane_unit_cube():
    surf = plane((0, 0, 1), 0.5)
    mesh = build_uniform_mesh(1, ((0, 0, 0), (1, 1, 1)))
    cut = classify_cut_elements(mesh, surf)
    rules = build_rules(mesh, cut, surf, q=3)
    assert rules.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert integrate_global(rules, lambda x: x[:, 0]) == pytest.approx(0.5, abs=1e-14)


def test_tilted_plane_area():
    n = np.array([1.0, 2.0, 2.0]) / 3.0
    surf = plane(n, 1.0, bbox=((-2,) * 3, (2,) * 3))
    mesh = build_uniform_mesh(3)
    rules = build_rules(mesh, classify_cut_elements(mesh, surf), surf, q=2)
    # polygon area from its projection: the cut of [-2, 2]^3, computed with the
    # x3-projection (area / n3) by a fine midpoint grid on the projected domain
    g = (np.arange(4000) + 0.5) / 4000 * 4 - 2
    X, Y = np.meshgrid(g, g, indexing="ij")
    Z = (1.0 - n[0] * X - n[1] * Y) / n[2]
    proj = np.mean((Z >= -2) & (Z <= 2)) * 16
    assert rules.weights.sum() == pytest.approx(proj / n[2], rel=1e-5)


@pytest.mark.parametrize("center, axis", [((0.05, 0.05, 0.95), 2), ((0.95, 0.05, 0.05), 0)])
def test_frame_follows_normal(unit_sphere, center, axis):
    V = np.array(center) + 0.1 * np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    V -= V.mean(axis=0) - np.array(center)
    fr = choose_frame(V, unit_sphere)
    assert abs(fr.nu[axis]) == pytest.approx(1.0)
    axes = np.stack([fr.nu, fr.nv, fr.nw])
    np.testing.assert_allclose(axes @ axes.T, np.eye(3), atol=1e-14)
    assert np.linalg.det(axes) == pytest.approx(1.0)
    # the element lies in the frame box
    loc = (V - fr.origin) @ axes.T
    assert np.all(loc >= 0) and np.all(loc <= fr.extents)


def test_flat_frame_weight_is_one():
    surf = plane((0, 0, 1), 0.3)
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    fr = choose_frame(V, surf)
    assert abs(fr.nu[2]) == 1.0
    rule = build_element_rule(V, surf, q=3)
    # exact area of the triangle cut at z = 0.3
    assert rule.area == pytest.approx(0.5 * 0.7 ** 2, rel=1e-14)


def test_frame_failure_for_enclosed_sphere():
    small = sphere(radius=0.05, center=(0.2, 0.2, 0.2))
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    with pytest.raises(FrameFailure):
        choose_frame(V, small)


def test_enclosed_sphere_by_refinement():
    small = sphere(radius=0.05, center=(0.2, 0.2, 0.2))
    V = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    rule = build_element_rule(V, small, q=16)
    assert rule.area == pytest.approx(4 * np.pi * 0.05 ** 2, rel=1e-7)


def test_sphere_area_and_second_moment(sphere16):
    s, mesh, cut, rules = sphere16
    assert rules.weights.sum() == pytest.approx(FOUR_PI, rel=1e-8)
    assert integrate_global(rules, lambda x: x[:, 0] ** 2) == pytest.approx(FOUR_PI / 3, rel=1e-8)


def test_harmonic_squared_against_spherical_oracle(sphere16):
    s, mesh, cut, rules = sphere16

    def g(x):
        return (3 * x[:, 0] ** 2 * x[:, 1] - x[:, 1] ** 3) ** 2

    ref = star_integral(lambda d: np.ones(len(d)), lambda x: x, g, 40, 80)
    assert ref == pytest.approx(32 * np.pi / 35, rel=1e-13)
    assert integrate_global(rules, g) == pytest.approx(ref, rel=1e-8)


def test_tooth_area_against_spherical_oracle(tooth_surface):
    ref = star_integral(tooth_radius, tooth_surface.gradient, lambda x: np.ones(len(x)), 300, 600)
    mesh = build_uniform_mesh(16)
    rules = build_rules(mesh, classify_cut_elements(mesh, tooth_surface), tooth_surface, q=8)
    assert rules.weights.sum() == pytest.approx(ref, rel=1e-9)
    g = lambda x: x[:, 0] ** 2 + x[:, 1] * x[:, 2]
    ref_g = star_integral(tooth_radius, tooth_surface.gradient, g, 300, 600)
    assert integrate_global(rules, g) == pytest.approx(ref_g, rel=1e-9)


def test_order_scaling():
    s = sphere(bbox=((-2,) * 3, (2,) * 3))
    mesh = build_uniform_mesh(8)
    cut = classify_cut_elements(mesh, s)
    err = np.array([abs(build_rules(mesh, cut, s, q=q).weights.sum() - FOUR_PI)
                    for q in range(2, 9)])
    # at least geometric: every extra point gains a factor 5 or more
    assert np.all(err[1:] < 0.2 * err[:-1])
    assert err[-1] < 1e-8


def test_frame_invariance(unit_sphere):
    mesh = build_uniform_mesh(32)
    cut = classify_cut_elements(mesh, unit_sphere)
    f = lambda x: np.exp(x[:, 0]) * np.cos(x[:, 1]) + x[:, 2] ** 3
    vals = [integrate_global(build_rules(mesh, cut, unit_sphere, q=6, prefer_axis=a), f)
            for a in (None, 0, 1, 2)]
    assert max(vals) - min(vals) <= 1e-9


def _check_rules(surface, mesh, rules):
    V = mesh.vertices[mesh.tets[rules.cutset.ids]][rules.element]
    J = np.swapaxes(V[:, 1:] - V[:, :1], 1, 2)
    lam = np.linalg.solve(J, (rules.points - V[:, 0])[..., None])[..., 0]
    lam = np.column_stack([1 - lam.sum(axis=1), lam])
    assert np.abs(surface(rules.points)).max() <= surface.eps_surf
    assert lam.min() >= -1e-12 and lam.max() <= 1 + 1e-12
    assert np.all(rules.weights >= 0)
    assert np.all(rules.element_areas() > 0)


@pytest.mark.parametrize("name", ["sphere", "tooth"])
@pytest.mark.parametrize("N", [4, 8])
def test_points_on_surface_and_inside(name, N):
    surf = sphere(bbox=((-2,) * 3, (2,) * 3)) if name == "sphere" else tooth()
    mesh = build_uniform_mesh(N)
    rules = build_rules(mesh, classify_cut_elements(mesh, surf), surf, q=4)
    _check_rules(surf, mesh, rules)


def test_exact_zero_samples_on_plane():
    # the plane passes through lattice samples of every element
    surf = plane((0, 0, 1), 0.25)
    mesh = build_uniform_mesh(2, ((0, 0, 0), (1, 1, 1)))
    rules = build_rules(mesh, classify_cut_elements(mesh, surf), surf, q=2)
    assert rules.weights.sum() == pytest.approx(1.0, abs=1e-14)


def test_shifted_sphere_at_origin_kink():
    s = sphere(center=(0.0, 0.0, 2.7e-61), bbox=((-2,) * 3, (2,) * 3))
    mesh = build_uniform_mesh(6)
    rules = build_rules(mesh, classify_cut_elements(mesh, s), s, q=10)
    assert rules.weights.sum() == pytest.approx(FOUR_PI, rel=1e-6)


def test_parallel_determinism(tooth_surface):
    mesh = build_uniform_mesh(8)
    cut = classify_cut_elements(mesh, tooth_surface)
    a = build_rules(mesh, cut, tooth_surface, q=4, workers=1)
    b = build_rules(mesh, cut, tooth_surface, q=4, workers=3, chunk=37)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.weights, b.weights)
    assert np.array_equal(a.element, b.element)


@settings(max_examples=25, deadline=None)
@given(c=st.tuples(*[st.floats(-0.3, 0.3)] * 3), r=st.floats(0.6, 1.4))
def test_shifted_spheres_area(c, r):
    s = sphere(radius=r, center=c, bbox=((-2,) * 3, (2,) * 3))
    mesh = build_uniform_mesh(12)
    rules = build_rules(mesh, classify_cut_elements(mesh, s), s, q=8)
    assert rules.weights.sum() == pytest.approx(4 * np.pi * r * r, rel=1e-6)
    assert np.abs(s(rules.points)).max() <= s.eps_surf


def test_quadrature_csv(tmp_path, unit_sphere):
    mesh = build_uniform_mesh(4)
    rules = build_rules(mesh, classify_cut_elements(mesh, unit_sphere), unit_sphere, q=2)
    path = tmp_path / "q.csv"
    write_quadrature_csv(rules, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "elem,x,y,z,w"
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    assert data.shape == (len(rules.weights), 5)
    assert data[:, 4].sum() == pytest.approx(rules.weights.sum(), rel=1e-14)
