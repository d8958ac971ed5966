import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from viscoshape.fem import (Deformation, DomainError, MaskError, ScalarField, ShapeMask,
                            VectorField2, all_quadrature_points, compose, element_gradient,
                            element_gradients, eval_field, gaussian_smooth, make_mesh,
                            mask_to_image, nodal_interpolant, prolongate, pullback_eval,
                            quadrature_points, rasterize_mask)

unit = st.floats(0.0, 1.0)
points = st.tuples(unit, unit).map(np.array)


@pytest.mark.parametrize("level,nodes,tris", [(1, 9, 8), (6, 65 ** 2, 8192), (8, 257 ** 2, 2 * 4 ** 8)])
def test_mesh_counts(level, nodes, tris):
    m = make_mesh(level)
    assert m.num_nodes == nodes
    assert m.num_tris == tris
    assert m.h == 2.0 ** -level


@pytest.mark.parametrize("level", [0, 13, 2.5])
def test_mesh_level_out_of_range(level):
    with pytest.raises(DomainError):
        make_mesh(level)


def test_triangles_positively_oriented():
    m = make_mesh(4)
    p = m.coords[m.tris]
    e1, e2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    assert np.all(det > 0)
    assert np.allclose(det / 2, m.area)


@given(points, st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
def test_affine_reproduction(x, a, b, c):
    m = make_mesh(4)
    f = ScalarField(m, nodal_interpolant(m, lambda X, Y: a * X + b * Y + c))
    assert f.eval(x) == pytest.approx(a * x[0] + b * x[1] + c, abs=1e-12)


def test_eval_vertex_and_edge_midpoint(rng):
    m = make_mesh(3)
    vals = rng.standard_normal(m.num_nodes)
    f = ScalarField(m, vals)
    for node in (0, 10, 40, m.num_nodes - 1):
        assert f.eval(m.coords[node]) == pytest.approx(vals[node], abs=1e-14)
    for t in (0, 17, 100):
        i, j = m.tris[t][:2]
        mid = 0.5 * (m.coords[i] + m.coords[j])
        assert f.eval(mid) == pytest.approx(0.5 * (vals[i] + vals[j]), abs=1e-13)


def test_eval_outside_domain_raises():
    m = make_mesh(2)
    with pytest.raises(DomainError):
        eval_field(m, np.zeros(m.num_nodes), np.array([1.1, 0.5]))


def test_element_gradient_identity_and_linear():
    m = make_mesh(3)
    ident = Deformation.identity(m)
    A = np.array([[1.2, 0.3], [-0.4, 0.9]])
    lin = VectorField2(m, m.coords @ A.T)
    for t in range(0, m.num_tris, 7):
        assert np.allclose(element_gradient(ident, t), np.eye(2), atol=1e-14)
        assert np.allclose(element_gradient(lin, t), A, atol=1e-12)


def test_element_gradient_matches_finite_differences(rng):
    m = make_mesh(3)
    vals = m.coords.copy()
    vals[30] += rng.standard_normal(2) * 0.05
    f = VectorField2(m, vals)
    eps = 1e-6
    for t in np.nonzero(np.any(m.tris == 30, axis=1))[0]:
        c = m.coords[m.tris[t]].mean(axis=0)
        fd = np.column_stack([(f.eval(c + eps * e) - f.eval(c - eps * e)) / (2 * eps) for e in np.eye(2)])
        assert np.allclose(element_gradient(f, t), fd, atol=1e-8)


def test_quadrature_rule():
    m = make_mesh(2)
    qp = quadrature_points(m, 5)
    assert len(qp) == 7
    assert sum(w for _, w in qp) == pytest.approx(m.area, rel=1e-14)
    verts = m.coords[m.tris[5]]
    pts = np.array([x for x, _ in qp])
    for v in verts:
        assert np.any(np.all(np.isclose(pts, v), axis=1))


def test_quadrature_exact_for_cubics():
    # reference triangle (0,0), (1,0), (0,1): int x^a y^b = a! b! / (a + b + 2)!
    m = make_mesh(1)
    t = 1  # vertices (0,0), (1/2,1/2), (0,1/2) scaled: use the generic formula via affine map
    verts = m.coords[m.tris[t]]
    qp = quadrature_points(m, t)
    B = np.column_stack([verts[1] - verts[0], verts[2] - verts[0]])
    detB = abs(np.linalg.det(B))
    for a in range(4):
        for b in range(4 - a):
            # integrate the monomial in reference coordinates pulled back through the affine map
            approx = sum(w * np.prod(np.linalg.solve(B, x - verts[0]) ** [a, b]) for x, w in qp)
            exact = detB * math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            assert approx == pytest.approx(exact, rel=1e-12, abs=1e-15)


def test_quadrature_of_elementwise_constant():
    m = make_mesh(3)
    _, w = all_quadrature_points(m)
    c = np.arange(m.num_tris, dtype=float)
    assert np.sum(c[:, None] * w[None, :]) == pytest.approx(c.sum() * m.area, rel=1e-13)


def test_pullback_examples():
    m = make_mesh(3)
    g = ScalarField(m, m.coords[:, 0].copy())
    ident = Deformation.identity(m)
    x = np.array([[0.3, 0.7], [0.55, 0.1]])
    assert np.allclose(pullback_eval(g, ident, x), g.eval(x))
    push = Deformation.from_positions(m, m.coords + [0.7, 0.0])
    assert pullback_eval(g, push, np.array([0.5, 0.5])) == pytest.approx(1.0)
    shift = Deformation.from_positions(m, m.coords + [0.25, 0.0])
    assert np.allclose(pullback_eval(g, shift, x), x[:, 0] + 0.25)


@given(st.tuples(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5)))
def test_pullback_never_reads_outside(shift):
    m = make_mesh(2)
    g = ScalarField(m, np.ones(m.num_nodes))
    phi = Deformation.from_positions(m, 1.5 * m.coords + np.array(shift))
    assert np.allclose(pullback_eval(g, phi, m.coords), 1.0)


def test_compose_translations():
    m = make_mesh(3)
    a = m.coords + [0.1, 0.0]
    b = m.coords + [0.0, -0.05]
    assert np.allclose(compose(m, a, b), m.coords + [0.1, -0.05], atol=1e-13)


def test_gaussian_constant_and_mass(rng):
    m = make_mesh(5)
    one = ShapeMask(m, np.ones(m.num_nodes))
    assert np.allclose(gaussian_smooth(one, 3 * m.h).values, 1.0, atol=1e-14)
    vals = (rng.uniform(size=m.num_nodes) > 0.7).astype(float)
    sm = gaussian_smooth(ShapeMask(m, vals), 2 * m.h)
    assert sm.values.sum() == pytest.approx(vals.sum(), rel=1e-10)
    assert sm.values.min() >= 0 and sm.values.max() <= 1


def test_gaussian_small_width_is_identity():
    m = make_mesh(4)
    vals = (m.coords[:, 0] > 0.4).astype(float)
    assert np.allclose(gaussian_smooth(ShapeMask(m, vals), 1e-3 * m.h).values, vals)
    with pytest.raises(ValueError):
        gaussian_smooth(ShapeMask(m, vals), 0.0)


def test_gaussian_half_plane_erf_profile():
    m = make_mesh(6)
    vals = (m.coords[:, 0] >= 0.5).astype(float)
    sigma = 4 * m.h
    sm = gaussian_smooth(ShapeMask(m, vals), sigma)
    interface = 0.5 - m.h / 2
    assert sm.eval(np.array([interface, 0.5])) == pytest.approx(0.5, abs=1e-2)
    d = m.coords[:, 0] - interface
    ref = 0.5 * (1 + np.array([math.erf(t / (sigma * math.sqrt(2))) for t in d]))
    assert np.abs(sm.values - ref).max() <= 1e-2


def test_prolongate_commutes_with_eval(rng):
    m = make_mesh(3)
    f = ScalarField(m, rng.standard_normal(m.num_nodes))
    fine = prolongate(f)
    x = rng.uniform(size=(100, 2))
    assert np.allclose(f.eval(x), fine.eval(x), atol=1e-12)
    ident = prolongate(Deformation.identity(m))
    assert np.allclose(ident.values, 0.0)
    mask = prolongate(ShapeMask(m, (rng.uniform(size=m.num_nodes) > 0.5).astype(float)))
    assert mask.values.min() >= 0 and mask.values.max() <= 1


def test_shape_mask_range():
    m = make_mesh(2)
    with pytest.raises(MaskError):
        ShapeMask(m, np.full(m.num_nodes, 1.5))


def test_rasterize_examples():
    white = np.full((17, 17), 255, dtype=np.uint8)
    assert np.all(rasterize_mask(white).values == 1.0)
    jj, ii = np.mgrid[0:17, 0:17]
    checker = (((ii + jj) % 2) * 255).astype(np.uint8)
    mk = rasterize_mask(checker)
    assert np.array_equal(mk.values, ((ii + jj) % 2).ravel().astype(float))
    assert np.array_equal(mask_to_image(mk), checker)
    with pytest.raises(MaskError):
        rasterize_mask(np.zeros((17, 17), dtype=np.uint8))
    # other sizes are resampled to the requested level
    big = np.zeros((100, 100), dtype=np.uint8)
    big[20:80, 30:70] = 255
    m = rasterize_mask(big, level=4)
    assert m.mesh.level == 4 and 0 < m.area() < 1
