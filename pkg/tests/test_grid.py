import numpy as np
import pytest

from harmap_dn.errors import InvalidFieldError, SingularMetricError
from harmap_dn.geometry import ConformalTestCase, MetricField
from harmap_dn.grid import (GridDomain, assemble_laplace_beltrami, boundary_geometry,
                            check_finite, integrate_boundary, integrate_volume, lumped_nodal,
                            nodal_weights, normal_derivative, normal_derivative_edges)


def test_boundary_bookkeeping():
    grid = GridDomain(8)
    assert grid.n_boundary == 32
    x, y = grid.boundary_coords()
    on_edge = (x == 0) | (x == 1) | (y == 0) | (y == 1)
    assert np.all(on_edge)
    assert len(set(zip(x, y))) == 32
    values = grid.sample_boundary(lambda x, y: x + 10 * y)
    full = grid.extend(values, interior=-1.0)
    assert np.allclose(grid.trace(full), values)
    assert np.all(full[1:-1, 1:-1] == -1.0)
    edges = grid.boundary_to_edges(values)
    assert edges.shape == (4, 9)
    assert np.allclose(edges[1], 1 + 10 * grid.coords)


def test_grid_rejects_tiny():
    with pytest.raises(ValueError):
        GridDomain(1)


def test_check_finite():
    with pytest.raises(InvalidFieldError):
        check_finite(np.array([1.0, np.nan]))


@pytest.mark.parametrize("func, lap", [
    (lambda x, y: x ** 2 - y ** 2, lambda x, y: 0 * x),
    (lambda x, y: x * y, lambda x, y: 0 * x),
    (lambda x, y: x ** 3, lambda x, y: 6 * x),
    (lambda x, y: x ** 2 + 3 * y ** 2, lambda x, y: 8 + 0 * x),
])
def test_flat_laplacian_exact_on_low_degree(func, lap):
    grid = GridDomain(10)
    op = assemble_laplace_beltrami(MetricField.euclidean(), grid)
    out = op.apply(grid.sample(func))
    assert np.allclose(out[1:-1, 1:-1], grid.sample(lap)[1:-1, 1:-1], atol=1e-9)
    assert np.all(out[0] == 0) and np.all(out[:, -1] == 0)


def test_constant_metric_annihilates_affine():
    grid = GridDomain(12)
    g = MetricField.constant(2.0, 0.3, 1.5)
    op = assemble_laplace_beltrami(g, grid)
    out = op.apply(grid.sample(lambda x, y: 1 + 2 * x - 3 * y))
    assert np.abs(out).max() < 1e-10


def test_dirichlet_solve_reproduces_harmonic_cubic():
    grid = GridDomain(16)
    op = assemble_laplace_beltrami(MetricField.euclidean(), grid)
    exact = grid.sample(lambda x, y: x ** 3 - 3 * x * y ** 2)
    v = op.solve(np.zeros_like(exact), grid.trace(exact))
    assert np.abs(v - exact).max() < 1e-12


def test_variable_metric_manufactured_second_order():
    # u = sin(x) e^y with a non-constant metric; source from the exact operator
    g = MetricField.from_expressions("1 + 0.5*x*y", "0.2*x", "1 + y^2")

    def exact_lap(X, Y):
        import sympy as sp
        x, y = sp.symbols("x y")
        G = sp.Matrix([[1 + sp.Rational(1, 2) * x * y, sp.Rational(1, 5) * x],
                       [sp.Rational(1, 5) * x, 1 + y ** 2]])
        u = sp.sin(x) * sp.exp(y)
        sq = sp.sqrt(G.det())
        Gi = G.inv()
        grad = [sp.diff(u, x), sp.diff(u, y)]
        flux = [sq * (Gi[a, 0] * grad[0] + Gi[a, 1] * grad[1]) for a in range(2)]
        lap = (sp.diff(flux[0], x) + sp.diff(flux[1], y)) / sq
        return sp.lambdify((x, y), lap, "numpy")(X, Y)

    errors = []
    for n in (16, 32):
        grid = GridDomain(n)
        op = assemble_laplace_beltrami(g, grid)
        exact = grid.sample(lambda x, y: np.sin(x) * np.exp(y))
        v = op.solve(exact_lap(*grid.mesh), grid.trace(exact))
        errors.append(np.abs(v - exact).max())
    assert np.log2(errors[0] / errors[1]) > 1.8


def test_krylov_path_matches_direct():
    grid = GridDomain(12)
    g = MetricField.from_expressions("1 + x", "0", "1 + y")
    direct = assemble_laplace_beltrami(g, grid, "direct")
    krylov = assemble_laplace_beltrami(g, grid, "krylov")
    src = grid.sample(lambda x, y: np.cos(3 * x) * y)
    assert np.allclose(direct.solve(src, 0.5), krylov.solve(src, 0.5), atol=1e-9)


def test_normal_derivative_flat():
    grid = GridDomain(8)
    g = MetricField.euclidean()
    u = grid.sample(lambda x, y: x ** 2 - y ** 2)
    nd = normal_derivative_edges(u, g, grid)
    assert np.allclose(nd[1], 2.0)                 # right edge, ∂_x at x = 1
    assert np.allclose(nd[0], 0.0)                 # left edge, -∂_x at x = 0
    assert np.allclose(nd[3], -2.0)                # top edge, ∂_y at y = 1
    assert normal_derivative(u, g, grid).shape == (grid.n_boundary,)


def test_normal_derivative_cubic_exact_with_third_order_stencil():
    grid = GridDomain(8)
    u = grid.sample(lambda x, y: x ** 3 + y ** 3)
    nd = normal_derivative_edges(u, MetricField.euclidean(), grid, order=3)
    assert np.allclose(nd[1], 3.0) and np.allclose(nd[3], 3.0)


def test_conformal_factor_one_on_boundary_keeps_normal_derivative():
    grid = GridDomain(10)
    u = grid.sample(lambda x, y: np.sin(x + 2 * y))
    flat = normal_derivative_edges(u, MetricField.euclidean(), grid)
    bubble = normal_derivative_edges(u, ConformalTestCase.bubble().metric(), grid)
    assert np.allclose(flat, bubble, atol=1e-14)


def test_anisotropic_conormal_is_unit():
    grid = GridDomain(6)
    g = MetricField.constant(2.0, 0.5, 1.0)
    geo = boundary_geometry(g, grid)
    gm = g.evaluate(0.0, 0.0)
    for e in range(4):
        c = geo.conormal[:, e, 0]
        assert c @ gm @ c == pytest.approx(1.0)


def test_quadrature():
    grid = GridDomain(8)
    g = MetricField.euclidean()
    assert integrate_volume(np.ones((9, 9)), g, grid) == pytest.approx(1.0)
    assert integrate_volume(grid.sample(lambda x, y: x * y), g, grid) == pytest.approx(0.25)
    x_edges = grid.boundary_to_edges(grid.sample_boundary(lambda x, y: x))
    assert integrate_boundary(x_edges, g, grid) == pytest.approx(2.0)
    g2 = MetricField.constant(4.0, 0.0, 1.0)
    ones = np.ones((4, 9))
    assert integrate_boundary(ones, g2, grid) == pytest.approx(2 * 2.0 + 2 * 1.0)


def test_lumped_nodal_preserves_pairings():
    grid = GridDomain(6)
    geo = boundary_geometry(MetricField.euclidean(), grid)
    rng = np.random.default_rng(0)
    edges = rng.normal(size=(4, 7))
    nodal = lumped_nodal(edges, geo)
    phi = rng.normal(size=grid.n_boundary)
    lhs = integrate_boundary(grid.boundary_to_edges(phi) * edges, geo, grid)
    assert np.sum(phi * nodal * nodal_weights(geo)) == pytest.approx(lhs)


def test_singular_domain_metric():
    with pytest.raises(SingularMetricError):
        boundary_geometry(MetricField.constant(1.0, 1.0, 1.0), GridDomain(4))
