import numpy as np
import pytest

from harmap_dn.errors import InvalidFieldError, NoConvergenceError, RangeEscapeError
from harmap_dn.forward import (ForwardProblem, NewtonControls, dirichlet_energy, jacobian_apply,
                               jacobian_matrix, residual, solve)
from harmap_dn.geometry import MetricField, TargetMetric
from harmap_dn.grid import GridDomain, assemble_laplace_beltrami

from conftest import Q


def _data(grid, fx, fy):
    return np.array([grid.sample_boundary(fx), grid.sample_boundary(fy)])


def test_zero_data_gives_constant_map(flat_g, conformal_h, grid16):
    state, report = solve(ForwardProblem(flat_g, conformal_h, grid16, Q, 0.0))
    assert report.iterations == 0 and report.converged
    assert np.all(state.displacement == 0)
    assert np.allclose(state.values[:, 3, 5], Q)


def test_flat_energy_of_linear_map(flat_g, grid16):
    h = TargetMetric.euclidean(2)
    problem = ForwardProblem(flat_g, h, grid16, (0.0, 0.0), _data(grid16, lambda x, y: x,
                                                                  lambda x, y: 0 * x))
    state, _ = solve(problem)
    assert dirichlet_energy(state.displacement, problem, displacement=True) == pytest.approx(0.5)


def test_flat_target_decouples_into_harmonic_extensions(flat_g, grid16):
    h = TargetMetric.euclidean(2)
    fx, fy = (lambda x, y: x), (lambda x, y: y ** 2 - x ** 2)
    problem = ForwardProblem(flat_g, h, grid16, Q, _data(grid16, fx, fy))
    state, _ = solve(problem)
    op = assemble_laplace_beltrami(flat_g, grid16)
    ref = np.array([op.solve(np.zeros((17, 17)), grid16.sample_boundary(f)) for f in (fx, fy)])
    assert np.abs(state.displacement - ref).max() < 1e-12


def test_flat_target_residual_vanishes_on_harmonic_components(flat_g, grid16):
    h = TargetMetric.euclidean(2)
    problem = ForwardProblem(flat_g, h, grid16, Q, 0.0)
    u = np.array([grid16.sample(lambda x, y: x * y), grid16.sample(lambda x, y: x ** 2 - y ** 2)])
    assert np.abs(residual(u, problem, displacement=True)).max() < 1e-10


def test_jacobian_is_derivative_of_residual(flat_g, conformal_h, grid16):
    problem = ForwardProblem(flat_g, conformal_h, grid16, Q, 0.0)
    rng = np.random.default_rng(1)
    w = 0.1 * rng.normal(size=(2, 17, 17))
    d = rng.normal(size=(2, 17, 17))
    d[:, 0] = d[:, -1] = d[:, :, 0] = d[:, :, -1] = 0
    exact = jacobian_apply(w, d, problem, displacement=True)
    errs = []
    for t in (1e-3, 1e-4):
        fd = (residual(w + t * d, problem, True) - residual(w - t * d, problem, True)) / (2 * t)
        errs.append(np.abs(fd - exact).max())
    assert errs[1] < errs[0] / 50        # O(t²)
    J = jacobian_matrix(w, problem)
    assert np.allclose(J @ d[:, 1:-1, 1:-1].reshape(-1), exact[:, 1:-1, 1:-1].reshape(-1))


@pytest.mark.parametrize("family", ["conformal", "poly"])
def test_newton_converges_quadratically(flat_g, conformal_h, poly_h, grid16, family):
    h = conformal_h if family == "conformal" else poly_h
    f = 0.3 * _data(grid16, lambda x, y: np.sin(2 * x + y), lambda x, y: x * y)
    state, report = solve(ForwardProblem(flat_g, h, grid16, Q, f))
    assert report.converged and report.residual < 1e-10
    assert report.continuation_steps == 4
    assert all(c < 1e3 for c in report.quadratic_constants())
    assert np.allclose(state.trace, np.asarray(Q)[:, None] + f)


def test_small_data_uses_preconditioned_krylov(flat_g, conformal_h, grid16):
    f = 1e-3 * _data(grid16, lambda x, y: x, lambda x, y: y)
    _, report = solve(ForwardProblem(flat_g, conformal_h, grid16, Q, f))
    assert report.converged and report.linear_solver == "gmres"
    assert report.continuation_steps == 1


def test_iteration_cap_raises_with_report(flat_g, poly_h, grid16):
    f = 0.3 * _data(grid16, lambda x, y: x, lambda x, y: y)
    with pytest.raises(NoConvergenceError) as info:
        solve(ForwardProblem(flat_g, poly_h, grid16, Q, f), NewtonControls(max_iter=1))
    assert info.value.report is not None


def test_range_guard(flat_g, grid16):
    h = TargetMetric.conformal(2, "y1", domain_center=Q, domain_radius=0.5)
    ForwardProblem(flat_g, h, grid16, Q, 0.3)      # distance 0.42 < 0.9 * 0.5
    with pytest.raises(RangeEscapeError):
        ForwardProblem(flat_g, h, grid16, Q, 0.4)


def test_input_validation(flat_g, conformal_h, grid16):
    with pytest.raises(ValueError):
        ForwardProblem(flat_g, conformal_h, grid16, (0.0,), 0.0)
    with pytest.raises(ValueError):
        ForwardProblem(flat_g, conformal_h, grid16, Q, np.zeros((2, 5)))
    with pytest.raises(InvalidFieldError):
        ForwardProblem(flat_g, conformal_h, grid16, Q, np.full((2, 64), np.nan))
    problem = ForwardProblem(flat_g, conformal_h, grid16, Q, 0.0)
    with pytest.raises(InvalidFieldError):
        residual(np.zeros((2, 5, 5)), problem)
    assert not problem.boundary_data.flags.writeable


def test_anisotropic_domain_metric(conformal_h):
    grid = GridDomain(16)
    g = MetricField.from_expressions("1 + 0.3*x", "0.1*y", "1.2")
    f = 0.2 * _data(grid, lambda x, y: x - y, lambda x, y: x * y)
    state, report = solve(ForwardProblem(g, conformal_h, grid, Q, f))
    assert report.converged
    assert state.normal_derivative.shape == (2, 4, 17)
