import itertools

import numpy as np
import pytest

from harmap_dn.errors import IncompleteTableError, MissingJetError
from harmap_dn.forward import ForwardProblem, solve
from harmap_dn.geometry import TargetMetric
from harmap_dn.grid import GridDomain, assemble_laplace_beltrami
from harmap_dn.linearize import (LinearizationTable, SlotSpec, build_table,
                                 christoffel_epsilon_derivative, first_linearization, jet_at,
                                 nth_source, second_linearization, set_partitions)

from conftest import Q, library_directions

BELL = [1, 1, 2, 5, 15, 52]


@pytest.mark.parametrize("k", range(6))
def test_set_partition_counts(k):
    parts = set_partitions(tuple(range(k)))
    assert len(parts) == BELL[k]
    for p in parts:
        assert sorted(itertools.chain.from_iterable(p)) == list(range(k))


def _spec(grid):
    return SlotSpec(library_directions(
        grid,
        (lambda x, y: x, lambda x, y: 0 * x),
        (lambda x, y: 0 * x, lambda x, y: y),
        (lambda x, y: x * y, lambda x, y: x - y),
        (lambda x, y: x ** 2 - y ** 2, lambda x, y: 1 + 0 * x),
    ), ["x,0", "0,y", "xy,x-y", "x2-y2,1"])


def test_first_linearization_is_harmonic_extension(flat_g, grid16):
    f = np.array([grid16.sample_boundary(lambda x, y: x * y)])
    v = first_linearization(f, flat_g, grid16)
    assert np.allclose(v[0], grid16.sample(lambda x, y: x * y), atol=1e-12)


def test_flat_target_higher_linearizations_vanish(flat_g, grid16):
    h = TargetMetric.euclidean(2)
    table = build_table(_spec(grid16), 3, flat_g, grid16, jet_at(h, Q, 1))
    for size in (2, 3):
        for T in table.subsets(size):
            assert np.abs(table[T]).max() <= 1e-10


def test_second_order_source_matches_closed_form(flat_g, conformal_h, grid16):
    spec = _spec(grid16)
    jet = jet_at(conformal_h, Q, 0)
    table = build_table(spec, 2, flat_g, grid16, jet)
    direct = second_linearization(table[(0,)], table[(2,)], jet[0], flat_g, grid16)
    assert np.allclose(table[(0, 2)], direct, atol=1e-14)


def test_table_is_symmetric_under_slot_permutation(flat_g, poly_h, grid16):
    spec = _spec(grid16)
    jet = jet_at(poly_h, Q, 1)
    a = build_table(spec, 3, flat_g, grid16, jet)
    perm = (2, 0, 3, 1)
    b = build_table(spec.permuted(perm), 3, flat_g, grid16, jet)
    for T in a.subsets(3):
        mapped = frozenset(perm.index(t) for t in T)
        assert np.allclose(a[T], b[mapped], atol=1e-13)


def test_multilinear_in_slot_scaling(flat_g, poly_h, grid16):
    spec = _spec(grid16)
    jet = jet_at(poly_h, Q, 1)
    a = build_table(spec, 3, flat_g, grid16, jet)
    b = build_table(spec.scaled(1, 2.5), 3, flat_g, grid16, jet)
    assert np.allclose(b[(0, 1, 2)], 2.5 * a[(0, 1, 2)], atol=1e-13)
    assert np.allclose(b[(0, 2, 3)], a[(0, 2, 3)], atol=1e-13)


def test_parallel_build_is_identical(flat_g, poly_h, grid16):
    spec = _spec(grid16)
    jet = jet_at(poly_h, Q, 2)
    a = build_table(spec, 4, flat_g, grid16, jet, jobs=1)
    b = build_table(spec, 4, flat_g, grid16, jet, jobs=3)
    for key, v in a.entries.items():
        assert np.array_equal(v, b.entries[key])


def test_epsilon_derivative_of_christoffel_single_slot(flat_g, poly_h, grid16):
    spec = _spec(grid16)
    jet = jet_at(poly_h, Q, 1)
    table = build_table(spec, 1, flat_g, grid16, jet)
    d = christoffel_epsilon_derivative((0,), table, jet, grid16)
    ref = np.einsum("ijkl,lxy->ijkxy", jet[1], table[(0,)])
    assert np.allclose(d, ref)
    assert christoffel_epsilon_derivative((), table, jet).shape == (2, 2, 2)


def test_errors(flat_g, poly_h, grid16):
    spec = _spec(grid16)
    table = LinearizationTable(4, 2)
    with pytest.raises(IncompleteTableError):
        table[(0, 1)]
    with pytest.raises(IncompleteTableError):
        nth_source((0, 1), table, jet_at(poly_h, Q, 0), flat_g, grid16)
    with pytest.raises(MissingJetError):
        build_table(spec, 4, flat_g, grid16, jet_at(poly_h, Q, 0))
    with pytest.raises(ValueError):
        build_table(SlotSpec(spec.directions[:2]), 3, flat_g, grid16, jet_at(poly_h, Q, 1))
    with pytest.raises(ValueError):
        SlotSpec([np.zeros((2, 64)), np.zeros((2, 32))])


def _nonlinear_mixed(problem, dirs, delta):
    total = 0.0
    for sig in itertools.product((-1, 1), repeat=len(dirs)):
        f = delta * sum(s * d for s, d in zip(sig, dirs))
        state, _ = solve(problem.with_boundary(f))
        total = total + np.prod(sig) * state.displacement
    return total / (2 * delta) ** len(dirs)


@pytest.mark.parametrize("order", [2, 3])
def test_pde_linearization_matches_nonlinear_differences(flat_g, conformal_h, order):
    grid = GridDomain(24)
    spec = _spec(grid)
    table = build_table(spec, order, flat_g, grid, jet_at(conformal_h, Q, order - 2))
    problem = ForwardProblem(flat_g, conformal_h, grid, Q, 0.0)
    slots = tuple(range(4 - order, 4))
    delta = 1e-2
    d1 = _nonlinear_mixed(problem, [spec.directions[s] for s in slots], delta)
    d2 = _nonlinear_mixed(problem, [spec.directions[s] for s in slots], delta / 2)
    est = (4 * d2 - d1) / 3
    ref = table[slots]
    assert np.abs(est - ref).max() / np.abs(ref).max() < 1e-4


def test_linearization_pde_residual(flat_g, poly_h, grid16):
    spec = _spec(grid16)
    jet = jet_at(poly_h, Q, 2)
    table = build_table(spec, 4, flat_g, grid16, jet)
    op = assemble_laplace_beltrami(flat_g, grid16)
    T = (0, 1, 2, 3)
    r = op.apply(table[T]) + nth_source(T, table, jet, flat_g, grid16)
    assert np.abs(r[:, 1:-1, 1:-1]).max() < 1e-9 * np.abs(op.apply(table[T])).max()
    assert np.all(table[T][:, 0] == 0)
