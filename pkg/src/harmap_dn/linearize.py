"""Multi-linearizations of the harmonic-map system around a constant map.

Slots are labelled ``0 .. count-1``. For a set ``T`` of slots, ``v_T`` is the
mixed derivative ``∂_{ε_T} u`` at ``ε = 0`` for boundary data
``q + Σ_j ε_j f_j``. Singletons are harmonic extensions of ``f_j``; larger
sets solve ``Δ_g v_T = -source_T`` with zero boundary values.
"""

from __future__ import annotations

import functools
import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sympy.utilities.iterables import multiset_partitions

from .errors import IncompleteTableError, MissingJetError
from .geometry import MetricField
from .grid import GridDomain, assemble_laplace_beltrami, check_finite, discretize, gradient

MAX_ORDER = 4


@functools.lru_cache(maxsize=None)
def set_partitions(labels: tuple) -> tuple:
    """All set partitions of ``labels`` as tuples of sorted tuples."""
    if not labels:
        return ((),)
    return tuple(tuple(tuple(b) for b in p) for p in multiset_partitions(list(labels)))


def _key(T: Iterable[int]) -> frozenset:
    return frozenset(int(t) for t in T)


@dataclass
class SlotSpec:
    """Boundary directions ``f_j``, one per ε-slot, each of shape ``(n, 4 n_cells)``."""

    directions: list
    names: list | None = None

    def __post_init__(self):
        self.directions = [check_finite(np.asarray(f, dtype=float), f"direction {j}")
                           for j, f in enumerate(self.directions)]
        shapes = {f.shape for f in self.directions}
        if len(shapes) > 1:
            raise ValueError(f"slot directions have mismatched shapes {sorted(shapes)}")
        if self.names is None:
            self.names = [f"f{j}" for j in range(len(self.directions))]
        if len(self.names) != len(self.directions):
            raise ValueError("one name per direction required")

    @property
    def count(self) -> int:
        return len(self.directions)

    def permuted(self, order: Sequence[int]) -> "SlotSpec":
        return SlotSpec([self.directions[k] for k in order], [self.names[k] for k in order])

    def scaled(self, slot: int, factor: float) -> "SlotSpec":
        dirs = list(self.directions)
        dirs[slot] = factor * dirs[slot]
        return SlotSpec(dirs, list(self.names))


@dataclass
class LinearizationTable:
    """``v_T`` for every nonempty slot set ``T`` with ``|T| <= max_order``."""

    count: int
    max_order: int
    entries: dict = field(default_factory=dict)
    _grads: dict = field(default_factory=dict, repr=False)

    def __getitem__(self, T) -> np.ndarray:
        key = _key(T)
        if key not in self.entries:
            raise IncompleteTableError(f"v_T missing for T = {sorted(key)}")
        return self.entries[key]

    def __contains__(self, T) -> bool:
        return _key(T) in self.entries

    def __setitem__(self, T, value):
        key = _key(T)
        self.entries[key] = value
        self._grads.pop(key, None)

    def gradient(self, T, grid: GridDomain) -> np.ndarray:
        key = _key(T)
        if key not in self._grads:
            self._grads[key] = gradient(self[key], grid)
        return self._grads[key]

    def subsets(self, size: int):
        return [frozenset(c) for c in itertools.combinations(range(self.count), size)]


def first_linearization(f_j: np.ndarray, g: MetricField, grid: GridDomain) -> np.ndarray:
    """Componentwise ``Δ_g`` -harmonic extension of the boundary values ``f_j``."""
    f_j = check_finite(np.asarray(f_j, dtype=float), "direction")
    op = assemble_laplace_beltrami(g, grid)
    N = grid.n_nodes
    return op.solve(np.zeros(f_j.shape[:-1] + (N, N)), f_j)


def _pair_source(ginv, gamma_field, grad_a, grad_b):
    """``g^{αβ} Γ^i_{jk} ∂_α a^j ∂_β b^k``; ``gamma_field`` is ``(n,n,n)`` or ``(n,n,n,N,N)``."""
    if gamma_field.ndim == 3:
        return np.einsum("abxy,ijk,ajxy,bkxy->ixy", ginv, gamma_field, grad_a, grad_b)
    return np.einsum("abxy,ijkxy,ajxy,bkxy->ixy", ginv, gamma_field, grad_a, grad_b)


def second_linearization(v_mu, v_nu, gamma_q, g: MetricField, grid: GridDomain) -> np.ndarray:
    """Solve ``Δ_g v + g^{αβ} Γ(q) (∂_α v_μ ∂_β v_ν + ∂_α v_ν ∂_β v_μ) = 0``, ``v|∂ = 0``."""
    ginv = discretize(g, grid).ginv
    gm, gn = gradient(v_mu, grid), gradient(v_nu, grid)
    gamma_q = np.asarray(gamma_q, dtype=float)
    source = _pair_source(ginv, gamma_q, gm, gn) + _pair_source(ginv, gamma_q, gn, gm)
    return assemble_laplace_beltrami(g, grid).solve(-source)


def christoffel_epsilon_derivative(S, table: LinearizationTable, jet: Sequence[np.ndarray],
                                   grid: GridDomain | None = None) -> np.ndarray:
    """``∂_{ε_S} [Γ(u_ε)]`` at ``ε = 0`` as a field over the grid.

    Sums ``∂^m Γ(q)`` contracted with ``v_{B_1}, ..., v_{B_m}`` over all set
    partitions ``{B_1..B_m}`` of ``S``. ``jet`` is ``[Γ(q), ∂Γ(q), ...]``
    with derivative indices trailing. For empty ``S`` returns ``Γ(q)``
    broadcast over the grid when ``grid`` is given, else the bare tensor.
    """
    labels = tuple(sorted(_key(S)))
    if not labels:
        g0 = np.asarray(jet[0], dtype=float)
        if grid is None:
            return g0
        return np.broadcast_to(g0[..., None, None], g0.shape + (grid.n_nodes,) * 2).copy()
    if len(jet) <= len(labels):
        raise MissingJetError(
            f"Christoffel jet of order {len(labels)} required, have order {len(jet) - 1}")
    total = None
    for partition in set_partitions(labels):
        arr = np.asarray(jet[len(partition)], dtype=float)
        first = True
        for block in partition:
            v = table[block]
            if first:
                arr = np.einsum("ijkl...,lxy->ijk...xy", arr, v)
                first = False
            else:
                arr = np.einsum("ijkl...xy,lxy->ijk...xy", arr, v)
        total = arr if total is None else total + arr
    return total


def nth_source(T, table: LinearizationTable, jet: Sequence[np.ndarray], g: MetricField,
               grid: GridDomain) -> np.ndarray:
    """Source of the ``|T|``-th linearization for slot set ``T``.

    ``g^{αβ} Σ_{S ⊂ T, |S| <= |T|-2} ∂_S Γ Σ_U ∂_α v_U ∂_β v_{T∖S∖U}`` where
    ``U`` ranges over nonempty proper subsets of ``T∖S``. ``v_T`` then solves
    ``Δ_g v_T = -source``.
    """
    T = tuple(sorted(_key(T)))
    N = len(T)
    if N < 2:
        raise ValueError("sources are defined for |T| >= 2")
    for size in range(1, N):
        for sub in itertools.combinations(T, size):
            if sub not in table:
                raise IncompleteTableError(f"v_T missing for T = {list(sub)}")
    ginv = discretize(g, grid).ginv
    out = np.zeros((len(jet[0]), grid.n_nodes, grid.n_nodes))
    for s_size in range(0, N - 1):
        for S in itertools.combinations(T, s_size):
            rest = tuple(t for t in T if t not in S)
            gamma_s = christoffel_epsilon_derivative(S, table, jet, grid)
            for u_size in range(1, len(rest)):
                for U in itertools.combinations(rest, u_size):
                    Uc = tuple(t for t in rest if t not in U)
                    out += _pair_source(ginv, gamma_s, table.gradient(U, grid),
                                        table.gradient(Uc, grid))
    return out


def build_table(spec: SlotSpec, order: int, g: MetricField, grid: GridDomain,
                jet: Sequence[np.ndarray], jobs: int = 1) -> LinearizationTable:
    """Solve the linearization hierarchy up to ``order`` for all slot subsets.

    Subsets of equal size are independent given smaller ones and may be
    solved on ``jobs`` worker threads; results do not depend on scheduling.
    """
    if order > spec.count:
        raise ValueError(f"order {order} exceeds the number of slots {spec.count}")
    if order > MAX_ORDER:
        raise ValueError(f"orders above {MAX_ORDER} are not supported")
    if order >= 2 and len(jet) < order - 1:
        raise MissingJetError(f"Christoffel jet of order {order - 2} required")
    table = LinearizationTable(spec.count, order)
    op = assemble_laplace_beltrami(g, grid)
    singles = op.solve(np.zeros((spec.count,) + spec.directions[0].shape[:-1]
                                + (grid.n_nodes,) * 2), np.stack(spec.directions))
    for j in range(spec.count):
        table[(j,)] = singles[j]

    def solve_one(T):
        return op.solve(-nth_source(T, table, jet, g, grid))

    for size in range(2, order + 1):
        subsets = table.subsets(size)
        for T in subsets:          # warm gradient cache before threading
            for t in range(1, size):
                for U in itertools.combinations(sorted(T), t):
                    table.gradient(U, grid)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(solve_one, subsets))
        else:
            results = [solve_one(T) for T in subsets]
        for T, v in zip(subsets, results):
            table[T] = v
    return table


def jet_at(problem_h, q, order: int) -> list:
    """``[Γ(q), ..., ∂^order Γ(q)]`` from a target metric, or ``[Γ(q)]`` for order < 0."""
    return problem_h.christoffel_jet(np.asarray(q, dtype=float), max(order, 0))
