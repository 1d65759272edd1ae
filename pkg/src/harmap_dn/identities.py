"""Numerical checks of the boundary–volume integral identities.

Each identity is evaluated twice through disjoint paths: the left side from
DN-oracle ε-differences and boundary quadrature, the right side from
linearized PDE solves and volume quadrature.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dnmap import DNOracle, dn_mixed_derivative
from .errors import JetMismatchError
from .forward import ForwardProblem, NewtonControls
from .grid import GridDomain, discretize, integrate_boundary, integrate_volume
from .linearize import SlotSpec, build_table, nth_source

REL_FLOOR = 1e-14
DEFAULT_DELTAS = {1: 1e-3, 2: 1e-3, 3: 1e-3, 4: 1e-2}


@dataclass
class IdentityReport:
    identity: str
    lhs: float
    rhs: float
    abs_residual: float
    rel_residual: float
    n_cells: int
    delta: float
    lhs_error: float = float("nan")
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_sides(cls, identity, lhs, rhs, n_cells, delta, lhs_error=float("nan"), **metadata):
        lhs, rhs = float(lhs), float(rhs)
        ab = abs(lhs - rhs)
        rel = ab / max(abs(lhs), abs(rhs), REL_FLOOR)
        return cls(identity, lhs, rhs, ab, rel, n_cells, delta, float(lhs_error), metadata)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


CSV_FIELDS = ["identity", "n_cells", "delta", "lhs", "rhs", "abs_residual", "rel_residual",
              "lhs_error", "metadata"]


def reports_to_csv(reports: Sequence[IdentityReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        row = {k: getattr(r, k) for k in CSV_FIELDS if k != "metadata"}
        row["metadata"] = json.dumps(r.metadata, sort_keys=True)
        writer.writerow(row)
    return buf.getvalue()


def observed_order(coarse: float, fine: float, ratio: float = 2.0) -> float:
    """``log(coarse / fine) / log(ratio)``; ``inf`` when the fine value is zero."""
    if fine == 0.0:
        return float("inf")
    if coarse <= 0.0:
        return float("nan")
    return float(np.log(coarse / fine) / np.log(ratio))


# ---------------------------------------------------------------------------
# shared pieces


def _boundary_pairing(f_pair, h_q, dn_edges, problem: ForwardProblem) -> float:
    """``∫_∂ f^ℓ h_{ℓi}(q) D^i dS_g`` with ``f`` per boundary node."""
    f_edges = problem.grid.boundary_to_edges(f_pair)
    integrand = np.einsum("leN,li,ieN->eN", f_edges, h_q, dn_edges)
    return float(integrate_boundary(integrand, problem.g, problem.grid))


def _volume_pairing(v_pair, h_q, source, problem: ForwardProblem) -> float:
    """``-∫ v^ℓ h_{ℓi}(q) source^i dV_g``."""
    integrand = np.einsum("lxy,li,ixy->xy", v_pair, h_q, source)
    return -float(integrate_volume(integrand, problem.g, problem.grid))


def _lhs(spec: SlotSpec, N: int, problem: ForwardProblem, delta, controls, jobs):
    oracle = DNOracle(problem, controls)
    der = dn_mixed_derivative(spec, range(N), delta, oracle, jobs=jobs)
    h_q = problem.h.metric(problem.q_array)
    value = _boundary_pairing(spec.directions[N], h_q, der.values, problem)
    err = _boundary_pairing(np.abs(spec.directions[N]), np.abs(h_q),
                            np.full_like(der.values, der.richardson_error), problem)
    return value, err, der


def _check_spec(spec: SlotSpec, N: int, problem: ForwardProblem):
    if spec.count != N + 1:
        raise ValueError(f"order-{N} identity needs {N + 1} slots, got {spec.count}")
    if spec.directions[0].shape != (problem.n, problem.grid.n_boundary):
        raise ValueError("slot directions do not match the problem's boundary shape")


# ---------------------------------------------------------------------------
# identities


def verify_nth_identity(N: int, spec: SlotSpec, problem: ForwardProblem,
                        delta: float | None = None, controls: NewtonControls | None = None,
                        jobs: int = 1) -> IdentityReport:
    """Order-``N`` identity with slots ``0..N-1`` differentiated and slot ``N`` paired.

    ``∫_∂ f_N h(q) ∂^N_ε Λ dS_g = -∫ v_N h(q) source_N dV_g`` where
    ``source_N`` is the linearization source of the slot set ``{0..N-1}``.
    """
    if not 2 <= N <= 4:
        raise ValueError("identities of order 2 to 4 are supported")
    _check_spec(spec, N, problem)
    delta = DEFAULT_DELTAS[N] if delta is None else delta
    lhs, lhs_err, der = _lhs(spec, N, problem, delta, controls, jobs)

    jet = problem.h.christoffel_jet(problem.q_array, max(N - 2, 0))
    table = build_table(spec, N - 1, problem.g, problem.grid, jet, jobs=jobs)
    source = nth_source(range(N), table, jet, problem.g, problem.grid)
    h_q = problem.h.metric(problem.q_array)
    rhs = _volume_pairing(table[(N,)], h_q, source, problem)
    return IdentityReport.from_sides(f"order{N}", lhs, rhs, problem.grid.n_cells, der.delta,
                                     lhs_err, directions=list(spec.names))


def verify_second_identity(spec: SlotSpec, problem: ForwardProblem, **kwargs) -> IdentityReport:
    """``∫ f_θ h(q) ∂²Λ dS = -2 ∫ v_θ h(q) g^{αβ} Γ(q) ∂_α v_μ ∂_β v_ν dV``."""
    return verify_nth_identity(2, spec, problem, **kwargs)


def third_identity_source(table, jet, g, grid: GridDomain, convention: str = "cyclic"):
    """Source of the third linearization written as a sum over slot permutations.

    ``cyclic`` sums the three cyclic orderings of ``(0, 1, 2)`` with an
    overall factor 2; ``all`` sums all six orderings with the same factor and
    exists to audit the convention.
    """
    ginv = discretize(g, grid).ginv
    gamma, dgamma = np.asarray(jet[0]), np.asarray(jet[1])
    if convention == "cyclic":
        orders = [(0, 1, 2), (1, 2, 0), (2, 0, 1)]
    elif convention == "all":
        orders = list(itertools.permutations(range(3)))
    else:
        raise ValueError(f"unknown convention {convention!r}")
    out = 0.0
    for mu, nu, th in orders:
        g_nu, g_th = table.gradient((nu,), grid), table.gradient((th,), grid)
        g_mn = table.gradient((mu, nu), grid)
        out = out + np.einsum("abxy,ijkl,lxy,ajxy,bkxy->ixy", ginv, dgamma, table[(mu,)],
                              g_nu, g_th)
        out = out + np.einsum("abxy,ijk,ajxy,bkxy->ixy", ginv, gamma, g_mn, g_th)
    return 2.0 * out


def verify_third_identity(spec: SlotSpec, problem: ForwardProblem, delta: float | None = None,
                          controls: NewtonControls | None = None, jobs: int = 1,
                          convention: str = "cyclic") -> IdentityReport:
    """Order-3 identity with the right side written out as a cyclic sum."""
    _check_spec(spec, 3, problem)
    delta = DEFAULT_DELTAS[3] if delta is None else delta
    lhs, lhs_err, der = _lhs(spec, 3, problem, delta, controls, jobs)
    jet = problem.h.christoffel_jet(problem.q_array, 1)
    table = build_table(spec, 2, problem.g, problem.grid, jet, jobs=jobs)
    source = third_identity_source(table, jet, problem.g, problem.grid, convention)
    h_q = problem.h.metric(problem.q_array)
    rhs = _volume_pairing(table[(3,)], h_q, source, problem)
    return IdentityReport.from_sides("order3", lhs, rhs, problem.grid.n_cells, der.delta,
                                     lhs_err, directions=list(spec.names),
                                     convention=convention)


# ---------------------------------------------------------------------------
# forward Alessandrini check


def jets_agree(h_a, h_b, q, order: int, atol: float = 1e-12) -> bool:
    """True when ``h(q)`` and the Christoffel jets to ``order`` coincide."""
    q = np.asarray(q, dtype=float)
    if not np.allclose(h_a.metric(q), h_b.metric(q), rtol=0, atol=atol):
        return False
    ja, jb = h_a.christoffel_jet(q, order), h_b.christoffel_jet(q, order)
    return all(np.allclose(a, b, rtol=0, atol=atol) for a, b in zip(ja, jb))


def verify_alessandrini(order: int, problem: ForwardProblem, other: ForwardProblem,
                        spec: SlotSpec, delta: float | None = None,
                        controls: NewtonControls | None = None, jobs: int = 1,
                        check_jets: bool = True) -> IdentityReport:
    """Compare order-``(k+2)`` DN derivatives of two targets sharing a jet to order ``k``.

    ``lhs`` and ``rhs`` are the pairings ``∫ f_last h(q) ∂^{k+2}Λ dS`` of the
    two problems; ``metadata['field_discrepancy']`` is the max-norm relative
    difference of the full boundary fields. For ``k = 0`` the metadata also
    holds the volume expression ``-2 ∫ v h(q)(Γ - Γ̂)(q) g ∂v ∂v dV`` that the
    difference of pairings should equal.
    """
    k = order
    if not 0 <= k <= 2:
        raise ValueError("shared jet order must be 0, 1 or 2")
    if problem.grid.n_cells != other.grid.n_cells or problem.q != other.q:
        raise ValueError("problems must share grid and base point")
    if check_jets and not jets_agree(problem.h, other.h, problem.q_array, k):
        raise JetMismatchError(f"targets do not share the Christoffel jet to order {k} at q")
    m = k + 2
    _check_spec(spec, m, problem)
    delta = DEFAULT_DELTAS[m] if delta is None else delta
    lhs_a, err_a, der_a = _lhs(spec, m, problem, delta, controls, jobs)
    lhs_b, err_b, der_b = _lhs(spec, m, other, delta, controls, jobs)
    scale = max(float(np.abs(der_a.values).max()), float(np.abs(der_b.values).max()), REL_FLOOR)
    field_rel = float(np.abs(der_a.values - der_b.values).max()) / scale
    meta = {"shared_order": k, "field_discrepancy": field_rel,
            "richardson_error": max(der_a.richardson_error, der_b.richardson_error) / scale,
            "directions": list(spec.names)}
    if k == 0:
        jet_a = problem.h.christoffel_jet(problem.q_array, 0)
        jet_b = other.h.christoffel_jet(other.q_array, 0)
        table = build_table(spec, 1, problem.g, problem.grid, jet_a)
        ginv = discretize(problem.g, problem.grid).ginv
        dgam = jet_a[0] - jet_b[0]
        g0, g1 = table.gradient((0,), problem.grid), table.gradient((1,), problem.grid)
        src = (np.einsum("abxy,ijk,ajxy,bkxy->ixy", ginv, dgam, g0, g1)
               + np.einsum("abxy,ijk,ajxy,bkxy->ixy", ginv, dgam, g1, g0))
        h_q = problem.h.metric(problem.q_array)
        meta["difference_lhs"] = lhs_a - lhs_b
        meta["difference_rhs"] = _volume_pairing(table[(2,)], h_q, src, problem)
    return IdentityReport.from_sides(f"alessandrini{k}", lhs_a, lhs_b, problem.grid.n_cells,
                                     der_a.delta, max(err_a, err_b), **meta)
