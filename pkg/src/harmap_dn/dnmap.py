"""Dirichlet-to-Neumann map as a boundary-only oracle, its ε-derivatives, and energy data."""

from __future__ import annotations

import itertools
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import (IllConditionedMetricError, NoConvergenceError, RangeEscapeError,
                     SolverFailureError, StepTooLargeError)
from .forward import ForwardProblem, NewtonControls, NewtonReport, dirichlet_energy, solve
from .grid import (EDGES, BoundaryGeometry, GridDomain, boundary_geometry, check_finite,
                   integrate_boundary, lumped_nodal, nodal_weights)
from .linearize import SlotSpec

DEFAULT_DELTA = 1e-3
RATIO_BAND = (3.5, 4.5)
MAX_HALVINGS = 2
COND_LIMIT = 1e12
ROUNDOFF = 1e-13    # relative accuracy of one converged oracle call


@dataclass
class DNSample:
    """Boundary displacement ``f`` with ``Λ(q + f)`` per edge, shape ``(n, 4, N)``."""

    f: np.ndarray
    values: np.ndarray
    report: NewtonReport | None = None


def dn_evaluate(f, problem: ForwardProblem, controls: NewtonControls | None = None) -> DNSample:
    """Solve with boundary data ``q + f`` and return the conormal derivative."""
    sub = problem.with_boundary(f)
    state, report = solve(sub, controls)
    values = check_finite(state.normal_derivative, "DN values")
    return DNSample(sub.boundary_data, values, report)


class DNOracle:
    """Boundary-to-boundary black box ``f ↦ Λ(q + f)``.

    Exposes only what the inverse problem is allowed to know: the grid, the
    boundary quadrature of ``g``, the base point and ``h(q)``. Calls are
    counted and safe to issue from several threads.
    """

    def __init__(self, problem: ForwardProblem, controls: NewtonControls | None = None):
        self._evaluate: Callable = lambda f: dn_evaluate(f, problem, controls).values
        self.grid: GridDomain = problem.grid
        self.boundary: BoundaryGeometry = boundary_geometry(problem.g, problem.grid)
        self.q = problem.q_array
        self.n = problem.n
        self.h_at_q = problem.h.metric(self.q)
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, f) -> np.ndarray:
        with self._lock:
            self.calls += 1
        return self._evaluate(np.asarray(f, dtype=float))

    def zero_data(self) -> np.ndarray:
        return np.zeros((self.n, self.grid.n_boundary))


# ---------------------------------------------------------------------------
# mixed ε-differences


@dataclass
class DNDerivative:
    slots: tuple
    directions: list
    values: np.ndarray
    delta: float
    richardson_error: float
    ratio: float | None = None
    calls: int = 0

    def to_dict(self) -> dict:
        return {
            "slots": list(self.slots),
            "directions": list(self.directions),
            "delta": self.delta,
            "values": {edge: self.values[:, e].tolist() for e, edge in enumerate(EDGES)},
            "richardson_error": self.richardson_error,
        }


def _stencil(k: int):
    """Sign patterns of the central mixed-difference stencil, in sorted order."""
    return sorted(itertools.product((-1, 1), repeat=k))


def mixed_difference(oracle: Callable, directions: Sequence[np.ndarray], delta: float,
                     jobs: int = 1, with_noise: bool = False):
    """``Σ_σ (Π σ) Λ(δ Σ σ_s f_s) / (2δ)^k`` over ``σ ∈ {±1}^k``.

    With ``with_noise`` also returns the round-off level of the stencil,
    ``2^k ROUNDOFF max|Λ| / (2δ)^k``.
    """
    k = len(directions)
    signs = _stencil(k)
    data = [delta * sum(s * f for s, f in zip(sig, directions)) for sig in signs]

    def call(f):
        try:
            return oracle(f)
        except (NoConvergenceError, RangeEscapeError, SolverFailureError) as exc:
            raise StepTooLargeError(f"oracle failed at step {delta:g}: {exc}") from exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(call, data))
    else:
        values = [call(f) for f in data]
    total = np.zeros_like(values[0])
    for sig, val in zip(signs, values):      # fixed summation order
        total += np.prod(sig) * val
    total /= (2.0 * delta) ** k
    if not with_noise:
        return total
    vmax = max(float(np.abs(v).max()) for v in values)
    return total, 2.0 ** k * ROUNDOFF * vmax / (2.0 * delta) ** k


def dn_mixed_derivative(spec: SlotSpec, order_slots: Sequence[int], delta: float,
                        oracle: Callable, richardson: bool = True, adapt: bool = True,
                        jobs: int = 1, noise_floor: float = 1e-9) -> DNDerivative:
    """Estimate ``∂_{ε_S} Λ`` at ``ε = 0`` from oracle calls only.

    With ``richardson`` the stencil is run at ``δ`` and ``δ/2``; the
    extrapolated value ``(4 D(δ/2) - D(δ)) / 3`` is returned with error
    estimate ``max|D(δ) - D(δ/2)| / 3``. With ``adapt`` a third step
    ``δ/4`` checks that the difference ratio lies in ``[3.5, 4.5]``; if it
    does not while the differences exceed ``noise_floor`` relative to the
    value, ``δ`` is halved (at most twice). Differences below the round-off
    level of the stencil stop the adaptation, since halving would only
    amplify the noise.
    """
    slots = tuple(int(s) for s in order_slots)
    if not 1 <= len(slots) <= 4:
        raise ValueError("mixed derivatives of order 1 to 4 are supported")
    dirs = [spec.directions[s] for s in slots]
    names = [spec.names[s] for s in slots]
    calls0 = getattr(oracle, "calls", 0)
    if not richardson:
        val = mixed_difference(oracle, dirs, delta, jobs)
        return DNDerivative(slots, names, val, delta, float("nan"),
                            calls=getattr(oracle, "calls", 0) - calls0)
    d = delta
    D1, _ = mixed_difference(oracle, dirs, d, jobs, with_noise=True)
    D2, noise2 = mixed_difference(oracle, dirs, d / 2, jobs, with_noise=True)
    ratio = None
    for _ in range(MAX_HALVINGS + 1 if adapt else 0):
        floor = max(noise_floor * float(np.abs(D2).max()), 4.0 * noise2)
        diff12 = float(np.abs(D1 - D2).max())
        if diff12 <= floor:
            break
        D3, noise3 = mixed_difference(oracle, dirs, d / 4, jobs, with_noise=True)
        diff23 = float(np.abs(D2 - D3).max())
        ratio = diff12 / diff23 if diff23 > 0 else float("inf")
        if RATIO_BAND[0] <= ratio <= RATIO_BAND[1] or diff23 <= max(floor, 4.0 * noise3):
            break
        d, D1, D2, noise2 = d / 2, D2, D3, noise3
    values = (4.0 * D2 - D1) / 3.0
    err = float(np.abs(D1 - D2).max()) / 3.0
    return DNDerivative(slots, names, values, d, err, ratio,
                        calls=getattr(oracle, "calls", 0) - calls0)


# ---------------------------------------------------------------------------
# energy


def energy_evaluate(f, problem: ForwardProblem, controls: NewtonControls | None = None) -> float:
    sub = problem.with_boundary(f)
    state, _ = solve(sub, controls)
    return dirichlet_energy(state.displacement, sub, displacement=True)


def boundary_pairing(phi, f, dn_edges, problem: ForwardProblem) -> float:
    """``∫_∂ φ^j h_ij(q + f) ∂_η u^i dS_g`` with per-node ``φ`` and ``f``."""
    grid = problem.grid
    y = problem.q_array[:, None] + np.asarray(f, dtype=float)
    h_edges = grid.boundary_to_edges(problem.h.metric(y).reshape(problem.n ** 2, -1))
    h_edges = h_edges.reshape((problem.n, problem.n) + h_edges.shape[1:])
    phi_edges = grid.boundary_to_edges(np.asarray(phi, dtype=float))
    integrand = np.einsum("jeN,ijeN,ieN->eN", phi_edges, h_edges, dn_edges)
    return float(integrate_boundary(integrand, problem.g, grid))


@dataclass
class EnergyVariation:
    centered: float
    pairing: float
    t: float

    @property
    def relative_mismatch(self) -> float:
        scale = max(abs(self.centered), abs(self.pairing), 1e-14)
        return abs(self.centered - self.pairing) / scale


def energy_first_variation(f, phi, problem: ForwardProblem, t: float = 1e-3,
                           controls: NewtonControls | None = None) -> EnergyVariation:
    """First variation of ``E(u_{q+f})`` along ``φ`` computed two ways.

    ``centered`` is ``(E(f + tφ) - E(f - tφ)) / 2t``; ``pairing`` is the
    boundary integral of ``φ^j h_ij(q+f) ∂_η u^i``.
    """
    f = np.asarray(f, dtype=float)
    phi = np.asarray(phi, dtype=float)
    e_plus = energy_evaluate(f + t * phi, problem, controls)
    e_minus = energy_evaluate(f - t * phi, problem, controls)
    sample = dn_evaluate(f, problem, controls)
    pairing = boundary_pairing(phi, f, sample.values, problem)
    return EnergyVariation((e_plus - e_minus) / (2.0 * t), pairing, t)


@dataclass
class EnergyDN:
    """Per-boundary-node DN values recovered from energy variations."""

    values: np.ndarray              # (n, 4 n_cells), lumped at corners
    variations: np.ndarray          # (n, 4 n_cells), first variation along e_j ⊗ hat_node
    condition: float
    mode: str


def dn_from_energy(f, problem: ForwardProblem, mode: str = "pairing",
                   t: float = 1e-4, controls: NewtonControls | None = None) -> EnergyDN:
    """Recover ``Λ(q + f)`` from first variations of the Dirichlet energy.

    The spanning set is ``e_j`` times the nodal hat function of each boundary
    node. The variation along it equals ``w_node h_ij(q + f) Λ^i(node)``
    with ``w_node`` the boundary quadrature weight, so ``Λ`` follows by
    inverting ``h(q + f)`` node by node. In ``pairing`` mode the variations
    are the boundary pairings of one forward solve; in ``difference`` mode
    each one is a centered energy difference (two solves per basis function).
    Hat functions are rough, so difference-mode nodal values agree with the
    pairing mode only weakly: pairings against smooth directions converge
    under refinement, single nodes do not.
    """
    grid = problem.grid
    n, nb = problem.n, grid.n_boundary
    f = check_finite(np.asarray(f, dtype=float), "boundary data")
    geo = boundary_geometry(problem.g, grid)
    w_node = nodal_weights(geo)
    y = problem.q_array[:, None] + f
    hb = problem.h.metric(y)                                  # (n, n, nb)
    hb_nodes = np.moveaxis(hb, -1, 0)
    cond = float(np.linalg.cond(hb_nodes).max())
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedMetricError(f"h(q+f) is ill-conditioned (cond {cond:.3e})")

    if mode == "pairing":
        sample = dn_evaluate(f, problem, controls)
        lam = lumped_nodal(sample.values, geo)                # (n, nb)
        variations = np.einsum("ijb,ib->jb", hb, lam) * w_node
    elif mode == "difference":
        variations = np.zeros((n, nb))
        for j in range(n):
            for b in range(nb):
                phi = np.zeros((n, nb))
                phi[j, b] = 1.0
                e_plus = energy_evaluate(f + t * phi, problem, controls)
                e_minus = energy_evaluate(f - t * phi, problem, controls)
                variations[j, b] = (e_plus - e_minus) / (2.0 * t)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    rhs = np.moveaxis(variations / w_node, -1, 0)[..., None]   # (nb, n, 1)
    lam = np.linalg.solve(hb_nodes, rhs)[..., 0].T
    return EnergyDN(lam, variations, cond, mode)
