"""Recovery of the Christoffel jet of the target metric at q from DN data alone.

All formulas use slot directions built from a probe scalar ``a`` on the
boundary and constant vectors. With ``D = ∫ |dv_a|² dV_g`` (obtained from a
first-order DN derivative) and ``C`` the amplitude of the constant slots:

* ``Γ^i_{jk}(q)`` from slots ``a e_j, a e_k``:
  ``h(q) Γ_{jk}(q) · 2D = -h(q) ∫_∂ ∂²Λ dS_g``
* ``∂_l Γ^i_{jk}(q)`` from slots ``C e_l, a e_j, a e_k``:
  ``C h(q) ∂_l Γ_{jk}(q) · 2D = -h(q) ∫_∂ ∂³Λ dS_g``
* ``∂_{lm} Γ^i_{jk}(q)`` from slots ``C e_l, C e_m, a e_j, a e_k`` after
  subtracting terms that involve only lower jet orders.

Pairing with a constant vector ``C e_p`` weighted by ``h(q)`` and inverting
``h(q)`` gives each component.
"""

from __future__ import annotations

import itertools
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dnmap import DEFAULT_DELTA, dn_mixed_derivative
from .errors import DegenerateProbeError, IllConditionedMetricError, NoiseFloorError
from .geometry import metric_jet_from_christoffel_jet
from .grid import integrate_boundary, integrate_volume
from .linearize import SlotSpec, build_table, nth_source

DEGENERATE_THRESHOLD = 1e-8
NOISE_WARNING = 0.25
KNOWN_TERM_LIMIT = 10.0
COND_LIMIT = 1e10


@dataclass
class ChristoffelJet:
    """Recovered ``[Γ(q), ∂Γ(q), ...]`` with per-entry error estimates."""

    tensors: list
    errors: list
    warnings: list = field(default_factory=list)

    @property
    def order(self) -> int:
        return len(self.tensors) - 1

    def to_dict(self) -> dict:
        return {"order": self.order, "tensors": [t.tolist() for t in self.tensors],
                "errors": [e.tolist() for e in self.errors], "warnings": list(self.warnings)}


@dataclass
class ReconstructionResult:
    jet: ChristoffelJet
    h_at_q: np.ndarray
    metric_jet: list
    metric_jet_errors: list
    oracle_calls: int = 0
    runtime: float = 0.0
    comparison: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = {"jet": self.jet.to_dict(), "h_at_q": self.h_at_q.tolist(),
               "metric_jet": [m.tolist() for m in self.metric_jet],
               "metric_jet_errors": [m.tolist() for m in self.metric_jet_errors],
               "oracle_calls": self.oracle_calls, "comparison": self.comparison,
               "provenance": self.provenance}
        if include_runtime:
            out["runtime"] = self.runtime
        return out

    def comparison_rows(self) -> list:
        """Flat rows ``(quantity, index, recovered, error_estimate, truth)`` for CSV output."""
        rows = []
        truth = self.comparison.get("truth", {})
        for name, values, errs in (
                [(f"dGamma{m}", t, e) for m, (t, e) in
                 enumerate(zip(self.jet.tensors, self.jet.errors))]
                + [(f"dh{m}", t, e) for m, (t, e) in
                   enumerate(zip(self.metric_jet, self.metric_jet_errors))]):
            ref = truth.get(name)
            for idx in itertools.product(*[range(s) for s in values.shape]):
                rows.append((name, "".join(map(str, idx)), float(values[idx]), float(errs[idx]),
                             float(np.asarray(ref)[idx]) if ref is not None else float("nan")))
        return rows


def _check_h(h_q):
    h_q = np.asarray(h_q, dtype=float)
    cond = np.linalg.cond(h_q)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise IllConditionedMetricError(f"h(q) is ill-conditioned (cond {cond:.3e})")
    return h_q


def _unit(n, j):
    e = np.zeros(n)
    e[j] = 1.0
    return e


def _direction(oracle, scalar, j):
    """``scalar e_j`` as per-boundary-node data of shape ``(n, 4 n_cells)``."""
    return np.outer(_unit(oracle.n, j), np.broadcast_to(scalar, (oracle.grid.n_boundary,)))


def _pair_constant(oracle, values, err):
    """``∫_∂ h(q) e_p · V dS`` for every ``p``, then solved against ``h(q)``.

    Returns ``(∫ V dS, error bound)`` per component; pairing with
    ``h(q) e_p`` and inverting ``h(q)`` is the identity up to round-off.
    """
    h_q = _check_h(oracle.h_at_q)
    integral = integrate_boundary(values, oracle.boundary, oracle.grid)     # (n,)
    pairing = h_q @ integral
    recovered = np.linalg.solve(h_q, pairing)
    perimeter = float(oracle.boundary.weights.sum())
    return recovered, np.full(oracle.n, err * perimeter)


def probe_denominator(a, j0: int, oracle, delta: float = DEFAULT_DELTA, jobs: int = 1):
    """``D = ∫_∂ a (∂_ε Λ[a e_{j0}])^{j0} dS_g``, equal to ``∫ |dv_a|²_g dV_g``.

    Returns ``(D, error)``. Raises ``DegenerateProbeError`` if ``D`` is not
    above ``1e-8``, which happens for constant ``a``.
    """
    a = np.asarray(a, dtype=float)
    spec = SlotSpec([_direction(oracle, a, j0)])
    der = dn_mixed_derivative(spec, [0], delta, oracle, jobs=jobs)
    a_edges = oracle.grid.boundary_to_edges(a)
    D = float(integrate_boundary(a_edges * der.values[j0], oracle.boundary, oracle.grid))
    err = float(integrate_boundary(np.abs(a_edges), oracle.boundary, oracle.grid)) \
        * der.richardson_error
    if not D > DEGENERATE_THRESHOLD:
        raise DegenerateProbeError(f"probe denominator {D:.3e} is not positive; "
                                   "use a non-constant probe")
    return D, err


def _slot_delta(delta, amplitudes):
    """Scale ``δ`` so the largest combined boundary amplitude stays at ``δ · k``."""
    return delta / max(1.0, max(amplitudes))


def recover_christoffel(oracle, probe, amplitude: float = 1.0, delta: float = DEFAULT_DELTA,
                        jobs: int = 1, denominator=None):
    """Recover ``Γ^i_{jk}(q)`` for ``j <= k`` and symmetrise.

    Returns ``(Γ, error)`` arrays of shape ``(n, n, n)``. ``amplitude`` is the
    constant ``C`` of the paired slot; it cancels from the formula.
    """
    n = oracle.n
    a = np.asarray(probe, dtype=float)
    D, D_err = denominator if denominator is not None else probe_denominator(a, 0, oracle, delta)
    d = _slot_delta(delta, [np.abs(a).max()])
    gamma = np.zeros((n, n, n))
    err = np.zeros((n, n, n))
    pairs = [(j, k) for j in range(n) for k in range(j, n)]

    def one(pair):
        j, k = pair
        spec = SlotSpec([_direction(oracle, a, j), _direction(oracle, a, k)])
        return dn_mixed_derivative(spec, [0, 1], d, oracle)

    ders = _run(one, pairs, jobs)
    for (j, k), der in zip(pairs, ders):
        # the paired slot C e_p contributes C to both sides
        C = float(amplitude)
        integral, ierr = _pair_constant(oracle, C * der.values, C * der.richardson_error)
        value = -integral / (2.0 * C * D)
        e = ierr / (2.0 * C * D) + np.abs(value) * D_err / D
        gamma[:, j, k] = gamma[:, k, j] = value
        err[:, j, k] = err[:, k, j] = e
    return gamma, err


def recover_christoffel_derivative(oracle, probe, amplitude: float = 1.0,
                                   delta: float = DEFAULT_DELTA, jobs: int = 1, denominator=None):
    """Recover ``∂_l Γ^i_{jk}(q)`` stored as ``[i, j, k, l]``.

    The constant slot ``C e_l`` shifts the base point, so every lower-order
    contribution to the third DN derivative vanishes.
    """
    n = oracle.n
    a = np.asarray(probe, dtype=float)
    C = float(amplitude)
    D, D_err = denominator if denominator is not None else probe_denominator(a, 0, oracle, delta)
    d = _slot_delta(delta, [C, np.abs(a).max()])
    dgamma = np.zeros((n, n, n, n))
    err = np.zeros((n, n, n, n))
    tasks = [(l, j, k) for l in range(n) for j in range(n) for k in range(j, n)]

    def one(task):
        l, j, k = task
        spec = SlotSpec([_direction(oracle, C, l), _direction(oracle, a, j),
                         _direction(oracle, a, k)])
        return dn_mixed_derivative(spec, [0, 1, 2], d, oracle)

    ders = _run(one, tasks, jobs)
    warnings = []
    for (l, j, k), der in zip(tasks, ders):
        integral, ierr = _pair_constant(oracle, C * der.values, C * der.richardson_error)
        value = -integral / (2.0 * C * C * D)
        e = ierr / (2.0 * C * C * D) + np.abs(value) * D_err / D
        dgamma[:, j, k, l] = dgamma[:, k, j, l] = value
        err[:, j, k, l] = err[:, k, j, l] = e
    scale = max(float(np.abs(dgamma).max()), 1e-12)
    if err.max() > NOISE_WARNING * scale:
        warnings.append(f"third-difference error estimate {err.max():.2e} exceeds "
                        f"{NOISE_WARNING:.0%} of the largest entry {scale:.2e}")
    return dgamma, err, warnings


def recover_higher(oracle, probe, jet_lower: Sequence[np.ndarray], K: int = 2,
                   amplitude: float = 1.0, delta: float = 1e-2, g=None, jobs: int = 1,
                   denominator=None):
    """Experimental recovery of ``∂^K Γ(q)`` for ``K = 2``, stored ``[i, j, k, l, m]``.

    The order-``K+2`` DN derivative along ``C e_l, C e_m, a e_j, a e_k`` is
    paired with constants. Contributions of the already recovered jet
    ``jet_lower`` (orders ``< K``) are computed by forward linearized solves
    on the oracle's grid with the known domain metric ``g`` and subtracted.
    Aborts with ``NoiseFloorError`` when the subtracted part exceeds ten times
    what remains.
    """
    if K != 2:
        raise ValueError("only K = 2 is supported")
    n = oracle.n
    a = np.asarray(probe, dtype=float)
    C = float(amplitude)
    D, D_err = denominator if denominator is not None else probe_denominator(a, 0, oracle, 1e-3)
    d = _slot_delta(delta, [C, np.abs(a).max()])
    out = np.zeros((n, n, n, n, n))
    err = np.zeros_like(out)
    tasks = [(l, m, j, k) for l in range(n) for m in range(l, n)
             for j in range(n) for k in range(j, n)]

    def one(task):
        l, m, j, k = task
        spec = SlotSpec([_direction(oracle, C, l), _direction(oracle, C, m),
                         _direction(oracle, a, j), _direction(oracle, a, k)])
        return spec, dn_mixed_derivative(spec, [0, 1, 2, 3], d, oracle)

    results = _run(one, tasks, jobs)
    for (l, m, j, k), (spec, der) in zip(tasks, results):
        integral, ierr = _pair_constant(oracle, der.values, der.richardson_error)
        known = np.zeros(n)
        if g is not None:
            known = _known_terms(spec, jet_lower, g, oracle)
        remaining = integral - known
        if np.any(np.abs(known) > KNOWN_TERM_LIMIT * np.maximum(np.abs(remaining), 1e-300)) \
                and np.abs(known).max() > ierr.max():
            raise NoiseFloorError("known-term subtraction dominates the measured signal")
        value = -remaining / (2.0 * C * C * D)
        e = ierr / (2.0 * C * C * D) + np.abs(value) * D_err / D
        for (x, y), (s, t) in itertools.product(((l, m), (m, l)), ((j, k), (k, j))):
            out[:, s, t, x, y] = value
            err[:, s, t, x, y] = e
    return out, err


def _known_terms(spec: SlotSpec, jet_lower, g, oracle) -> np.ndarray:
    """``∫_∂ ∂⁴Λ dS`` predicted from the jet below order 2 (per component)."""
    grid = oracle.grid
    n = oracle.n
    jet = [np.asarray(t, dtype=float) for t in jet_lower[:2]]
    jet.append(np.zeros((n,) * 5))
    table = build_table(spec, 3, g, grid, jet)
    source = nth_source(range(4), table, jet, g, grid)
    # ∫_∂ ∂_η v dS = ∫ Δ v dV = -∫ source dV
    return -np.array([integrate_volume(source[i], g, grid) for i in range(n)])


def _run(func, tasks, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(func, tasks))
    return [func(t) for t in tasks]


def _propagate(h_q, tensors, errors):
    """First-order propagation of Christoffel-jet errors into metric derivatives."""
    base = metric_jet_from_christoffel_jet(h_q, tensors)
    out = [np.zeros_like(b) for b in base]
    for m, (t, e) in enumerate(zip(tensors, errors)):
        for idx in zip(*np.nonzero(e)):
            bumped = [x.copy() for x in tensors]
            step = 1e-6 * max(1.0, abs(t[idx]))
            bumped[m][idx] += step
            moved = metric_jet_from_christoffel_jet(h_q, bumped)
            for r in range(len(out)):
                out[r] += np.abs(moved[r] - base[r]) / step * e[idx]
    return base, out


def assemble_metric_jet(h_at_q, jet: ChristoffelJet, truth=None) -> ReconstructionResult:
    """Metric derivatives at q from ``h(q)`` and the recovered Christoffel jet.

    ``truth`` may hold analytic ``christoffel`` and ``metric`` jets for comparison.
    """
    h_q = _check_h(h_at_q)
    metric_jet, metric_err = _propagate(h_q, jet.tensors, jet.errors)
    comparison = {}
    if truth is not None:
        comparison["truth"] = {}
        rows = {}
        for m, t in enumerate(jet.tensors):
            ref = np.asarray(truth["christoffel"][m])
            comparison["truth"][f"dGamma{m}"] = ref.tolist()
            rows[f"dGamma{m}"] = _compare(t, jet.errors[m], ref)
        for m, t in enumerate(metric_jet):
            if m >= len(truth["metric"]):
                break
            ref = np.asarray(truth["metric"][m])
            comparison["truth"][f"dh{m}"] = ref.tolist()
            rows[f"dh{m}"] = _compare(t, metric_err[m], ref)
        comparison["summary"] = rows
    return ReconstructionResult(jet, h_q, metric_jet, metric_err, comparison=comparison)


def _compare(value, err, ref) -> dict:
    diff = np.abs(value - ref)
    scale = float(np.abs(ref).max())
    # undefined against an identically zero reference
    rel = float(diff.max() / scale) if scale > 0 else None
    return {"max_abs_error": float(diff.max()), "relative_error": rel,
            "max_error_estimate": float(np.abs(err).max()),
            "within_2x_estimate": bool(np.all(diff <= 2.0 * np.abs(err) + 1e-12))}


def reconstruct(oracle, probe, order: int = 1, amplitude: float = 1.0,
                delta: float = DEFAULT_DELTA, coarse_oracle=None, coarse_probe=None,
                truth=None, jobs: int = 1, g=None, higher_delta: float = 1e-2):
    """Recover the Christoffel jet to ``order`` and assemble the metric jet.

    When ``coarse_oracle`` (same problem on a grid with half the cells) is
    given, every entry's error estimate adds ``|X_n - X_{n/2}| / 3``.
    """
    t0 = time.perf_counter()
    calls0 = oracle.calls

    def run(orc, a):
        D = probe_denominator(a, 0, orc, delta)
        tensors, errors, warnings = [], [], []
        gam, e = recover_christoffel(orc, a, amplitude, delta, jobs, D)
        tensors.append(gam)
        errors.append(e)
        if order >= 1:
            dg, e, w = recover_christoffel_derivative(orc, a, amplitude, delta, jobs, D)
            tensors.append(dg)
            errors.append(e)
            warnings += w
        if order >= 2:
            d2, e = recover_higher(orc, a, tensors, 2, amplitude, higher_delta, g, jobs, D)
            tensors.append(d2)
            errors.append(e)
        return tensors, errors, warnings

    tensors, errors, warnings = run(oracle, probe)
    if coarse_oracle is not None:
        ct, _, _ = run(coarse_oracle, coarse_probe)
        errors = [e + np.abs(t - c) / 3.0 for t, e, c in zip(tensors, errors, ct)]
    jet = ChristoffelJet(tensors, errors, warnings)
    result = assemble_metric_jet(oracle.h_at_q, jet, truth)
    result.oracle_calls = oracle.calls - calls0
    if coarse_oracle is not None:
        result.provenance["coarse_oracle_calls"] = coarse_oracle.calls
        result.provenance["coarse_n_cells"] = coarse_oracle.grid.n_cells
    result.provenance.update({"n_cells": oracle.grid.n_cells, "delta": delta,
                              "amplitude": amplitude, "order": order})
    result.runtime = time.perf_counter() - t0
    return result


def ground_truth(h, q, order: int) -> dict:
    """Analytic Christoffel and metric jets of ``h`` at ``q`` for comparisons."""
    q = np.asarray(q, dtype=float)
    return {"christoffel": h.christoffel_jet(q, order),
            "metric": [m[..., 0] for m in h.metric_jet(q[:, None], order + 1)]}
