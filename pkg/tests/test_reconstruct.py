import numpy as np
import pytest

from harmap_dn.dnmap import DNOracle
from harmap_dn.errors import DegenerateProbeError, NoiseFloorError
from harmap_dn.forward import ForwardProblem
from harmap_dn.geometry import TargetMetric
from harmap_dn.grid import GridDomain
from harmap_dn.reconstruct import (assemble_metric_jet, ground_truth, probe_denominator,
                                   reconstruct, recover_christoffel,
                                   recover_christoffel_derivative, recover_higher,
                                   ChristoffelJet)

from conftest import Q

ALLOWED = ("grid", "boundary", "q", "n", "h_at_q", "calls")


class BoundaryOnlyOracle:
    """Exposes the boundary-only interface and nothing else."""

    def __init__(self, problem):
        inner = DNOracle(problem)
        object.__setattr__(self, "_inner", inner)

    def __getattr__(self, name):
        if name in ALLOWED:
            return getattr(self._inner, name)
        raise AssertionError(f"reconstruction touched forbidden attribute {name!r}")

    def __call__(self, f):
        return self._inner(f)


def _oracle(h, n, g):
    return BoundaryOnlyOracle(ForwardProblem(g, h, GridDomain(n), Q, 0.0))


def _probe(oracle, func=lambda x, y: x):
    return oracle.grid.sample_boundary(func)


def test_denominator_is_dirichlet_integral(flat_g, conformal_h):
    oracle = _oracle(conformal_h, 12, flat_g)
    D, err = probe_denominator(_probe(oracle), 0, oracle)
    assert D == pytest.approx(1.0, abs=1e-8)   # ∫|∇x|² over the unit square
    assert err < 1e-6


def test_constant_probe_is_degenerate(flat_g, conformal_h):
    oracle = _oracle(conformal_h, 8, flat_g)
    with pytest.raises(DegenerateProbeError):
        probe_denominator(np.ones(oracle.grid.n_boundary), 0, oracle)


def test_flat_target_reconstructs_zero_jet(flat_g):
    h = TargetMetric.euclidean(2)
    oracle = _oracle(h, 12, flat_g)
    result = reconstruct(oracle, _probe(oracle), order=1, truth=ground_truth(h, Q, 1))
    assert np.all(result.jet.tensors[0] == 0)
    summary = result.comparison["summary"]
    assert summary["dGamma0"]["relative_error"] is None
    assert all(row["within_2x_estimate"] for row in summary.values())


@pytest.mark.parametrize("family", ["conformal", "poly"])
def test_christoffel_recovery_converges(flat_g, conformal_h, poly_h, family):
    h = conformal_h if family == "conformal" else poly_h
    truth = h.christoffel(np.array(Q))
    errs = []
    for n in (12, 24):
        oracle = _oracle(h, n, flat_g)
        gamma, _ = recover_christoffel(oracle, _probe(oracle))
        errs.append(np.abs(gamma - truth).max() / np.abs(truth).max())
    assert errs[1] < 2e-2
    assert np.log2(errs[0] / errs[1]) > 1.5


def test_amplitude_and_probe_invariance(flat_g, conformal_h):
    oracle = _oracle(conformal_h, 16, flat_g)
    a, _ = recover_christoffel(oracle, _probe(oracle), amplitude=1.0)
    b, _ = recover_christoffel(oracle, _probe(oracle), amplitude=2.0)
    c, _ = recover_christoffel(oracle, _probe(oracle, lambda x, y: y))
    assert np.allclose(a, b, atol=1e-12)
    truth = conformal_h.christoffel(np.array(Q))
    assert np.abs(a - c).max() < 0.05 * np.abs(truth).max()


def test_derivative_recovery(flat_g, poly_h):
    oracle = _oracle(poly_h, 16, flat_g)
    dgamma, err, warnings = recover_christoffel_derivative(oracle, _probe(oracle))
    truth = poly_h.christoffel_derivative(np.array(Q))
    assert np.abs(dgamma - truth).max() / np.abs(truth).max() < 5e-2
    assert np.allclose(dgamma, dgamma.transpose(0, 2, 1, 3))
    assert warnings == []


def test_coarse_grid_error_estimate_covers_error(flat_g, conformal_h):
    fine = _oracle(conformal_h, 16, flat_g)
    coarse = _oracle(conformal_h, 8, flat_g)
    result = reconstruct(fine, _probe(fine), order=1, coarse_oracle=coarse,
                         coarse_probe=_probe(coarse), truth=ground_truth(conformal_h, Q, 1))
    summary = result.comparison["summary"]
    for key in ("dGamma0", "dGamma1", "dh1", "dh2"):
        assert summary[key]["within_2x_estimate"], key
    assert result.provenance["coarse_n_cells"] == 8
    payload = result.to_dict()
    assert "runtime" not in payload and payload["oracle_calls"] == result.oracle_calls
    rows = result.comparison_rows()
    assert len(rows) == 8 + 16 + 4 + 8 + 16      # Γ, ∂Γ, h, ∂h, ∂²h entries


def test_assembly_of_exact_jet_is_exact(poly_h):
    q = np.array(Q)
    jet = ChristoffelJet(poly_h.christoffel_jet(q, 1), [np.zeros((2,) * 3), np.zeros((2,) * 4)])
    result = assemble_metric_jet(poly_h.metric(q), jet, ground_truth(poly_h, Q, 1))
    for key in ("dh1", "dh2"):
        assert result.comparison["summary"][key]["max_abs_error"] < 1e-12


def _cubic_family():
    d1, d2 = "(y1 - 0.1)", "(y2 - 0.2)"
    return TargetMetric.from_expressions(
        [[f"1 + {d1}^3", f"0.5*{d1}^2*{d2}"], [f"0.5*{d1}^2*{d2}", f"1 + {d2}^3 + {d1}*{d2}^2"]])


@pytest.mark.slow
def test_second_derivative_recovery_with_vanishing_lower_jet(flat_g):
    h = _cubic_family()
    oracle = _oracle(h, 12, flat_g)
    lower = h.christoffel_jet(np.array(Q), 1)
    assert all(np.abs(t).max() < 1e-14 for t in lower)
    d2, err = recover_higher(oracle, _probe(oracle), lower, g=flat_g)
    truth = h.christoffel_jet(np.array(Q), 2)[2]
    assert np.abs(d2 - truth).max() / np.abs(truth).max() < 0.1


def test_cancellation_guard_aborts(monkeypatch, flat_g, conformal_h):
    import harmap_dn.reconstruct as rec

    class Fake:
        values = np.zeros((2, 4, 9))
        richardson_error = 1e-12

    known = np.array([1.0, -2.0])
    monkeypatch.setattr(rec, "dn_mixed_derivative", lambda *a, **k: Fake())
    monkeypatch.setattr(rec, "_pair_constant", lambda o, v, e: (known * (1 + 1e-4),
                                                                np.full(2, 1e-12)))
    monkeypatch.setattr(rec, "_known_terms", lambda *a: known)
    oracle = _oracle(conformal_h, 8, flat_g)
    lower = conformal_h.christoffel_jet(np.array(Q), 1)
    with pytest.raises(NoiseFloorError):
        recover_higher(oracle, _probe(oracle), lower, g=flat_g, denominator=(1.0, 0.0))
