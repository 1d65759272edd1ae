"""Domain and target metrics, Christoffel symbols and their jets.

Index conventions used throughout the package: a Christoffel tensor is
stored as ``gamma[i, j, k] = Γ^i_{jk}``; its m-th derivative jet as an
array of shape ``(n, n, n) + (n,) * m`` with the differentiation indices
trailing. Metric derivative jets follow the same pattern with shape
``(n, n) + (n,) * m``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp

from .errors import OrderExceededError, SingularMetricError
from .expr import parse_metric_expression

DET_TOL = 1e-12
DOMAIN_VARIABLES = ("x", "y")


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------------------
# domain metric


@dataclass(frozen=True, eq=False)
class MetricField:
    """Symmetric 2x2 metric on the unit square, as functions of ``(x, y)``.

    ``entries`` holds the three independent coefficients ``(g11, g12, g22)``.
    Each is a callable accepting broadcastable arrays.
    """

    entries: tuple
    provenance: str = "builtin-family"
    description: dict = field(default_factory=dict)
    dim: int = 2

    def __post_init__(self):
        if self.provenance not in ("builtin-family", "parsed-expression"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if len(self.entries) != 3:
            raise ValueError("a domain metric needs exactly (g11, g12, g22)")

    def evaluate(self, x, y) -> np.ndarray:
        """Return ``g`` with shape ``(2, 2) + broadcast(x, y).shape``."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        g11, g12, g22 = (np.broadcast_to(np.asarray(e(x, y), dtype=float), shape)
                         for e in self.entries)
        return np.array([[g11, g12], [g12, g22]])

    def check_positive(self, x, y, tol: float = DET_TOL):
        g = self.evaluate(x, y)
        det = g[0, 0] * g[1, 1] - g[0, 1] ** 2
        if not (np.all(np.isfinite(g)) and np.all(g[0, 0] > 0) and np.all(det > tol)):
            raise SingularMetricError(
                f"domain metric is not positive definite (min det {np.nanmin(det):.3e})")
        return g

    # builtin families -----------------------------------------------------

    @classmethod
    def euclidean(cls):
        one = lambda x, y: np.ones(np.broadcast(x, y).shape)
        zero = lambda x, y: np.zeros(np.broadcast(x, y).shape)
        return cls((one, zero, one), description={"family": "euclidean"})

    @classmethod
    def constant(cls, g11: float, g12: float, g22: float):
        def const(v):
            return lambda x, y: np.full(np.broadcast(x, y).shape, float(v))
        return cls((const(g11), const(g12), const(g22)),
                   description={"family": "constant", "g11": g11, "g12": g12, "g22": g22})

    @classmethod
    def from_expressions(cls, g11: str, g12: str, g22: str):
        exprs = tuple(parse_metric_expression(s, DOMAIN_VARIABLES) for s in (g11, g12, g22))
        return cls(exprs, provenance="parsed-expression",
                   description={"family": "expressions", "entries": [g11, g12, g22]})

    def scaled(self, factor: Callable, description: dict | None = None):
        """The conformally rescaled metric ``factor * g``."""
        g11, g12, g22 = self.entries
        entries = tuple((lambda e: (lambda x, y: factor(x, y) * e(x, y)))(e)
                        for e in (g11, g12, g22))
        desc = {"family": "conformal-rescaling", "base": self.description}
        if description:
            desc.update(description)
        return MetricField(entries, self.provenance, desc)


@dataclass(frozen=True, eq=False)
class ConformalTestCase:
    """A base domain metric together with a conformal factor equal to 1 on the boundary."""

    base: MetricField
    factor: Callable
    description: dict = field(default_factory=dict)

    @classmethod
    def bubble(cls, base: MetricField | None = None, amplitude: float = 0.5):
        """``c = 1 + amplitude * 16 x(1-x) y(1-y)``, exactly 1 on all four edges."""
        if amplitude <= -1:
            raise ValueError("bubble amplitude must exceed -1 to keep c positive")
        base = base or MetricField.euclidean()

        def c(x, y):
            return 1.0 + amplitude * 16.0 * x * (1.0 - x) * y * (1.0 - y)

        return cls(base, c, {"factor": "bubble", "amplitude": amplitude})

    @classmethod
    def from_expression(cls, source: str, base: MetricField | None = None):
        expr = parse_metric_expression(source, DOMAIN_VARIABLES)
        return cls(base or MetricField.euclidean(), expr, {"factor": source})

    def metric(self) -> MetricField:
        return self.base.scaled(self.factor, {"factor": self.description})


# ---------------------------------------------------------------------------
# target metric


def target_symbols(n: int):
    return tuple(sp.Symbol(f"y{i + 1}", real=True) for i in range(n))


def _vector_function(exprs, syms):
    fn = sp.lambdify(syms, list(exprs), modules="numpy", cse=True)

    def call(y):
        y = np.asarray(y, dtype=float)
        out = fn(*y)
        shape = y.shape[1:]
        return np.stack([np.broadcast_to(np.asarray(o, dtype=float), shape) for o in out])

    return call


def _multi_indices(n, m):
    return list(itertools.combinations_with_replacement(range(n), m))


def _full_index_map(n, m):
    """For each full index tuple in range(n)^m, its position in the sorted list."""
    combos = {c: p for p, c in enumerate(_multi_indices(n, m))}
    table = np.empty((n,) * m, dtype=int)
    for full in itertools.product(range(n), repeat=m):
        table[full] = combos[tuple(sorted(full))]
    return table


@dataclass(frozen=True, eq=False)
class TargetMetric:
    """Riemannian metric ``h`` on a domain of R^n with analytic derivatives.

    The metric entries are sympy expressions in ``y1 .. yn``. Christoffel
    symbols and all their derivatives are formed symbolically and compiled
    lazily, one derivative order at a time.
    """

    n: int
    matrix: sp.Matrix
    max_jet_order: int = 5
    description: dict = field(default_factory=dict)
    domain_center: tuple | None = None
    domain_radius: float = math.inf
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 1 <= self.n <= 3:
            raise ValueError("target dimension must be between 1 and 3")
        m = sp.Matrix(self.matrix)
        if m.shape != (self.n, self.n):
            raise ValueError(f"metric matrix must be {self.n}x{self.n}")
        if any(sp.simplify(m[i, j] - m[j, i]) != 0
               for i in range(self.n) for j in range(i + 1, self.n)):
            raise ValueError("target metric must be symmetric")
        object.__setattr__(self, "matrix", m)

    @property
    def symbols(self):
        return target_symbols(self.n)

    # symbolic pieces ------------------------------------------------------

    def _gamma_exprs(self):
        if "gamma" not in self._cache:
            h, ys, n = self.matrix, self.symbols, self.n
            det = h.det()
            hinv = h.adjugate() / det
            dh = [[[sp.diff(h[a, b], ys[c]) for c in range(n)] for b in range(n)] for a in range(n)]
            gamma = {}
            for i, j, k in itertools.product(range(n), repeat=3):
                if k < j:
                    continue
                gamma[i, j, k] = sum(
                    hinv[i, l] * (dh[l][k][j] + dh[l][j][k] - dh[j][k][l]) for l in range(n)) / 2
            self._cache["gamma"] = gamma
        return self._cache["gamma"]

    def _jet_function(self, m):
        key = ("gamma_jet", m)
        if key not in self._cache:
            gamma, ys, n = self._gamma_exprs(), self.symbols, self.n
            lower = [(j, k) for j in range(n) for k in range(j, n)]
            exprs = []
            for i in range(n):
                for j, k in lower:
                    base = gamma[i, j, k]
                    for a in _multi_indices(n, m):
                        exprs.append(sp.diff(base, *[ys[c] for c in a]) if m else base)
            self._cache[key] = (_vector_function(exprs, ys), lower)
        return self._cache[key]

    def _metric_function(self, m):
        key = ("metric_jet", m)
        if key not in self._cache:
            ys, n = self.symbols, self.n
            exprs = []
            for i in range(n):
                for j in range(n):
                    for a in _multi_indices(n, m):
                        e = self.matrix[i, j]
                        exprs.append(sp.diff(e, *[ys[c] for c in a]) if m else e)
            self._cache[key] = _vector_function(exprs, ys)
        return self._cache[key]

    # numeric evaluation ---------------------------------------------------

    def _points(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.n:
            raise ValueError(f"points must have leading dimension {self.n}")
        return y

    def metric(self, y) -> np.ndarray:
        """``h_{ij}(y)`` with shape ``(n, n) + y.shape[1:]``."""
        y = self._points(y)
        return self._metric_function(0)(y).reshape((self.n, self.n) + y.shape[1:])

    def metric_jet(self, y, order: int) -> list:
        """Analytic derivatives ``[h, ∂h, ..., ∂^order h]`` at the points ``y``."""
        y = self._points(y)
        if order > self.max_jet_order:
            raise OrderExceededError(f"metric jet order {order} exceeds {self.max_jet_order}")
        out = []
        for m in range(order + 1):
            flat = self._metric_function(m)(y)
            ncomb = len(_multi_indices(self.n, m))
            flat = flat.reshape((self.n, self.n, ncomb) + y.shape[1:])
            idx = _full_index_map(self.n, m)
            out.append(flat[:, :, idx])
        return out

    def check_positive(self, y, tol: float = DET_TOL):
        h = self.metric(y)
        hm = np.moveaxis(h, (0, 1), (-2, -1))
        det = np.linalg.det(hm)
        if not np.all(np.isfinite(det)) or np.any(det <= tol):
            raise SingularMetricError(
                f"target metric is singular or indefinite (min det {np.nanmin(det):.3e})")
        if np.any(np.linalg.eigvalsh(hm)[..., 0] <= 0):
            raise SingularMetricError("target metric is not positive definite")
        return h

    def _gamma_derivative(self, y, m):
        n = self.n
        fn, lower = self._jet_function(m)
        ncomb = len(_multi_indices(n, m))
        flat = fn(y).reshape((n, len(lower), ncomb) + y.shape[1:])
        out = np.empty((n, n, n, ncomb) + y.shape[1:])
        for p, (j, k) in enumerate(lower):
            out[:, j, k] = flat[:, p]
            out[:, k, j] = flat[:, p]
        idx = _full_index_map(n, m)
        return out[:, :, :, idx]

    def christoffel(self, y) -> np.ndarray:
        """``Γ^i_{jk}(y)`` with shape ``(n, n, n) + y.shape[1:]``."""
        y = self._points(y)
        self.check_positive(y)
        return self._gamma_derivative(y, 0)

    def christoffel_derivative(self, y) -> np.ndarray:
        """``∂_l Γ^i_{jk}(y)`` stored as ``[i, j, k, l, ...]``."""
        y = self._points(y)
        return self._gamma_derivative(y, 1)

    def christoffel_jet(self, y, order: int) -> list:
        """``[Γ, ∂Γ, ..., ∂^order Γ]`` evaluated at the single point ``y``."""
        if order > self.max_jet_order - 1:
            raise OrderExceededError(
                f"Christoffel jet order {order} exceeds {self.max_jet_order - 1}")
        y = self._points(y)
        if y.ndim != 1:
            raise ValueError("christoffel_jet expects a single point")
        jet = [self.christoffel(y)]
        for m in range(1, order + 1):
            jet.append(self._gamma_derivative(y, m))
        return jet

    # families -------------------------------------------------------------

    @classmethod
    def from_expressions(cls, entries: Sequence[Sequence[str]], **kwargs):
        n = len(entries)
        names = tuple(s.name for s in target_symbols(n))
        syms = dict(zip(names, target_symbols(n)))
        parsed = [[parse_metric_expression(e, names) for e in row] for row in entries]
        matrix = sp.Matrix(n, n, lambda i, j: parsed[i][j].to_sympy(syms))
        desc = {"family": "expressions", "entries": [list(r) for r in entries]}
        return cls(n, matrix, description=desc, **kwargs)

    @classmethod
    def euclidean(cls, n: int, **kwargs):
        return cls(n, sp.eye(n), description={"family": "euclidean", "n": n}, **kwargs)

    @classmethod
    def conformal(cls, n: int, phi: str, **kwargs):
        """``h = exp(2 φ) δ`` for a scalar expression φ in ``y1 .. yn``."""
        names = tuple(s.name for s in target_symbols(n))
        expr = parse_metric_expression(phi, names)
        phi_sym = expr.to_sympy(dict(zip(names, target_symbols(n))))
        matrix = sp.exp(2 * phi_sym) * sp.eye(n)
        return cls(n, matrix, description={"family": "conformal", "n": n, "phi": phi}, **kwargs)

    @classmethod
    def polynomial_perturbation(cls, n: int, amplitude: float, entries, **kwargs):
        """``h = δ + amplitude · P(y)`` with ``P`` given as symmetric expression strings."""
        names = tuple(s.name for s in target_symbols(n))
        syms = dict(zip(names, target_symbols(n)))
        P = sp.Matrix(n, n, lambda i, j: parse_metric_expression(entries[i][j], names).to_sympy(syms))
        matrix = sp.eye(n) + sp.Float(amplitude) * P
        desc = {"family": "polynomial-perturbation", "n": n, "amplitude": amplitude,
                "P": [list(r) for r in entries]}
        return cls(n, matrix, description=desc, **kwargs)

    def perturbed(self, amplitude: float, entries, label: str = "perturbed"):
        """``h + amplitude · P`` for symmetric expression strings ``P``."""
        names = tuple(s.name for s in self.symbols)
        syms = dict(zip(names, self.symbols))
        P = sp.Matrix(self.n, self.n,
                      lambda i, j: parse_metric_expression(entries[i][j], names).to_sympy(syms))
        desc = {"family": label, "base": self.description, "amplitude": amplitude,
                "P": [list(r) for r in entries]}
        return TargetMetric(self.n, self.matrix + sp.Float(amplitude) * P, self.max_jet_order,
                            desc, self.domain_center, self.domain_radius)


# ---------------------------------------------------------------------------
# jets


def christoffel(h: TargetMetric, y) -> np.ndarray:
    return h.christoffel(y)


def christoffel_jet(h: TargetMetric, y, order: int) -> list:
    return h.christoffel_jet(y, order)


def metric_jet_from_christoffel_jet(h_at_q, gamma_jet: Sequence[np.ndarray]) -> list:
    """Derivatives ``[h, ∂h, ..., ∂^{K+1} h]`` at q from ``h(q)`` and ``[Γ, ..., ∂^K Γ]``.

    Repeatedly differentiates ``∂_l h_ij = h_rj Γ^r_il + h_ir Γ^r_lj`` with
    the Leibniz rule. Outputs are symmetrised over (i, j) and over the
    differentiation indices; for exact input this changes nothing.
    """
    h0 = np.asarray(h_at_q, dtype=float)
    n = h0.shape[0]
    if h0.shape != (n, n) or not np.allclose(h0, h0.T, rtol=0, atol=1e-14 * max(1, np.abs(h0).max())):
        raise ValueError("h(q) must be a symmetric square matrix")
    if np.any(np.linalg.eigvalsh(h0) <= 0):
        raise SingularMetricError("h(q) must be positive definite")
    gamma_jet = [np.asarray(g, dtype=float) for g in gamma_jet]
    for m, g in enumerate(gamma_jet):
        if g.shape != (n, n, n) + (n,) * m:
            raise ValueError(f"Christoffel jet of order {m} has shape {g.shape}")

    jet = [h0]
    K = len(gamma_jet) - 1
    for order in range(1, K + 2):
        out = np.zeros((n, n) + (n,) * order)
        # out[i, j, A..., l] = ∂_A (h_rj Γ^r_il + h_ir Γ^r_lj)
        for full in itertools.product(range(n), repeat=order):
            A, l = full[:-1], full[-1]
            total = np.zeros((n, n))
            for mask in itertools.product((0, 1), repeat=len(A)):
                B = tuple(a for a, s in zip(A, mask) if s)
                C = tuple(a for a, s in zip(A, mask) if not s)
                dh = jet[len(B)][(slice(None), slice(None)) + B]
                dg = gamma_jet[len(C)][(slice(None), slice(None), slice(None)) + C]
                # h_rj Γ^r_il  and  h_ir Γ^r_lj
                total += np.einsum("rj,ri->ij", dh, dg[:, :, l])
                total += np.einsum("ir,rj->ij", dh, dg[:, l, :])
            out[(slice(None), slice(None)) + full] = total
        out = 0.5 * (out + np.swapaxes(out, 0, 1))
        if order > 1:
            perms = list(itertools.permutations(range(2, 2 + order)))
            out = sum(np.transpose(out, (0, 1) + p) for p in perms) / len(perms)
        jet.append(out)
    return jet
