"""Newton solver for the harmonic-map Dirichlet problem near a constant map.

The unknown is the displacement ``w = u - q``. Working with ``w`` keeps the
tiny perturbations used by the ε-difference oracles free of cancellation
against the base point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .errors import (InvalidFieldError, NoConvergenceError, RangeEscapeError, SingularMetricError,
                     SolverFailureError)
from .geometry import MetricField, TargetMetric
from .grid import (GridDomain, assemble_laplace_beltrami, check_finite, discretize, gradient,
                   integrate_volume, normal_derivative_edges)

RANGE_FRACTION = 0.9
PRECONDITIONED_AMPLITUDE = 1e-2


@dataclass(frozen=True, eq=False)
class ForwardProblem:
    """Dirichlet problem ``u|∂ = q + f`` for a harmonic map into ``(R^n, h)``.

    ``boundary_data`` is the displacement ``f`` per boundary node, shape
    ``(n, 4 * n_cells)``; the map trace is ``q + f``.
    """

    g: MetricField
    h: TargetMetric
    grid: GridDomain
    q: tuple
    boundary_data: np.ndarray

    def __post_init__(self):
        q = tuple(float(c) for c in np.ravel(self.q))
        if len(q) != self.h.n:
            raise ValueError(f"base point must have {self.h.n} components")
        object.__setattr__(self, "q", q)
        f = np.asarray(self.boundary_data, dtype=float)
        if f.ndim == 0 or f.shape == ():
            f = np.full((self.h.n, self.grid.n_boundary), float(f))
        if f.shape != (self.h.n, self.grid.n_boundary):
            raise ValueError(f"boundary data must have shape {(self.h.n, self.grid.n_boundary)}, "
                             f"got {f.shape}")
        f = check_finite(f, "boundary data")
        f.setflags(write=False)
        object.__setattr__(self, "boundary_data", f)
        check_range(self, f)

    @property
    def n(self) -> int:
        return self.h.n

    @property
    def q_array(self) -> np.ndarray:
        return np.array(self.q)

    @property
    def amplitude(self) -> float:
        return float(np.abs(self.boundary_data).max()) if self.boundary_data.size else 0.0

    def with_boundary(self, f) -> "ForwardProblem":
        return ForwardProblem(self.g, self.h, self.grid, self.q, f)


def _guard(h: TargetMetric, q):
    center = np.asarray(h.domain_center if h.domain_center is not None else q, dtype=float)
    return center, RANGE_FRACTION * h.domain_radius


def check_range(problem: ForwardProblem, w: np.ndarray):
    """Raise if ``q + w`` leaves the ball where ``h`` may be evaluated."""
    if not math.isfinite(problem.h.domain_radius):
        return
    center, radius = _guard(problem.h, problem.q)
    y = problem.q_array.reshape((-1,) + (1,) * (w.ndim - 1)) + w
    dist = np.sqrt(((y - center.reshape((-1,) + (1,) * (w.ndim - 1))) ** 2).sum(axis=0))
    if np.any(dist > radius):
        raise RangeEscapeError(
            f"map leaves the ball of radius {radius:.4g} around {tuple(center)} "
            f"(max distance {dist.max():.4g})")


@dataclass(frozen=True)
class NewtonControls:
    tol: float = 1e-10
    max_iter: int = 30
    continuation_steps: int = 4
    polish: int = 2
    linear_rtol: float = 1e-13


@dataclass
class NewtonReport:
    iterations: int = 0
    residual: float = 0.0
    continuation_steps: int = 0
    converged: bool = False
    history: list = field(default_factory=list)
    linear_solver: str = ""

    def quadratic_constants(self, threshold: float = 1e-4, floor: float = 1e-11) -> list:
        """``r_{k+1} / r_k²`` for contracting steps with ``floor < r_k < threshold``.

        Pairs spanning a continuation stage boundary (where the residual
        jumps up) and pairs starting at round-off are skipped.
        """
        r = self.history
        return [r[k + 1] / r[k] ** 2 for k in range(len(r) - 1)
                if floor < r[k] < threshold and 0 < r[k + 1] < r[k]]

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "continuation_steps": self.continuation_steps, "converged": self.converged,
                "linear_solver": self.linear_solver}


@dataclass(eq=False)
class MapState:
    """A discrete map ``u = q + w`` with its boundary trace and conormal derivative."""

    q: np.ndarray
    displacement: np.ndarray         # (n, N, N)
    grid: GridDomain
    normal_derivative: np.ndarray    # (n, 4, N), per edge

    @property
    def values(self) -> np.ndarray:
        return self.q[:, None, None] + self.displacement

    @property
    def trace(self) -> np.ndarray:
        return self.grid.trace(self.values)


# ---------------------------------------------------------------------------
# residual and Jacobian


def _split(u, problem: ForwardProblem, displacement: bool):
    u = check_finite(u, "map")
    N = problem.grid.n_nodes
    if u.shape != (problem.n, N, N):
        raise InvalidFieldError(f"map must have shape {(problem.n, N, N)}, got {u.shape}")
    return u if displacement else u - problem.q_array[:, None, None]


def _tension_terms(w, problem: ForwardProblem):
    """Γ(q+w), its first derivative, ∂w and g^{-1} at every node."""
    check_range(problem, w)
    y = problem.q_array[:, None, None] + w
    gamma = problem.h.christoffel(y)                    # (n, n, n, N, N)
    grad = gradient(w, problem.grid)                    # (2, n, N, N)
    ginv = discretize(problem.g, problem.grid).ginv     # (2, 2, N, N)
    return y, gamma, grad, ginv


def residual(u, problem: ForwardProblem, displacement: bool = False) -> np.ndarray:
    """Tension field ``Δ_g u + g^{αβ} Γ(u) ∂_α u ∂_β u`` at interior nodes.

    Boundary entries of the returned full-grid array are zero. With
    ``displacement=True`` the input is ``w = u - q``.
    """
    w = _split(u, problem, displacement)
    op = assemble_laplace_beltrami(problem.g, problem.grid)
    _, gamma, grad, ginv = _tension_terms(w, problem)
    quad = np.einsum("abxy,ijkxy,ajxy,bkxy->ixy", ginv, gamma, grad, grad)
    out = op.apply(w) + quad
    out[:, 0, :] = out[:, -1, :] = 0.0
    out[:, :, 0] = out[:, :, -1] = 0.0
    return out


def jacobian_apply(u, w_dir, problem: ForwardProblem, displacement: bool = False) -> np.ndarray:
    """Directional derivative ``DR(u) w`` at interior nodes (full-grid array)."""
    w = _split(u, problem, displacement)
    d = check_finite(w_dir, "direction")
    op = assemble_laplace_beltrami(problem.g, problem.grid)
    y, gamma, grad, ginv = _tension_terms(w, problem)
    dgamma = problem.h.christoffel_derivative(y)         # (n, n, n, l, N, N)
    gd = gradient(d, problem.grid)
    out = op.apply(d)
    out += np.einsum("abxy,ijklxy,lxy,ajxy,bkxy->ixy", ginv, dgamma, d, grad, grad)
    out += 2.0 * np.einsum("abxy,ijkxy,ajxy,bkxy->ixy", ginv, gamma, gd, grad)
    out[:, 0, :] = out[:, -1, :] = 0.0
    out[:, :, 0] = out[:, :, -1] = 0.0
    return out


def _difference_matrices(grid: GridDomain):
    """Central-difference matrices on interior unknowns (boundary columns dropped)."""
    m = grid.n_cells - 1
    h = grid.spacing
    d1 = sparse.diags([-np.ones(m - 1), np.ones(m - 1)], [-1, 1]) / (2 * h)
    eye = sparse.identity(m)
    return sparse.kron(d1, eye, format="csr"), sparse.kron(eye, d1, format="csr")


def jacobian_matrix(w: np.ndarray, problem: ForwardProblem) -> sparse.csc_matrix:
    """Sparse Jacobian with respect to interior displacement, component-major ordering."""
    n = problem.n
    op = assemble_laplace_beltrami(problem.g, problem.grid)
    y, gamma, grad, ginv = _tension_terms(w, problem)
    dgamma = problem.h.christoffel_derivative(y)
    inner = (Ellipsis, slice(1, -1), slice(1, -1))
    # c[i, j, a] multiplies ∂_a w^j ; e[i, l] multiplies w^l
    c = 2.0 * np.einsum("abxy,ijkxy,bkxy->ijaxy", ginv, gamma, grad)[inner]
    e = np.einsum("abxy,ijklxy,ajxy,bkxy->ilxy", ginv, dgamma, grad, grad)[inner]
    D = _difference_matrices(problem.grid)
    blocks = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            blk = sparse.diags(e[i, j].ravel())
            for a in range(2):
                blk = blk + sparse.diags(c[i, j, a].ravel()) @ D[a]
            if i == j:
                blk = blk + op.interior
            blocks[i][j] = blk
    return sparse.bmat(blocks, format="csc")


# ---------------------------------------------------------------------------
# Newton with continuation


def _pack(w):
    return w[:, 1:-1, 1:-1].reshape(-1)


def _unpack_into(w, x):
    n, N = w.shape[0], w.shape[1]
    w[:, 1:-1, 1:-1] = x.reshape(n, N - 2, N - 2)


def _newton_step(w, r, problem: ForwardProblem, controls: NewtonControls, precondition: bool):
    n = problem.n
    op = assemble_laplace_beltrami(problem.g, problem.grid)
    J = jacobian_matrix(w, problem)
    b = -_pack(r)
    if precondition and op.method == "direct":
        m = op.n_interior

        def apply_lap_inv(v):
            return op.solve_interior(v.reshape(n, m)).reshape(-1)

        M = spla.LinearOperator(J.shape, apply_lap_inv)
        x, info = spla.gmres(J, b, rtol=controls.linear_rtol, atol=0.0, restart=60,
                             maxiter=20, M=M)
        if info == 0:
            return x, "gmres"
    try:
        return spla.splu(J, permc_spec="COLAMD").solve(b), "splu"
    except RuntimeError as exc:
        raise SolverFailureError(f"Jacobian factorisation failed: {exc}") from exc


def _iterate_residual(w, problem: ForwardProblem, report: NewtonReport):
    """Residual of a Newton iterate; metric breakdown along the way is a solver failure."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            return residual(w, problem, displacement=True)
    except (SingularMetricError, InvalidFieldError) as exc:
        raise NoConvergenceError(f"Newton iterate left the domain of the target metric: {exc}",
                                 report) from exc


def solve(problem: ForwardProblem, controls: NewtonControls | None = None,
          initial: np.ndarray | None = None):
    """Solve the Dirichlet problem by Newton iteration with amplitude continuation.

    Continuation scales the boundary displacement through ``s / steps`` for
    ``s = 1..steps`` starting from the constant map, so the returned solution
    lies on the branch through ``κ_q``. Data with amplitude at most
    ``PRECONDITIONED_AMPLITUDE`` is solved in one stage. After the residual tolerance is met,
    up to ``controls.polish`` further Newton steps are taken while they keep
    reducing the correction; the ε-difference oracles rely on this.

    Returns
    -------
    (MapState, NewtonReport)
    """
    controls = controls or NewtonControls()
    grid = problem.grid
    n, N = problem.n, grid.n_nodes
    f = problem.boundary_data
    report = NewtonReport()
    precondition = problem.amplitude <= PRECONDITIONED_AMPLITUDE
    report.linear_solver = "gmres" if precondition else "splu"
    w = np.zeros((n, N, N)) if initial is None else np.array(initial, dtype=float)
    # small data sits inside Newton's basin of κ_q; a single stage suffices
    steps = max(1, controls.continuation_steps) if not precondition else 1

    for s in range(1, steps + 1):
        boundary = grid.extend(f * (s / steps))
        w = np.where(grid.interior_mask, w, boundary)
        final = s == steps
        r = _iterate_residual(w, problem, report)
        rnorm = float(np.abs(r).max())
        report.history.append(rnorm)
        polish_left = controls.polish if final else 0
        last_step = math.inf
        while True:
            if rnorm <= controls.tol:
                if polish_left <= 0 or rnorm == 0.0:
                    break
                polish_left -= 1
            if report.iterations >= controls.max_iter:
                report.residual = rnorm
                report.continuation_steps = s
                raise NoConvergenceError(
                    f"Newton did not converge in {controls.max_iter} iterations "
                    f"(residual {rnorm:.3e}, continuation step {s}/{steps})", report)
            dx, used = _newton_step(w, r, problem, controls, precondition)
            if used == "splu":
                report.linear_solver = "splu"
            step = float(np.abs(dx).max())
            trial = w.copy()
            _unpack_into(trial, _pack(w) + dx)
            r_trial = _iterate_residual(trial, problem, report)
            rn_trial = float(np.abs(r_trial).max())
            if rnorm <= controls.tol and (rn_trial > rnorm or step >= last_step):
                break   # polishing stalled at round-off
            w, r, rnorm = trial, r_trial, rn_trial
            last_step = step
            report.iterations += 1
            report.history.append(rnorm)
            if not np.isfinite(rnorm):
                raise NoConvergenceError("Newton iterate became non-finite", report)
        report.continuation_steps = s

    report.residual = rnorm
    report.converged = rnorm <= controls.tol
    nd = normal_derivative_edges(w, problem.g, grid)
    return MapState(problem.q_array, w, grid, nd), report


def dirichlet_energy(u, problem: ForwardProblem, displacement: bool = False) -> float:
    """``½ ∫ g^{αβ} h_ij(u) ∂_α u^i ∂_β u^j dV_g`` by the trapezoid rule."""
    w = _split(u, problem, displacement)
    y = problem.q_array[:, None, None] + w
    hm = problem.h.metric(y)
    grad = gradient(w, problem.grid)
    ginv = discretize(problem.g, problem.grid).ginv
    density = np.einsum("abxy,ijxy,aixy,bjxy->xy", ginv, hm, grad, grad)
    return 0.5 * float(integrate_volume(density, problem.g, problem.grid))
