"""Uniform grid on the unit square and the discrete Laplace–Beltrami machinery.

Fields live on nodes and are indexed ``u[..., i, j]`` with ``x = i/n`` and
``y = j/n``. Boundary quantities are kept per edge, as arrays of shape
``(..., 4, n + 1)`` in the edge order of :data:`EDGES`; each edge is
parametrised by increasing coordinate, so corners appear on two edges.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .errors import InvalidFieldError, SingularMetricError, SolverFailureError
from .geometry import DET_TOL, MetricField

EDGES = ("left", "right", "bottom", "top")
# Euclidean outward unit normal covector of each edge
EDGE_NORMALS = {"left": (-1.0, 0.0), "right": (1.0, 0.0),
                "bottom": (0.0, -1.0), "top": (0.0, 1.0)}
KRYLOV_THRESHOLD = 512


@dataclass(frozen=True)
class GridDomain:
    n_cells: int

    def __post_init__(self):
        if self.n_cells < 2:
            raise ValueError("need at least two cells per axis")

    @property
    def spacing(self) -> float:
        return 1.0 / self.n_cells

    @property
    def n_nodes(self) -> int:
        return self.n_cells + 1

    @functools.cached_property
    def coords(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_nodes)

    @functools.cached_property
    def mesh(self):
        return np.meshgrid(self.coords, self.coords, indexing="ij")

    @functools.cached_property
    def interior_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_nodes, self.n_nodes), dtype=bool)
        mask[1:-1, 1:-1] = True
        return mask

    @functools.cached_property
    def boundary_nodes(self):
        """``(i, j, tag)`` arrays for every boundary node; corners belong to bottom/top."""
        n = self.n_cells
        full = np.arange(n + 1)
        inner = np.arange(1, n)
        i = np.concatenate([full, full, np.zeros(n - 1, int), np.full(n - 1, n)])
        j = np.concatenate([np.zeros(n + 1, int), np.full(n + 1, n), inner, inner])
        tags = np.array(["bottom"] * (n + 1) + ["top"] * (n + 1)
                        + ["left"] * (n - 1) + ["right"] * (n - 1))
        return i, j, tags

    @property
    def n_boundary(self) -> int:
        return 4 * self.n_cells

    def boundary_coords(self):
        i, j, _ = self.boundary_nodes
        return self.coords[i], self.coords[j]

    def edge_coords(self):
        """Node coordinates along each edge, shape ``(2, 4, n + 1)``."""
        t = self.coords
        zeros, ones = np.zeros_like(t), np.ones_like(t)
        x = np.stack([zeros, ones, t, t])
        y = np.stack([t, t, zeros, ones])
        return np.stack([x, y])

    # conversions ----------------------------------------------------------

    def trace(self, field: np.ndarray) -> np.ndarray:
        """Per-boundary-node values of a full-grid field, shape ``(..., 4n)``."""
        i, j, _ = self.boundary_nodes
        return field[..., i, j]

    def edge_trace(self, field: np.ndarray) -> np.ndarray:
        """Per-edge values of a full-grid field, shape ``(..., 4, n + 1)``."""
        return np.stack([field[..., 0, :], field[..., -1, :],
                         field[..., :, 0], field[..., :, -1]], axis=-2)

    def boundary_to_edges(self, values: np.ndarray) -> np.ndarray:
        """Expand per-boundary-node values to per-edge arrays."""
        full = self.extend(values)
        return self.edge_trace(full)

    def extend(self, values: np.ndarray, interior: np.ndarray | float = 0.0) -> np.ndarray:
        """Full-grid field with the given boundary values and constant interior."""
        values = np.asarray(values, dtype=float)
        lead = values.shape[:-1]
        full = np.empty(lead + (self.n_nodes, self.n_nodes))
        full[...] = np.asarray(interior)[..., None, None] if np.ndim(interior) else interior
        i, j, _ = self.boundary_nodes
        full[..., i, j] = values
        return full

    def sample_boundary(self, func) -> np.ndarray:
        """Evaluate ``func(x, y)`` on the boundary nodes."""
        x, y = self.boundary_coords()
        return np.asarray(func(x, y), dtype=float)

    def sample(self, func) -> np.ndarray:
        X, Y = self.mesh
        return np.broadcast_to(np.asarray(func(X, Y), dtype=float), X.shape).copy()


def check_finite(field: np.ndarray, name: str = "field") -> np.ndarray:
    field = np.asarray(field, dtype=float)
    if not np.all(np.isfinite(field)):
        raise InvalidFieldError(f"{name} contains NaN or Inf")
    return field


def trapezoid_weights(grid: GridDomain) -> np.ndarray:
    w = np.full(grid.n_nodes, grid.spacing)
    w[0] = w[-1] = 0.5 * grid.spacing
    return w


# ---------------------------------------------------------------------------
# metric on the grid


@dataclass(frozen=True, eq=False)
class DiscreteMetric:
    """A domain metric sampled on grid nodes, with derived quantities."""

    grid: GridDomain
    g: np.ndarray          # (2, 2, N, N)
    ginv: np.ndarray       # (2, 2, N, N)
    sqrt_det: np.ndarray   # (N, N)

    @property
    def flux_coefficient(self) -> np.ndarray:
        """``sqrt|g| g^{αβ}``, the coefficient inside the divergence."""
        return self.sqrt_det * self.ginv


@functools.lru_cache(maxsize=32)
def discretize(g: MetricField, grid: GridDomain) -> DiscreteMetric:
    X, Y = grid.mesh
    gm = g.check_positive(X, Y)
    det = gm[0, 0] * gm[1, 1] - gm[0, 1] ** 2
    ginv = np.array([[gm[1, 1], -gm[0, 1]], [-gm[0, 1], gm[0, 0]]]) / det
    return DiscreteMetric(grid, gm, ginv, np.sqrt(det))


@dataclass(frozen=True, eq=False)
class BoundaryGeometry:
    """Everything about ``g`` that boundary-only computations may use.

    ``weights`` are trapezoid weights times the induced line element,
    ``conormal`` the coefficients ``g^{αβ} ν_β / |ν|_{g^{-1}}`` per edge node.
    """

    grid: GridDomain
    weights: np.ndarray     # (4, N)
    conormal: np.ndarray    # (2, 4, N)


@functools.lru_cache(maxsize=32)
def boundary_geometry(g: MetricField, grid: GridDomain) -> BoundaryGeometry:
    ex, ey = grid.edge_coords()
    gb = g.evaluate(ex, ey)                       # (2, 2, 4, N)
    det = gb[0, 0] * gb[1, 1] - gb[0, 1] ** 2
    if not (np.all(np.isfinite(gb)) and np.all(det > DET_TOL) and np.all(gb[0, 0] > 0)):
        raise SingularMetricError("domain metric is singular on the boundary")
    ginv = np.array([[gb[1, 1], -gb[0, 1]], [-gb[0, 1], gb[0, 0]]]) / det
    nu = np.array([EDGE_NORMALS[e] for e in EDGES]).T[:, :, None]   # (2, 4, 1)
    gnu = np.einsum("abeN,beN->aeN", ginv, np.broadcast_to(nu, (2, 4, grid.n_nodes)))
    norm = np.sqrt(np.einsum("aeN,aeN->eN", gnu, np.broadcast_to(nu, gnu.shape)))
    conormal = gnu / norm
    # tangent direction of left/right edges is y, of bottom/top is x
    g_tt = np.stack([gb[1, 1, 0], gb[1, 1, 1], gb[0, 0, 2], gb[0, 0, 3]])
    weights = trapezoid_weights(grid)[None, :] * np.sqrt(g_tt)
    return BoundaryGeometry(grid, weights, conormal)


# ---------------------------------------------------------------------------
# differential operators


def gradient(field: np.ndarray, grid: GridDomain) -> np.ndarray:
    """Nodal gradient ``(∂_x, ∂_y)`` stacked on a new leading axis.

    Central differences in the interior, second-order one-sided differences
    on the boundary.
    """
    field = np.asarray(field, dtype=float)
    h = grid.spacing
    gx, gy = np.gradient(field, h, h, axis=(-2, -1), edge_order=2)
    return np.stack([gx, gy])


# one-sided first-derivative weights at the end node, by order of accuracy
ONE_SIDED = {2: np.array([-1.5, 2.0, -0.5]),
             3: np.array([-11.0, 18.0, -9.0, 2.0]) / 6.0}


def edge_gradient(field: np.ndarray, grid: GridDomain, order: int = 3) -> np.ndarray:
    """Gradient on every edge, shape ``(2, ..., 4, N)``.

    The derivative across an edge uses a one-sided stencil of the given
    order; the derivative along it is the nodal gradient restricted there.
    """
    if order not in ONE_SIDED:
        raise ValueError(f"one-sided order must be one of {sorted(ONE_SIDED)}")
    field = np.asarray(field, dtype=float)
    grad = grid.edge_trace(gradient(field, grid))
    w = ONE_SIDED[order]
    k = len(w)
    h = grid.spacing
    ax = np.tensordot(field[..., :k, :], w, axes=([-2], [0])) / h          # x = 0, inward
    bx = -np.tensordot(field[..., ::-1, :][..., :k, :], w, axes=([-2], [0])) / h
    ay = np.tensordot(field[..., :, :k], w, axes=([-1], [0])) / h
    by = -np.tensordot(field[..., :, ::-1][..., :, :k], w, axes=([-1], [0])) / h
    grad[0, ..., 0, :] = ax
    grad[0, ..., 1, :] = bx
    grad[1, ..., 2, :] = ay
    grad[1, ..., 3, :] = by
    return grad


def normal_derivative_edges(field: np.ndarray, g: MetricField, grid: GridDomain,
                            order: int = 3) -> np.ndarray:
    """Outward g-unit conormal derivative on every edge, shape ``(..., 4, N)``."""
    geo = boundary_geometry(g, grid)
    grad_edges = edge_gradient(field, grid, order)
    return np.einsum("a...eN,aeN->...eN", grad_edges, geo.conormal)


def normal_derivative(field: np.ndarray, g: MetricField, grid: GridDomain,
                      order: int = 3) -> np.ndarray:
    """Conormal derivative per boundary node, shape ``(..., 4n)``; corners use bottom/top."""
    edges = normal_derivative_edges(field, g, grid, order)
    n = grid.n_cells
    inner = slice(1, n)
    return np.concatenate([edges[..., 2, :], edges[..., 3, :],
                           edges[..., 0, inner], edges[..., 1, inner]], axis=-1)


def integrate_volume(field: np.ndarray, g: MetricField, grid: GridDomain) -> np.ndarray:
    """Trapezoid approximation of ``∫ field dV_g`` over the trailing two axes."""
    dm = discretize(g, grid)
    w = trapezoid_weights(grid)
    return np.einsum("...ij,i,j->...", np.asarray(field, dtype=float) * dm.sqrt_det, w, w)


def integrate_boundary(edge_values: np.ndarray, g: MetricField | BoundaryGeometry,
                       grid: GridDomain) -> np.ndarray:
    """Trapezoid approximation of ``∫ F dS_g`` for per-edge values ``(..., 4, N)``."""
    geo = g if isinstance(g, BoundaryGeometry) else boundary_geometry(g, grid)
    return np.einsum("...eN,eN->...", np.asarray(edge_values, dtype=float), geo.weights)


def lumped_nodal(edge_values: np.ndarray, geo: BoundaryGeometry) -> np.ndarray:
    """Per-boundary-node values whose trapezoid pairings equal those of ``edge_values``.

    Away from corners this is a plain restriction. At a corner the two
    incident edge values are averaged with their quadrature weights.
    """
    grid = geo.grid
    n = grid.n_cells
    weighted = np.asarray(edge_values) * geo.weights
    nodal = np.zeros(weighted.shape[:-2] + (n + 1, n + 1))
    wsum = np.zeros((n + 1, n + 1))
    for e, (sl_i, sl_j) in enumerate(((0, slice(None)), (n, slice(None)),
                                      (slice(None), 0), (slice(None), n))):
        nodal[..., sl_i, sl_j] += weighted[..., e, :]
        wsum[sl_i, sl_j] += geo.weights[e]
    return grid.trace(nodal) / grid.trace(wsum)


def nodal_weights(geo: BoundaryGeometry) -> np.ndarray:
    """Total boundary quadrature weight carried by each boundary node."""
    grid = geo.grid
    n = grid.n_cells
    wsum = np.zeros((n + 1, n + 1))
    for e, (sl_i, sl_j) in enumerate(((0, slice(None)), (n, slice(None)),
                                      (slice(None), 0), (slice(None), n))):
        wsum[sl_i, sl_j] += geo.weights[e]
    return grid.trace(wsum)


# ---------------------------------------------------------------------------
# assembled Laplace–Beltrami operator


def _node_index(grid: GridDomain):
    N = grid.n_nodes
    return np.arange(N * N).reshape(N, N)


@dataclass(eq=False)
class AssembledOperator:
    """Discrete ``Δ_g`` in divergence form with Dirichlet elimination.

    ``matrix`` maps all nodal values to the interior rows; ``interior`` and
    ``coupling`` are its interior/boundary column blocks. The interior block
    is factorised once, on first use, and reused for every right-hand side.
    """

    grid: GridDomain
    metric: DiscreteMetric
    matrix: sparse.csr_matrix
    interior: sparse.csc_matrix
    coupling: sparse.csr_matrix
    method: str = "direct"
    _lu: object = field(default=None, repr=False)

    @property
    def n_interior(self) -> int:
        return self.interior.shape[0]

    def apply(self, u: np.ndarray) -> np.ndarray:
        """``Δ_g u`` at interior nodes as a full-grid array (zero on the boundary)."""
        u = np.asarray(u, dtype=float)
        lead = u.shape[:-2]
        N = self.grid.n_nodes
        flat = u.reshape(-1, N * N)
        out = np.zeros(flat.shape[:1] + (N, N))
        vals = (self.matrix @ flat.T).T
        out[:, 1:-1, 1:-1] = vals.reshape(-1, N - 2, N - 2)
        return out.reshape(lead + (N, N))

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.interior, permc_spec="COLAMD")
        return self._lu

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``A x = rhs`` on interior unknowns; ``rhs`` has shape ``(..., n_int)``."""
        rhs = np.asarray(rhs, dtype=float)
        lead = rhs.shape[:-1]
        flat = rhs.reshape(-1, rhs.shape[-1])
        if self.method == "direct":
            sol = self.lu.solve(np.ascontiguousarray(flat.T)).T
        else:
            sol = np.empty_like(flat)
            for r, b in enumerate(flat):
                x, info = spla.gmres(self.interior, b, rtol=1e-12, atol=0.0,
                                     restart=200, maxiter=50, M=self._ilu_preconditioner())
                if info != 0:
                    raise SolverFailureError(f"Krylov solve did not converge (info={info})")
                sol[r] = x
        return sol.reshape(lead + (rhs.shape[-1],))

    def _ilu_preconditioner(self):
        if self._lu is None:
            ilu = spla.spilu(self.interior, drop_tol=1e-5, fill_factor=20)
            self._lu = ilu
        return spla.LinearOperator(self.interior.shape, self._lu.solve)

    def solve(self, source: np.ndarray, boundary: np.ndarray | float = 0.0) -> np.ndarray:
        """Full-grid ``v`` with ``Δ_g v = source`` inside and ``v = boundary`` on ∂.

        ``source`` is a full-grid array ``(..., N, N)`` (boundary entries are
        ignored); ``boundary`` holds per-boundary-node values ``(..., 4n)``.
        """
        source = np.asarray(source, dtype=float)
        lead = source.shape[:-2]
        N = self.grid.n_nodes
        bvals = np.broadcast_to(np.asarray(boundary, dtype=float), lead + (self.grid.n_boundary,))
        full_b = self.grid.extend(bvals)
        flat_b = full_b.reshape(-1, N * N)
        rhs = source[..., 1:-1, 1:-1].reshape(-1, self.n_interior) - (self.matrix @ flat_b.T).T
        sol = self.solve_interior(rhs)
        out = full_b.reshape(-1, N, N).copy()
        out[:, 1:-1, 1:-1] = sol.reshape(-1, N - 2, N - 2)
        return out.reshape(lead + (N, N))


def _assemble(dm: DiscreteMetric) -> sparse.csr_matrix:
    grid = dm.grid
    N = grid.n_nodes
    h = grid.spacing
    idx = _node_index(grid)
    A = dm.flux_coefficient                                   # (2, 2, N, N)
    Ax = 0.5 * (A[:, :, 1:, :] + A[:, :, :-1, :])             # at (i+1/2, j)
    Ay = 0.5 * (A[:, :, :, 1:] + A[:, :, :, :-1])             # at (i, j+1/2)
    I, J = np.meshgrid(np.arange(1, N - 1), np.arange(1, N - 1), indexing="ij")
    row = (I - 1) * (N - 2) + (J - 1)
    inv_w = 1.0 / (dm.sqrt_det[I, J] * h * h)
    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(np.broadcast_to(v, r.shape).ravel())

    for s in (+1, -1):
        # x-fluxes through i + s/2
        ih = I if s > 0 else I - 1               # index into Ax of the half node
        a11 = Ax[0, 0, ih, J]
        a12 = Ax[0, 1, ih, J]
        add(row, idx[I + s, J], s * s * a11 * inv_w)
        add(row, idx[I, J], -a11 * inv_w)
        # cross term: ∂_y u averaged over the two nodes of the half edge
        c = s * a12 * inv_w / 4.0
        add(row, idx[I, J + 1], c)
        add(row, idx[I, J - 1], -c)
        add(row, idx[I + s, J + 1], c)
        add(row, idx[I + s, J - 1], -c)
        # y-fluxes through j + s/2
        jh = J if s > 0 else J - 1
        b22 = Ay[1, 1, I, jh]
        b21 = Ay[1, 0, I, jh]
        add(row, idx[I, J + s], b22 * inv_w)
        add(row, idx[I, J], -b22 * inv_w)
        c = s * b21 * inv_w / 4.0
        add(row, idx[I + 1, J], c)
        add(row, idx[I - 1, J], -c)
        add(row, idx[I + 1, J + s], c)
        add(row, idx[I - 1, J + s], -c)
    m = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=((N - 2) ** 2, N * N))
    return m.tocsr()


@functools.lru_cache(maxsize=16)
def assemble_laplace_beltrami(g: MetricField, grid: GridDomain,
                              method: str | None = None) -> AssembledOperator:
    """Assemble the discrete Laplace–Beltrami operator of ``g`` on ``grid``.

    The flux ``sqrt|g| g^{αβ} ∂_β u`` is evaluated at half nodes with the
    coefficient averaged from the two adjacent nodes; the tangential
    derivative in mixed terms is the average of the two nodal central
    differences.
    """
    dm = discretize(g, grid)
    matrix = _assemble(dm)
    interior_cols = _node_index(grid)[1:-1, 1:-1].ravel()
    mask = np.ones(grid.n_nodes ** 2, dtype=bool)
    mask[interior_cols] = False
    interior = matrix[:, interior_cols].tocsc()
    coupling = (matrix @ sparse.diags(mask.astype(float))).tocsr()
    coupling.eliminate_zeros()
    if method is None:
        method = "direct" if grid.n_cells <= KRYLOV_THRESHOLD else "krylov"
    return AssembledOperator(grid, dm, matrix, interior, coupling, method)
