"""Finite-volume grids and the discrete Neumann Laplacian.

The discrete operator is defined through its Dirichlet form

    E(f, f) = sum_e  T_e (f_j - f_i)^2,      T_e = a_e * m_e / d_e^2,

where for every edge ``e = (i, j)`` the flux coefficient ``a_e`` is the edge
average of the metric coefficient, ``d_e`` the coordinate spacing and ``m_e``
the measure of the diamond cell spanned by the edge.  With cell volumes
``w_i`` the operator is ``H = W^{-1} D^T diag(T) D`` where ``D`` is the signed
edge incidence matrix.  Boundary fluxes are simply absent, which is the
Neumann condition; ``H`` is symmetric and nonnegative in the weighted inner
product ``<f, g>_w = sum_i w_i f_i g_i`` and annihilates constants exactly.

In 1D the edge coefficient is the harmonic mean of ``1/sqrt(g)`` so that
``T_e = 1 / (arclength of e)``; the operator then depends on the metric only
through the arclength positions of the nodes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import linalg, optimize, sparse

from .exceptions import ConfigError, DataError, DomainError
from .geometry import Metric1D, WarpedSurface2D, geodesic_distance

GRADINGS = ("uniform-in-coordinate", "uniform-in-arclength", "geometric")
MIN_CELLS = 8

_GL_X, _GL_W = np.polynomial.legendre.leggauss(12)


def _gauss(fn, a, b):
    """Vectorized 12-point Gauss-Legendre integral of ``fn`` over ``[a_k, b_k]``."""
    a = np.asarray(a, float)[:, None]
    b = np.asarray(b, float)[:, None]
    x = 0.5 * (b - a) * _GL_X[None, :] + 0.5 * (a + b)
    return 0.5 * (b - a)[:, 0] * (fn(x) @ _GL_W)


@dataclass(frozen=True, eq=False)
class Grid:
    """Node set, cell volumes, edge fluxes and boundary tags.

    Nodes are ``x`` coordinates in 1D, ``(r, theta)`` pairs in 2D (flattened
    in C order from ``shape``).  ``normal_coordinate`` is the arclength from
    the left boundary in 1D and ``r`` in 2D.
    """

    manifold: Metric1D | WarpedSurface2D
    nodes: np.ndarray
    shape: tuple
    volume_weights: np.ndarray
    edges: np.ndarray
    flux_coeffs: np.ndarray
    edge_spacing: np.ndarray
    edge_measure: np.ndarray
    boundary_nodes: np.ndarray
    boundary_normals: np.ndarray
    boundary_weights: np.ndarray
    boundary_artificial: np.ndarray
    normal_coordinate: np.ndarray
    grading: str
    edge_arclength: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @cached_property
    def transmissibility(self) -> np.ndarray:
        return self.flux_coeffs * self.edge_measure / self.edge_spacing**2

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        n_e = len(self.edges)
        rows = np.repeat(np.arange(n_e), 2)
        cols = self.edges.ravel()
        vals = np.tile([-1.0, 1.0], n_e)
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n_e, self.n_nodes))

    @property
    def h_arc(self) -> float:
        """Largest edge length in the Riemannian metric."""
        return float(self.edge_arclength.max())

    @property
    def coordinates(self) -> np.ndarray:
        if self.dim != 1:
            raise DomainError("coordinates is defined for 1D grids; use nodes")
        return self.nodes

    @property
    def arclength(self) -> np.ndarray:
        if self.dim != 1:
            raise DomainError("arclength parametrization is defined for 1D grids")
        return self.normal_coordinate

    @property
    def true_boundary_nodes(self) -> np.ndarray:
        return self.boundary_nodes[~self.boundary_artificial]

    @property
    def artificial_nodes(self) -> np.ndarray:
        return self.boundary_nodes[self.boundary_artificial]

    def radii(self) -> np.ndarray:
        return np.unique(self.nodes[:, 0]) if self.dim == 2 else self.normal_coordinate

    def check_function(self, f) -> np.ndarray:
        arr = np.asarray(f, dtype=float)
        if arr.shape != (self.n_nodes,):
            raise DataError(f"grid function has shape {arr.shape}, expected ({self.n_nodes},)")
        if not np.all(np.isfinite(arr)):
            raise DataError("grid function has non-finite samples")
        return arr

    def sample(self, fn) -> np.ndarray:
        """Evaluate ``fn(x)`` (1D) or ``fn(r, theta)`` (2D) at the nodes."""
        if self.dim == 1:
            return np.asarray(fn(self.nodes), dtype=float) * np.ones(self.n_nodes)
        return np.asarray(fn(self.nodes[:, 0], self.nodes[:, 1]), dtype=float) * np.ones(
            self.n_nodes)


# --------------------------------------------------------------------------
# Grid construction
# --------------------------------------------------------------------------

def _invert_arclength(m: Metric1D, start: float, end: float, n_cells: int, total: float):
    nodes = np.empty(n_cells + 1)
    nodes[0], nodes[-1] = start, end
    step = total / n_cells
    for k in range(1, n_cells):
        lo = nodes[k - 1]
        target = step  # arclength from the previous node
        fn = lambda x: geodesic_distance(m, lo, x) - target  # noqa: E731
        guess = max(target / float(m.sqrt_g(lo)), 1e-300)
        hi = min(lo + guess, end)
        while fn(hi) < 0 and hi < end:
            guess *= 2.0
            hi = min(lo + guess, end)
        if fn(hi) < 0:
            hi = end
        nodes[k] = optimize.brentq(fn, lo, hi, xtol=1e-300, rtol=1e-15)
    return nodes


def _build_grid_1d(m: Metric1D, n_cells: int, truncation, grading: str) -> Grid:
    start = m.domain_start
    if truncation is None:
        if m.has_open_end:
            raise ConfigError(f"truncation required for the open end of {m.label}")
        end = m.domain_end
    else:
        end = float(truncation)
        if not start < end <= m.domain_end:
            raise ConfigError(f"truncation {end} outside ({start}, {m.domain_end}]")
    artificial_end = end < m.domain_end
    if grading == "uniform-in-coordinate":
        x = np.linspace(start, end, n_cells + 1)
    elif grading == "uniform-in-arclength":
        x = _invert_arclength(m, start, end, n_cells, geodesic_distance(m, start, end))
    else:
        raise ConfigError(f"grading {grading!r} not available for 1D grids")
    ds = np.array([geodesic_distance(m, a, b) for a, b in zip(x[:-1], x[1:])])
    dx = np.diff(x)
    s = np.concatenate([[0.0], np.cumsum(ds)])
    w = np.zeros(n_cells + 1)
    w[:-1] += 0.5 * ds
    w[1:] += 0.5 * ds
    edges = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    return Grid(
        manifold=m,
        nodes=x,
        shape=(n_cells + 1,),
        volume_weights=w,
        edges=edges,
        flux_coeffs=dx / ds,
        edge_spacing=dx,
        edge_measure=dx.copy(),
        boundary_nodes=np.array([0, n_cells]),
        boundary_normals=np.array([-1.0, 1.0]),
        boundary_weights=np.array([1.0, 1.0]),
        boundary_artificial=np.array([False, artificial_end]),
        normal_coordinate=s,
        grading=grading,
        edge_arclength=ds,
    )


def _build_grid_2d(surf: WarpedSurface2D, n_cells: int, grading: str, n_theta: int,
                   r_min: float | None) -> Grid:
    if n_theta < 8:
        raise ConfigError("n_theta must be at least 8")
    if grading in ("uniform-in-coordinate", "uniform-in-arclength"):
        # r is already unit speed along the normal geodesics.
        r = np.linspace(0.0, surf.r_max, n_cells + 1)
    elif grading == "geometric":
        if r_min is None or not 0 < r_min < surf.r_max:
            raise ConfigError("geometric grading needs 0 < r_min < r_max")
        r = np.concatenate([[0.0], np.geomspace(r_min, surf.r_max, n_cells)])
    else:
        raise ConfigError(f"unknown grading {grading!r}")
    nr = len(r)
    dth = 2.0 * math.pi / n_theta
    theta = dth * np.arange(n_theta)
    dr = np.diff(r)
    mid = 0.5 * (r[:-1] + r[1:])
    lo = np.concatenate([[r[0]], mid])
    hi = np.concatenate([mid, [r[-1]]])
    inv_warp = lambda x: 1.0 / surf.warp(x)  # noqa: E731
    vol_r = _gauss(surf.warp, lo, hi)  # int warp over the dual cell
    inv_r_dual = _gauss(inv_warp, lo, hi)  # int 1/warp over the dual cell
    inv_r_edge = _gauss(inv_warp, r[:-1], r[1:])  # int 1/warp along r-edges

    idx = np.arange(nr * n_theta).reshape(nr, n_theta)
    r_edges = np.column_stack([idx[:-1].ravel(), idx[1:].ravel()])
    t_edges = np.column_stack([idx.ravel(), np.roll(idx, -1, axis=1).ravel()])
    dual = hi - lo
    flux_r = np.repeat(dr / inv_r_edge, n_theta)
    flux_t = np.repeat(inv_r_dual / dual, n_theta)
    warp_r = surf.warp(r)
    arc_r = np.repeat(dr, n_theta)
    arc_t = np.repeat(warp_r * dth, n_theta)
    nodes = np.column_stack([np.repeat(r, n_theta), np.tile(theta, nr)])
    bnodes = np.concatenate([idx[0], idx[-1]])
    return Grid(
        manifold=surf,
        nodes=nodes,
        shape=(nr, n_theta),
        volume_weights=np.repeat(vol_r * dth, n_theta),
        edges=np.vstack([r_edges, t_edges]),
        flux_coeffs=np.concatenate([flux_r, flux_t]),
        edge_spacing=np.concatenate([np.repeat(dr, n_theta), np.full(nr * n_theta, dth)]),
        edge_measure=np.concatenate([np.repeat(dr * dth, n_theta), np.repeat(dual * dth, n_theta)]),
        boundary_nodes=bnodes,
        boundary_normals=np.concatenate([-np.ones(n_theta), np.ones(n_theta)]),
        boundary_weights=np.concatenate([np.full(n_theta, warp_r[0] * dth),
                                         np.full(n_theta, warp_r[-1] * dth)]),
        boundary_artificial=np.concatenate([np.zeros(n_theta, bool), np.ones(n_theta, bool)]),
        normal_coordinate=nodes[:, 0].copy(),
        grading=grading,
        edge_arclength=np.concatenate([arc_r, arc_t]),
    )


def build_grid(manifold, n_cells: int, truncation=None,
               grading: str = "uniform-in-coordinate", *, n_theta: int = 64,
               r_min: float | None = None) -> Grid:
    """Build a finite-volume grid on a model manifold.

    Parameters
    ----------
    manifold : Metric1D or WarpedSurface2D
    n_cells : int
        Number of cells along the coordinate (the ``r`` direction in 2D).
    truncation : float, optional
        Right end of the gridded region; required for an open end.
    grading : str
        ``"uniform-in-coordinate"``, ``"uniform-in-arclength"`` or, for
        surfaces only, ``"geometric"`` (nodes ``0`` and a geometric sequence
        from ``r_min`` to ``r_max``).
    n_theta : int
        Angular nodes for surfaces.
    """
    if n_cells < MIN_CELLS:
        raise ConfigError(f"n_cells must be at least {MIN_CELLS}, got {n_cells}")
    if grading not in GRADINGS:
        raise ConfigError(f"unknown grading {grading!r}; expected one of {GRADINGS}")
    if isinstance(manifold, Metric1D):
        return _build_grid_1d(manifold, n_cells, truncation, grading)
    if isinstance(manifold, WarpedSurface2D):
        return _build_grid_2d(manifold, n_cells, grading, n_theta, r_min)
    raise ConfigError(f"unsupported manifold type {type(manifold).__name__}")


# --------------------------------------------------------------------------
# Operator
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NeumannOperator:
    """Discrete Neumann Laplacian ``H = -Delta`` on a grid."""

    grid: Grid

    @property
    def weights(self) -> np.ndarray:
        return self.grid.volume_weights

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        D = self.grid.incidence
        return (D.T @ sparse.diags(self.grid.transmissibility) @ D).tocsr()

    @cached_property
    def matrix(self) -> sparse.csr_matrix:
        """``W^{-1} L`` as a sparse array (not symmetric as an array)."""
        return (sparse.diags(1.0 / self.weights) @ self.stiffness).tocsr()

    @cached_property
    def spectral_bound(self) -> float:
        """Gershgorin bound on the largest eigenvalue."""
        deg = np.zeros(self.grid.n_nodes)
        T = self.grid.transmissibility
        np.add.at(deg, self.grid.edges[:, 0], T)
        np.add.at(deg, self.grid.edges[:, 1], T)
        return float(np.max(2.0 * deg / self.weights))

    def apply(self, f) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        D = self.grid.incidence
        return (D.T @ (self.grid.transmissibility * (D @ f))) / self.weights

    __call__ = apply

    def inner(self, f1, f2) -> float:
        return float(np.sum(self.weights * np.asarray(f1) * np.asarray(f2)))

    def norm(self, f) -> float:
        return math.sqrt(max(self.inner(f, f), 0.0))

    def dirichlet_form(self, f1, f2=None) -> float:
        D = self.grid.incidence
        d1 = D @ np.asarray(f1, dtype=float)
        d2 = d1 if f2 is None else D @ np.asarray(f2, dtype=float)
        return float(np.sum(self.grid.transmissibility * d1 * d2))

    def _symmetric_form(self, keep=None):
        L = self.stiffness
        w = self.weights
        if keep is not None:
            L = L[keep][:, keep]
            w = w[keep]
        s = 1.0 / np.sqrt(w)
        return L, s

    def eigenvalues(self, k: int, truncation_bc: str = "neumann") -> np.ndarray:
        """Lowest ``k`` eigenvalues; ``truncation_bc="dirichlet"`` pins artificial ends."""
        keep = self._kept_nodes(truncation_bc)
        L, s = self._symmetric_form(keep)
        n = L.shape[0]
        k = min(k, n)
        if self.grid.dim == 1:
            d = L.diagonal() * s * s
            e = L.diagonal(1) * s[:-1] * s[1:]
            return linalg.eigh_tridiagonal(d, e, eigvals_only=True, select="i",
                                           select_range=(0, k - 1))
        S = (sparse.diags(s) @ L @ sparse.diags(s)).toarray()
        return linalg.eigh(S, eigvals_only=True, subset_by_index=(0, k - 1))

    def _kept_nodes(self, truncation_bc: str):
        if truncation_bc == "neumann":
            return None
        if truncation_bc != "dirichlet":
            raise ConfigError(f"unknown truncation_bc {truncation_bc!r}")
        mask = np.ones(self.grid.n_nodes, bool)
        mask[self.grid.artificial_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def eigh(self):
        """Full eigendecomposition ``(lam, U)`` with ``U`` weighted-orthonormal."""
        L, s = self._symmetric_form()
        if self.grid.dim == 1:
            lam, V = linalg.eigh_tridiagonal(L.diagonal() * s * s,
                                             L.diagonal(1) * s[:-1] * s[1:])
        else:
            lam, V = linalg.eigh((sparse.diags(s) @ L @ sparse.diags(s)).toarray())
        lam = np.clip(lam, 0.0, None)
        return lam, V * s[:, None]

    def spectral_apply(self, fn, f) -> np.ndarray:
        """Apply ``fn(H)`` through the dense eigendecomposition."""
        lam, U = self.eigh
        coeff = U.T @ (self.weights * np.asarray(f, dtype=float))
        return U @ (fn(lam) * coeff)


def assemble_neumann(grid: Grid) -> NeumannOperator:
    return NeumannOperator(grid)


# --------------------------------------------------------------------------
# Norms, gradients, boundary derivatives
# --------------------------------------------------------------------------

def lp_norm(grid: Grid, f, p: float) -> float:
    """``(sum_i w_i |f_i|^p)^(1/p)`` for ``p > 1``."""
    if not p > 1:
        raise DomainError(f"p must exceed 1, got {p}")
    f = grid.check_function(f)
    a = np.abs(f)
    m = a.max()
    if m == 0:
        return 0.0
    return float(m * np.sum(grid.volume_weights * (a / m) ** p) ** (1.0 / p))


def _r_nodes(grid: Grid) -> np.ndarray:
    return grid.nodes[:: grid.shape[1], 0]


def gradient(grid: Grid, f) -> np.ndarray:
    """Gradient components in an orthonormal frame, shape ``(dim, N)``.

    Second-order differences: centered in the interior, one-sided at ends,
    periodic in ``theta``.
    """
    f = np.asarray(f, dtype=float)
    if grid.dim == 1:
        return np.gradient(f, grid.normal_coordinate, edge_order=2)[None, :]
    nr, nt = grid.shape
    F = f.reshape(nr, nt)
    r = _r_nodes(grid)
    f_r = np.gradient(F, r, axis=0, edge_order=2)
    dth = 2.0 * math.pi / nt
    f_t = (np.roll(F, -1, axis=1) - np.roll(F, 1, axis=1)) / (2.0 * dth)
    f_t = f_t / grid.manifold.warp(r)[:, None]
    return np.stack([f_r.ravel(), f_t.ravel()])


def gradient_norm(grid: Grid, f) -> np.ndarray:
    """Pointwise ``|grad f|`` in the Riemannian metric."""
    return np.sqrt(np.sum(gradient(grid, f) ** 2, axis=0))


def gradient_inner(grid: Grid, f1, f2) -> np.ndarray:
    """Pointwise ``(grad f1, grad f2)``."""
    return np.sum(gradient(grid, f1) * gradient(grid, f2), axis=0)


def normal_derivative(grid: Grid, f) -> np.ndarray:
    """Outward normal derivative at ``grid.boundary_nodes``.

    One-sided second-order differences in the unit-speed normal coordinate.
    """
    f = np.asarray(f, dtype=float)
    if len(grid.boundary_nodes) == 0:
        return np.zeros(0)
    if grid.dim == 1:
        d = np.gradient(f, grid.normal_coordinate, edge_order=2)
        return grid.boundary_normals * d[grid.boundary_nodes]
    nr, nt = grid.shape
    r = _r_nodes(grid)
    f_r = np.gradient(f.reshape(nr, nt), r, axis=0, edge_order=2)
    return grid.boundary_normals * np.concatenate([f_r[0], f_r[-1]])


def _second_derivative_weights(x: np.ndarray) -> np.ndarray:
    # Weights c with sum c_k p(x_k) = p''(x_0) for every cubic p.
    d = x - x[0]
    V = np.vander(d, 4, increasing=True).T
    return np.linalg.solve(V, np.array([0.0, 0.0, 2.0, 0.0]))


def unclosed_laplacian(op: NeumannOperator, f) -> np.ndarray:
    """Laplace-Beltrami of ``f`` without the Neumann closure.

    Equals ``-H f`` at interior nodes; at boundary nodes the second
    derivatives are taken one-sided, so boundary fluxes are not discarded.
    """
    grid = op.grid
    f = np.asarray(f, dtype=float)
    out = -op.apply(f)
    if grid.dim == 1:
        s = grid.normal_coordinate
        out[0] = _second_derivative_weights(s[:4]) @ f[:4]
        out[-1] = _second_derivative_weights(s[-4:][::-1]) @ f[-4:][::-1]
        return out
    nr, nt = grid.shape
    r = _r_nodes(grid)
    F = f.reshape(nr, nt)
    surf = grid.manifold
    dth = 2.0 * math.pi / nt
    O = out.reshape(nr, nt)
    f_r_all = np.gradient(F, r, axis=0, edge_order=2)
    for row, rows in ((0, [0, 1, 2, 3]), (nr - 1, [nr - 1, nr - 2, nr - 3, nr - 4])):
        f_rr = _second_derivative_weights(r[rows]) @ F[rows]
        f_r = f_r_all[row]
        phi = surf.warp(np.array([r[row]]))[0]
        dphi = surf.warp_prime(np.array([r[row]]))[0]
        f_tt = (np.roll(F[row], -1) - 2 * F[row] + np.roll(F[row], 1)) / dth**2
        O[row] = f_rr + dphi / phi * f_r + f_tt / phi**2
    return O.ravel()


def green_identity_defect(op: NeumannOperator, f1, f2) -> float:
    """``|<Delta f1, f2>_w + <grad f1, grad f2>_w - sum sigma (d_nu f1) f2|``."""
    grid = op.grid
    lap = unclosed_laplacian(op, f1)
    bulk = op.inner(lap, f2) + float(np.sum(grid.volume_weights * gradient_inner(grid, f1, f2)))
    bdry = float(np.sum(grid.boundary_weights * normal_derivative(grid, f1)
                        * np.asarray(f2)[grid.boundary_nodes]))
    return abs(bulk - bdry)


def leibniz_residual(op: NeumannOperator, f, chi) -> float:
    """Weighted L2 norm of ``H(f chi) - chi Hf - f H chi + 2 (grad f, grad chi)``.

    This is the product rule for ``-Delta``; it vanishes up to discretization
    error and exactly when ``chi`` is constant.
    """
    grid = op.grid
    f = grid.check_function(f)
    chi = grid.check_function(chi)
    res = (op.apply(f * chi) - chi * op.apply(f) - f * op.apply(chi)
           + 2.0 * gradient_inner(grid, f, chi))
    return op.norm(res)


def write_grid_function_csv(grid: Grid, f, path) -> Path:
    """Write ``(coordinate, value)`` rows; ``(r, theta, value)`` on surfaces."""
    path = Path(path)
    f = grid.check_function(f)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        if grid.dim == 1:
            w.writerow(["coordinate", "arclength", "value"])
            for x, s, v in zip(grid.nodes, grid.normal_coordinate, f):
                w.writerow([repr(float(x)), repr(float(s)), repr(float(v))])
        else:
            w.writerow(["r", "theta", "value"])
            for (r, t), v in zip(grid.nodes, f):
                w.writerow([repr(float(r)), repr(float(t)), repr(float(v))])
    return path
