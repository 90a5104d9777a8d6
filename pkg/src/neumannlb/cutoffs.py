"""First-order cut-off sequences, their Neumann modification and related experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.interpolate import PchipInterpolator
from scipy.sparse.csgraph import dijkstra

from .discretize import (Grid, NeumannOperator, build_grid, gradient_norm,
                         lp_norm, normal_derivative)
from .exceptions import DomainError, PreconditionError, ResolutionError
from .geometry import SmoothingParams, WarpedSurface2D, smoothing_h

MIN_COLLAR_CELLS = 8
GRADIENT_SLOPE = 1.875  # max |psi'| of the quintic profile
INTERPOLATION_ALLOWANCE = 0.02


def cutoff_profile(t):
    """Plateau profile: 1 on ``[0, 1]``, 0 on ``[2, inf)``, quintic smoothstep between.

    C2 with ``max |psi'| = 15/8``.
    """
    u = np.clip(np.asarray(t, dtype=float) - 1.0, 0.0, 1.0)
    return 1.0 - u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


# --------------------------------------------------------------------------
# Distances from a base point
# --------------------------------------------------------------------------

STENCIL_REACH = 4.0


def _stencil(dr: float, dt_metric: float, reach: float = STENCIL_REACH):
    """Primitive offsets ``(di, dj)`` with ``di >= 0`` inside a metric ball.

    The ball has radius ``reach`` times the larger cell side, so the set of
    edge directions is roughly isotropic in the metric even on stretched
    cells.
    """
    big = reach * max(dr, dt_metric)
    ki = max(1, int(big / dr))
    kj = max(1, int(big / dt_metric))
    out = []
    for di in range(0, ki + 1):
        for dj in range(-kj, kj + 1):
            if (di, dj) == (0, 0) or (di == 0 and dj < 0) or math.gcd(di, abs(dj)) != 1:
                continue
            if (di * dr / big) ** 2 + (dj * dt_metric / big) ** 2 <= 1.0 + 1e-12:
                out.append((di, dj))
    return out


def surface_distance(grid: Grid, base_theta: float = 0.0) -> np.ndarray:
    """Geodesic distance from the boundary point ``(0, base_theta)`` to every node.

    Dijkstra on a grid graph whose edges join each node to the offsets from
    :func:`_stencil`; a straight coordinate segment has its metric length
    evaluated with Simpson's rule.
    """
    if grid.dim != 2:
        raise DomainError("surface_distance needs a 2D grid")
    nr, nt = grid.shape
    r = grid.nodes[::nt, 0]
    dth = 2.0 * math.pi / nt
    warp = grid.manifold.warp
    idx = np.arange(nr * nt).reshape(nr, nt)
    dr_typ = float(np.median(np.diff(r)))
    dt_typ = float(np.max(warp(r))) * dth
    rows, cols, vals = [], [], []
    for di, dj in _stencil(dr_typ, dt_typ):
        if dj > nt // 2 or di >= nr:
            continue
        i0 = np.arange(nr - di)
        a = idx[i0]
        b = np.roll(idx[i0 + di], -dj, axis=1)
        r0, r1 = r[i0], r[i0 + di]
        ang = dj * dth
        speed = lambda x: np.sqrt((r1 - r0) ** 2 + (warp(x) * ang) ** 2)  # noqa: E731
        length = (speed(r0) + 4.0 * speed(0.5 * (r0 + r1)) + speed(r1)) / 6.0
        rows.append(a.ravel())
        cols.append(b.ravel())
        vals.append(np.repeat(length, nt))
    G = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nr * nt, nr * nt))
    j0 = int(round(base_theta / dth)) % nt
    return dijkstra(G, directed=False, indices=idx[0, j0])


def base_distance(grid: Grid, base=None) -> np.ndarray:
    """Distance from the base point: arclength in 1D, Dijkstra in 2D."""
    if grid.dim == 1:
        s = grid.normal_coordinate
        s0 = 0.0 if base is None else float(np.interp(base, grid.nodes, s))
        return np.abs(s - s0)
    return surface_distance(grid, 0.0 if base is None else float(base))


# --------------------------------------------------------------------------
# Cut-off sequences
# --------------------------------------------------------------------------

@dataclass
class CutoffSequence:
    n: float
    chi: np.ndarray
    sup_gradient: float
    boundary_flux: float
    plateau: np.ndarray  # boolean node mask where chi == 1
    support_radius: float
    plateau_measure: float
    truncated: bool = False
    checks: dict = field(default_factory=dict)

    def summary_row(self) -> dict:
        return {"n": self.n, "sup_gradient": self.sup_gradient,
                "boundary_flux": self.boundary_flux, "support_radius": self.support_radius,
                "plateau_measure": self.plateau_measure}


def summary_csv_rows(sequences):
    yield ["n", "sup_gradient", "boundary_flux", "support_radius", "plateau_measure"]
    for c in sequences:
        row = c.summary_row()
        yield [repr(float(row[k])) for k in ("n", "sup_gradient", "boundary_flux",
                                              "support_radius", "plateau_measure")]


def _boundary_flux(grid: Grid, chi) -> float:
    nodes_true = ~grid.boundary_artificial
    if not nodes_true.any():
        return 0.0
    return float(np.abs(normal_derivative(grid, chi)[nodes_true]).max())


def _sequence(grid: Grid, n, chi, dist, truncated, checks=None) -> CutoffSequence:
    plateau = chi == 1.0
    support = chi > 0
    return CutoffSequence(
        n=float(n), chi=chi,
        sup_gradient=float(gradient_norm(grid, chi).max()),
        boundary_flux=_boundary_flux(grid, chi),
        plateau=plateau,
        support_radius=float(dist[support].max()) if support.any() else 0.0,
        plateau_measure=float(grid.volume_weights[plateau].sum()),
        truncated=truncated,
        checks=checks or {},
    )


def _is_truncated(grid: Grid) -> bool:
    m = grid.manifold
    return bool(isinstance(m, WarpedSurface2D) or m.has_open_end)


def build_first_order_cutoffs(grid: Grid, n: float, base=None) -> CutoffSequence:
    """``chi_n = psi(rho(o, .) / n)`` on a grid.

    ``base`` is a coordinate in 1D (default: the left end) and a boundary
    angle in 2D (default ``0``).
    """
    if not n >= 1:
        raise DomainError(f"cut-off index must be at least 1, got {n}")
    dist = base_distance(grid, base)
    chi = cutoff_profile(dist / n)
    return _sequence(grid, n, chi, dist, _is_truncated(grid))


def collar_cells(grid: Grid, delta: float) -> int:
    """Cells of the normal coordinate inside ``[0, delta/2]``."""
    s = np.unique(grid.normal_coordinate)
    return int(np.count_nonzero((s > 0) & (s <= 0.5 * delta + 1e-15 * delta)))


def _retracted_coordinate(grid: Grid, params: SmoothingParams):
    """Normal coordinate after the retraction, plus the axis it acts along."""
    if grid.dim == 2:
        return smoothing_h(params, grid.normal_coordinate)
    s = grid.normal_coordinate.copy()
    total = s[-1]
    out = s.copy()
    left = s < 0.5 * params.delta
    out[left] = smoothing_h(params, s[left])
    if not grid.manifold.has_open_end:
        right = (total - s) < 0.5 * params.delta
        out[right] = total - smoothing_h(params, total - s[right])
    return out


def compose_with_retraction(grid: Grid, f, params: SmoothingParams) -> np.ndarray:
    """Grid function ``f o tau``; off-node values come from monotone cubic interpolation."""
    if collar_cells(grid, params.delta) < MIN_COLLAR_CELLS:
        raise ResolutionError(
            f"delta={params.delta} leaves fewer than {MIN_COLLAR_CELLS} cells in the collar")
    f = grid.check_function(f)
    target = _retracted_coordinate(grid, params)
    moved = target != grid.normal_coordinate
    if grid.dim == 1:
        out = f.copy()
        out[moved] = PchipInterpolator(grid.normal_coordinate, f)(target[moved])
        return out
    nr, nt = grid.shape
    r = grid.nodes[::nt, 0]
    F = f.reshape(nr, nt)
    tr = target.reshape(nr, nt)[:, 0]
    out = F.copy()
    rows = tr != r
    out[rows] = PchipInterpolator(r, F, axis=0)(tr[rows])
    return out.ravel()


def neumannize(grid: Grid, chi_tilde: CutoffSequence, params: SmoothingParams,
               base=None) -> CutoffSequence:
    """Compose a cut-off with the collar retraction, ``chi = chi_tilde o tau``.

    The returned sequence carries diagnostics in ``checks``: boundary flux,
    gradient inflation factor, the largest change outside the collar and
    the plateau retention on the original plateau.
    """
    chi = compose_with_retraction(grid, chi_tilde.chi, params)
    chi = np.clip(chi, 0.0, 1.0)
    dist = base_distance(grid, base)
    outside = np.ones(grid.n_nodes, bool)
    d_bdry = grid.normal_coordinate
    if grid.dim == 1 and not grid.manifold.has_open_end:
        d_bdry = np.minimum(d_bdry, d_bdry[-1] - d_bdry)
    outside = d_bdry >= 0.5 * params.delta
    inflation = (float(gradient_norm(grid, chi).max()) / chi_tilde.sup_gradient
                 if chi_tilde.sup_gradient > 0 else 0.0)
    checks = {
        "delta": params.delta,
        "collar_cells": collar_cells(grid, params.delta),
        "gradient_inflation": inflation,
        "outside_collar_defect": float(np.abs(chi - chi_tilde.chi)[outside].max(initial=0.0)),
    }
    seq = _sequence(grid, chi_tilde.n, chi, dist, chi_tilde.truncated, checks)
    # Plateau retained on the part of the old plateau that the collar cannot touch.
    keep = chi_tilde.plateau & outside
    checks["plateau_retained"] = bool(np.all(seq.plateau[keep]))
    return seq


# --------------------------------------------------------------------------
# Density experiment
# --------------------------------------------------------------------------

@dataclass
class DensityRow:
    delta: float
    norm_error: float
    gradient_error: float
    boundary_flux: float

    @property
    def error(self) -> float:
        return self.norm_error + self.gradient_error


@dataclass
class DensityTable:
    p: float
    f_norm: float  # ||f||_p + ||grad f||_p
    rows: list = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    @property
    def strictly_decreasing(self) -> bool:
        e = self.errors
        return bool(np.all(np.diff(e) < 0))

    @property
    def final_relative_error(self) -> float:
        return float(self.errors[-1] / self.f_norm)

    def as_dict(self) -> dict:
        return {"p": self.p, "f_norm": self.f_norm,
                "rows": [dict(r.__dict__, error=r.error) for r in self.rows],
                "strictly_decreasing": self.strictly_decreasing,
                "final_relative_error": self.final_relative_error}

    def csv_rows(self):
        yield ["p", "delta", "norm_error", "gradient_error", "error", "boundary_flux"]
        for r in self.rows:
            yield [repr(self.p), repr(r.delta), repr(r.norm_error), repr(r.gradient_error),
                   repr(r.error), repr(r.boundary_flux)]


def density_grid(surface: WarpedSurface2D, delta_min: float, ratio: float = 1.1,
                 n_theta: int = 32) -> Grid:
    """Geometric radial grid with ``MIN_COLLAR_CELLS`` cells inside ``[0, delta_min/2]``."""
    r_min = 0.5 * delta_min * ratio ** -(MIN_COLLAR_CELLS + 1)
    n = math.ceil(math.log(surface.r_max / r_min) / math.log(ratio)) + 1
    return build_grid(surface, n, grading="geometric", r_min=r_min, n_theta=n_theta)


def density_experiment(grid: Grid, f, p: float, delta_list) -> DensityTable:
    """``||f - f o tau_delta||_p + ||grad(f - f o tau_delta)||_p`` for each ``delta``.

    ``f`` is a callable ``f(r, theta)`` (``f(x)`` in 1D) evaluated exactly at the
    retracted points.
    """
    if not p > 1:
        raise DomainError(f"p must exceed 1, got {p}")
    delta_list = [float(d) for d in delta_list]
    if any(b >= a for a, b in zip(delta_list, delta_list[1:])):
        raise PreconditionError("delta_list must be decreasing")
    f0 = grid.sample(f)
    f_norm = lp_norm(grid, f0, p) + lp_norm(grid, gradient_norm(grid, f0), p)
    table = DensityTable(p, f_norm)
    for delta in delta_list:
        params = SmoothingParams(delta)
        if collar_cells(grid, delta) < MIN_COLLAR_CELLS:
            raise ResolutionError(f"delta={delta} is not resolved by the grid collar")
        target = _retracted_coordinate(grid, params)
        if grid.dim == 2:
            fr = np.asarray(f(target, grid.nodes[:, 1]), dtype=float)
        else:
            x = np.interp(target, grid.normal_coordinate, grid.nodes)
            fr = np.asarray(f(x), dtype=float) * np.ones(grid.n_nodes)
        diff = f0 - fr
        table.rows.append(DensityRow(
            delta,
            lp_norm(grid, diff, p) if np.any(diff) else 0.0,
            lp_norm(grid, gradient_norm(grid, diff), p) if np.any(diff) else 0.0,
            _boundary_flux(grid, fr),
        ))
    return table


# --------------------------------------------------------------------------
# Interpolation inequality
# --------------------------------------------------------------------------

@dataclass
class InterpolationResult:
    p: float
    lhs: float
    rhs: float
    allowance: float
    holds: bool

    @property
    def ratio(self) -> float:
        """``rhs / lhs`` (``inf`` when ``lhs = 0``)."""
        return self.rhs / self.lhs if self.lhs > 0 else math.inf


def interpolation_check(op: NeumannOperator, f, p: float, flux_tol: float | None = None,
                        allowance: float | None = None) -> InterpolationResult:
    """Compare ``||grad f||_p^2`` with ``(p-1)^-1 ||Delta f||_p ||f||_p``.

    ``f`` must have a small boundary flux: by default at most
    ``10 h^2 sup|grad f| + 1e-10 max(1, sup|f|)``.  The inequality is counted as holding when
    ``lhs <= rhs (1 + allowance)`` with ``allowance = 0.02 + h_arc``.
    """
    if not 1 < p <= 2:
        raise DomainError(f"p must lie in (1, 2], got {p}")
    grid = op.grid
    f = grid.check_function(f)
    h = grid.h_arc
    grad = gradient_norm(grid, f)
    scale = max(1.0, float(np.abs(f).max()))
    tol = 10.0 * h * h * float(grad.max()) + 1e-10 * scale if flux_tol is None else flux_tol
    flux = _boundary_flux(grid, f)
    if flux > tol:
        raise PreconditionError(f"boundary flux {flux:.3g} exceeds {tol:.3g}")
    lhs = lp_norm(grid, grad, p) ** 2 if np.any(grad) else 0.0
    Hf = op.apply(f)
    rhs = (lp_norm(grid, Hf, p) * lp_norm(grid, f, p) / (p - 1.0)
           if np.any(Hf) and np.any(f) else 0.0)
    allowance = INTERPOLATION_ALLOWANCE + h if allowance is None else allowance
    # Gradient roundoff of order eps sup|f| / h must not decide the comparison.
    volume = float(grid.volume_weights.sum())
    floor = (64.0 * np.finfo(float).eps * scale / h) ** 2 * volume ** (2.0 / p)
    return InterpolationResult(p, lhs, rhs, allowance, lhs <= rhs * (1.0 + allowance) + floor)


def random_cosine_sum(grid: Grid, rng: np.random.Generator, n_modes: int = 6) -> np.ndarray:
    """Random ``sum a_k cos(k pi s / l)`` in the arclength ``s``; Neumann at both ends."""
    s = grid.normal_coordinate
    ell = s[-1]
    k = np.arange(n_modes)
    a = rng.standard_normal(n_modes) / (1.0 + k) ** 2
    return np.cos(np.outer(s, k) * math.pi / ell) @ a
