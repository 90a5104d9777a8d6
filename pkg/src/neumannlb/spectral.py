"""Weyl end classification, deficiency indices and boundary-condition sensitivity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.integrate import solve_ivp

from .discretize import NeumannOperator, assemble_neumann, build_grid
from .exceptions import DomainError, PreconditionError
from .geometry import Metric1D, distance_to_end, geodesic_distance

LIMIT_POINT = "limit-point"
LIMIT_CIRCLE = "limit-circle"
BOUNDARY_END = "boundary-end"
INDETERMINATE = "indeterminate"

ODE_RTOL = 1e-10
ODE_ATOL = 1e-14
CAUCHY_TOL = 1e-8
WEYL_CHECKPOINTS = tuple(10.0 ** k for k in range(1, 13))
CHUNK_LENGTH = 20.0
DIVERGENCE_EFOLDS = 50.0
DEFAULT_ANCHORS = (2.0, 3.0)
MAX_EIG_CELLS = 4000


# --------------------------------------------------------------------------
# Shooting
# --------------------------------------------------------------------------

def _rhs(lam):
    def rhs(_s, y):
        f, p = y[0], y[1]
        return np.array([p, lam * f, abs(f) ** 2], dtype=complex)
    return rhs


@dataclass
class TailNorms:
    """Cumulative log L2 norms of one solution at coordinate checkpoints."""

    checkpoints: list = field(default_factory=list)
    log_norms: list = field(default_factory=list)  # log of int |f|^2 ds
    diverged: bool = False
    failed: str | None = None

    @property
    def relative_increments(self) -> list[float]:
        ln = self.log_norms
        return [float(-math.expm1(a - b)) for a, b in zip(ln, ln[1:])]

    def as_dict(self) -> dict:
        return {"checkpoints": self.checkpoints, "log_norms": self.log_norms,
                "relative_increments": self.relative_increments,
                "diverged": self.diverged, "failed": self.failed}


def tail_norms(m: Metric1D, lam: complex, anchor: float, y0,
               checkpoints=WEYL_CHECKPOINTS) -> TailNorms:
    """Integrate ``f'' = lam f`` in arclength from ``anchor`` toward the open end.

    ``y0 = (f, df/ds)`` at the anchor.  The solution is renormalized after
    every chunk of at most ``CHUNK_LENGTH`` arclength units, so the running
    norm is tracked as a logarithm and never overflows.  Integration stops
    early once the log norm exceeds its value at the previous checkpoint by
    ``DIVERGENCE_EFOLDS``.
    """
    if not m.has_open_end:
        raise PreconditionError("metric has no open end")
    if not m.domain_start < anchor:
        raise DomainError(f"anchor {anchor} must lie inside the domain")
    out = TailNorms()
    rhs = _rhs(complex(lam))
    f, p = complex(y0[0]), complex(y0[1])
    log_scale = 0.0
    log_norm = -math.inf
    s = 0.0
    prev_ckpt_log = -math.inf
    for xc in (c for c in checkpoints if c > anchor):
        s_target = geodesic_distance(m, anchor, xc)
        while s < s_target:
            s_next = min(s + CHUNK_LENGTH, s_target)
            sol = solve_ivp(rhs, (s, s_next), np.array([f, p, 0.0], dtype=complex),
                            method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL)
            if not sol.success or not np.all(np.isfinite(sol.y[:, -1])):
                out.failed = sol.message if not sol.success else "non-finite state"
                return out
            f, p, chunk = sol.y[:, -1]
            if chunk.real > 0:
                log_norm = np.logaddexp(log_norm, 2.0 * log_scale + math.log(chunk.real))
            c = max(abs(f), abs(p))
            if c > 0:
                f, p = f / c, p / c
                log_scale += math.log(c)
            s = s_next
            if log_norm - prev_ckpt_log > DIVERGENCE_EFOLDS and math.isfinite(prev_ckpt_log):
                out.checkpoints.append(float(xc))
                out.log_norms.append(float(log_norm))
                out.diverged = True
                return out
        out.checkpoints.append(float(xc))
        out.log_norms.append(float(log_norm))
        prev_ckpt_log = log_norm
    return out


@dataclass
class WeylResult:
    classification: str
    lam: complex
    anchor: float
    solutions: list  # TailNorms, one per fundamental solution

    def as_dict(self) -> dict:
        return {"classification": self.classification,
                "lambda": [self.lam.real, self.lam.imag], "anchor": self.anchor,
                "solutions": [s.as_dict() for s in self.solutions]}


def _solution_verdict(t: TailNorms) -> str:
    if t.failed or len(t.log_norms) < 2:
        return INDETERMINATE
    if t.diverged:
        return "diverges"
    inc = t.relative_increments
    if inc[-1] < CAUCHY_TOL:
        return "converges"
    # Shrinking geometrically but not yet below tolerance: undecided.
    if len(inc) >= 3 and inc[-1] < 0.5 * inc[-2] < 0.25 * inc[-3]:
        return INDETERMINATE
    return "diverges"


def weyl_classify(m: Metric1D, lam: complex, anchor: float = DEFAULT_ANCHORS[0],
                  checkpoints=WEYL_CHECKPOINTS) -> WeylResult:
    """Limit-point / limit-circle classification of the open end of ``m``.

    Two solutions with data ``(1, 0)`` and ``(0, 1)`` at the anchor are
    shot toward the open end.  Limit-circle iff both cumulative norms have a
    last-decade relative increment below ``CAUCHY_TOL``; limit-point iff
    one of them diverges.
    """
    lam = complex(lam)
    if lam.imag == 0 and lam.real < 0:
        raise DomainError("lambda must not be real and negative")
    sols = [tail_norms(m, lam, anchor, y0, checkpoints) for y0 in ((1, 0), (0, 1))]
    verdicts = [_solution_verdict(s) for s in sols]
    if "diverges" in verdicts:
        cls = LIMIT_POINT
    elif all(v == "converges" for v in verdicts):
        cls = LIMIT_CIRCLE
    else:
        cls = INDETERMINATE
    return WeylResult(cls, lam, anchor, sols)


@dataclass
class DeficiencyReport:
    end_classifications: dict
    deficiency_indices: tuple | None
    essentially_selfadjoint: bool | None
    evidence: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "end_classifications": self.end_classifications,
            "deficiency_indices": (list(self.deficiency_indices)
                                   if self.deficiency_indices is not None else None),
            "essentially_selfadjoint": self.essentially_selfadjoint,
            "evidence": {k: v.as_dict() for k, v in self.evidence.items()},
        }

    def csv_rows(self):
        yield ["run", "solution", "checkpoint", "log_norm"]
        for key, res in self.evidence.items():
            for i, sol in enumerate(res.solutions):
                for x, ln in zip(sol.checkpoints, sol.log_norms):
                    yield [key, i, repr(x), repr(ln)]


def deficiency_indices(m: Metric1D, anchor: float = DEFAULT_ANCHORS[0],
                       cross_check: bool = True) -> DeficiencyReport:
    """Deficiency indices from the classification at ``lambda = +i`` and ``-i``.

    The finite end carries the Neumann condition and contributes nothing.
    With ``cross_check`` the classification at ``lambda = 1`` is attached as
    evidence too.
    """
    ends = {"start": BOUNDARY_END}
    evidence = {}
    if not m.has_open_end:
        ends["end"] = BOUNDARY_END
        return DeficiencyReport(ends, (0, 0), True, evidence)
    plus = weyl_classify(m, 1j, anchor)
    minus = weyl_classify(m, -1j, anchor)
    evidence["+i"], evidence["-i"] = plus, minus
    if cross_check:
        evidence["1"] = weyl_classify(m, 1.0, anchor)
    ends["end"] = plus.classification if plus.classification == minus.classification \
        else INDETERMINATE
    if INDETERMINATE in (plus.classification, minus.classification):
        return DeficiencyReport(ends, None, None, evidence)
    n_plus = int(plus.classification == LIMIT_CIRCLE)
    n_minus = int(minus.classification == LIMIT_CIRCLE)
    return DeficiencyReport(ends, (n_plus, n_minus), n_plus == n_minus == 0, evidence)


# --------------------------------------------------------------------------
# Boundary-condition sensitivity
# --------------------------------------------------------------------------

@dataclass
class BCSensitivityRow:
    truncation: float
    arclength: float
    n_cells: int
    neumann: list
    dirichlet: list
    gaps: list
    flags: list = field(default_factory=list)


@dataclass
class BCSensitivityTable:
    label: str
    k_eigs: int
    rows: list = field(default_factory=list)

    def gaps(self, k: int) -> np.ndarray:
        """Gap of eigenvalue index ``k`` (0 is the bottom) across truncations."""
        return np.array([r.gaps[k] for r in self.rows])

    def as_dict(self) -> dict:
        return {"label": self.label, "k_eigs": self.k_eigs,
                "rows": [r.__dict__ for r in self.rows]}

    def csv_rows(self):
        yield ["truncation", "arclength", "n_cells", "k", "neumann", "dirichlet", "gap", "flags"]
        for r in self.rows:
            for k in range(len(r.gaps)):
                yield [repr(r.truncation), repr(r.arclength), r.n_cells, k, repr(r.neumann[k]),
                       repr(r.dirichlet[k]), repr(r.gaps[k]), ";".join(r.flags)]


def eigen_gap(op: NeumannOperator, k_eigs: int, bc_a: str = "neumann",
              bc_b: str = "dirichlet") -> np.ndarray:
    """Index-matched gaps between the lowest eigenvalues under two end conditions."""
    a = op.eigenvalues(k_eigs, bc_a)
    b = op.eigenvalues(k_eigs, bc_b)
    return np.abs(a - b)


def bc_sensitivity(m: Metric1D, truncations, n_cells: int | None = None, k_eigs: int = 4,
                   *, h_arc: float | None = None,
                   max_cells: int = MAX_EIG_CELLS) -> BCSensitivityTable:
    """Lowest eigenvalues under Neumann and Dirichlet conditions at the artificial end.

    Grids are uniform in arclength with a common spacing, taken from
    ``h_arc`` or from ``n_cells`` cells at the first truncation.  Index ``0``
    is the bottom of the spectrum, so ``k = 1`` pairs the first nonzero
    Neumann eigenvalue with the second Dirichlet one.
    """
    truncations = [float(L) for L in truncations]
    if any(b <= a for a, b in zip(truncations, truncations[1:])):
        raise PreconditionError("truncations must be increasing")
    if (n_cells is None) == (h_arc is None):
        raise PreconditionError("give exactly one of n_cells and h_arc")
    arcs = [geodesic_distance(m, m.domain_start, L) for L in truncations]
    h = h_arc if h_arc is not None else arcs[0] / n_cells
    table = BCSensitivityTable(m.label, k_eigs)
    for L, ell in zip(truncations, arcs):
        flags = []
        n = max(8, math.ceil(ell / h - 1e-9))
        if n > max_cells:
            n = max_cells
            flags.append("capped")
        op = assemble_neumann(build_grid(m, n, truncation=L, grading="uniform-in-arclength"))
        try:
            neu = op.eigenvalues(k_eigs, "neumann")
            dir_ = op.eigenvalues(k_eigs, "dirichlet")
        except (linalg.LinAlgError, ValueError) as exc:
            flags.append(f"eigensolver: {exc}")
            neu = dir_ = np.full(k_eigs, np.nan)
        table.rows.append(BCSensitivityRow(L, ell, n, [float(v) for v in neu],
                                           [float(v) for v in dir_],
                                           [float(v) for v in np.abs(neu - dir_)], flags))
    return table


# --------------------------------------------------------------------------
# Explicit kernel function of the incomplete example
# --------------------------------------------------------------------------

def x4_kernel_function(x):
    """``cosh(1/x - 1)``: bounded, Neumann at ``x = 1`` and ``Delta f = f`` for ``g = x^-4``."""
    return np.cosh(1.0 / np.asarray(x, dtype=float) - 1.0)


def eigen_residual(op: NeumannOperator, f, mu: float) -> float:
    """``|H f - mu f| / |f|`` over the nodes that are not artificial truncation ends."""
    f = op.grid.check_function(f)
    r = op.apply(f) - mu * f
    mask = np.ones(op.grid.n_nodes, bool)
    mask[op.grid.artificial_nodes] = False
    w = op.weights
    return math.sqrt(np.sum(w[mask] * r[mask] ** 2)) / op.norm(f)


def finite_length(m: Metric1D) -> float:
    """Arclength from the start to the open end (``inf`` when unbounded)."""
    return distance_to_end(m, m.domain_start)
