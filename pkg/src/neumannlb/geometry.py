"""Model manifolds with boundary, geodesic distance and the collar retraction.

Two families of models are supported:

* :class:`Metric1D` -- a half-line or interval ``[a, b)`` with metric
  ``g(x) dx^2``.  The left end ``a`` is a genuine boundary point; the right end
  is either a second boundary point (finite ``b``) or an open end (``b = inf``).
* :class:`WarpedSurface2D` -- the half-cylinder ``[0, r_max] x S^1`` with metric
  ``dr^2 + phi(r)^2 dtheta^2``; the circle ``r = 0`` is the boundary and the
  ``r``-lines are the inward normal geodesics.

Metrics are given by closed-form callables from a small registry; see
:data:`REGISTRY`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate, interpolate

from .exceptions import DomainError

QUAD_ABS_TOL = 1e-10
QUAD_MAX_DEPTH = 60
# Relative floor so that long integrals do not chase an absolute tolerance
# below double-precision resolution.
QUAD_REL_FLOOR = 2e-14

ArrayFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Metric1D:
    """Metric ``g(x) dx^2`` on ``[domain_start, domain_end)``.

    ``g`` and ``g_prime`` must accept and return numpy arrays.  A finite
    ``domain_end`` is a second boundary point (the interval is compact); an
    infinite one is an open end.
    """

    domain_start: float
    domain_end: float
    g: ArrayFn
    g_prime: ArrayFn
    label: str = "custom"

    def __post_init__(self):
        if not self.domain_end > self.domain_start:
            raise DomainError(f"empty domain [{self.domain_start}, {self.domain_end})")

    @property
    def has_open_end(self) -> bool:
        return math.isinf(self.domain_end)

    def sqrt_g(self, x):
        return np.sqrt(self.g(np.asarray(x, dtype=float)))

    def contains(self, x: float) -> bool:
        if not np.isfinite(x):
            return False
        return self.domain_start <= x <= self.domain_end


@dataclass(frozen=True)
class WarpedSurface2D:
    """Half-cylinder ``[0, r_max] x S^1`` with metric ``dr^2 + warp(r)^2 dtheta^2``."""

    r_max: float
    warp: ArrayFn
    warp_prime: ArrayFn
    label: str = "custom_surface"

    def __post_init__(self):
        if not self.r_max > 0:
            raise DomainError("r_max must be positive")


# --------------------------------------------------------------------------
# Distance and completeness
# --------------------------------------------------------------------------

def _split_points(p: float, q: float) -> np.ndarray:
    # Integrals over many decades are split geometrically so that each piece
    # is well conditioned for the adaptive rule.
    if p > 0 and q / p > 10.0:
        n_dec = int(math.ceil(math.log10(q / p)))
        return np.geomspace(p, q, n_dec + 1)
    return np.array([p, q])


def _quad(fn, a: float, b: float, tol: float) -> float:
    if math.isinf(b):
        val, _ = integrate.quad(fn, a, b, epsabs=tol, epsrel=QUAD_REL_FLOOR,
                                limit=QUAD_MAX_DEPTH * 4)
        return val
    pts = _split_points(a, b)
    piece_tol = tol / max(len(pts) - 1, 1)
    total = 0.0
    for lo, hi in zip(pts[:-1], pts[1:]):
        val, _ = integrate.quad(fn, lo, hi, epsabs=piece_tol, epsrel=QUAD_REL_FLOOR,
                                limit=QUAD_MAX_DEPTH * 4)
        total += val
    return total


def _check_point(m: Metric1D, x: float, name: str):
    if not m.contains(x):
        raise DomainError(
            f"{name}={x!r} outside domain [{m.domain_start}, {m.domain_end}] of {m.label}"
        )


def geodesic_distance(m: Metric1D, p: float, q: float) -> float:
    """Riemannian distance ``|int_p^q sqrt(g(x)) dx|`` between two points."""
    _check_point(m, p, "p")
    _check_point(m, q, "q")
    if p == q:
        return 0.0
    lo, hi = (p, q) if p < q else (q, p)
    return _quad(lambda x: math.sqrt(m.g(np.float64(x))), lo, hi, QUAD_ABS_TOL)


def _tail_integral(m: Metric1D, p: float) -> float:
    fn = lambda x: math.sqrt(m.g(np.float64(x)))  # noqa: E731
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(fn, p, np.inf, epsabs=QUAD_ABS_TOL, epsrel=1e-12, limit=400)
    if not np.isfinite(val) or val < 0 or err > 1e-6 * max(1.0, abs(val)):
        return math.inf
    return val


def distance_to_end(m: Metric1D, p: float) -> float:
    """Distance from ``p`` to the right end (``inf`` when it diverges)."""
    _check_point(m, p, "p")
    if not m.has_open_end:
        return geodesic_distance(m, p, m.domain_end)
    if is_complete(m).verdict == "complete":
        return math.inf
    return _tail_integral(m, p)


COMPLETENESS_CUTOFFS = tuple(10.0 ** k for k in range(1, 7))


@dataclass(frozen=True)
class GrowthFit:
    model: str
    params: tuple
    residual: float
    divergent: bool


@dataclass(frozen=True)
class CompletenessVerdict:
    verdict: str  # "complete", "incomplete" or "indeterminate"
    cutoffs: tuple
    partial_integrals: tuple
    fits: tuple = ()
    distance_to_end: float | None = None
    reason: str = ""

    @property
    def complete(self) -> bool | None:
        return {"complete": True, "incomplete": False}.get(self.verdict)

    def as_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "cutoffs": list(self.cutoffs),
            "partial_integrals": list(self.partial_integrals),
            "fits": [
                {"model": f.model, "params": list(f.params), "residual": f.residual,
                 "divergent": f.divergent}
                for f in self.fits
            ],
            "distance_to_end": self.distance_to_end,
            "reason": self.reason,
        }


def _linear_fit(basis: np.ndarray, y: np.ndarray):
    design = np.column_stack([np.ones_like(y), basis])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    return coef, float(np.sqrt(np.mean(resid**2)))


def _fit_growth_models(L: np.ndarray, S: np.ndarray) -> list[GrowthFit]:
    scale = max(S[-1] - S[0], 1e-300)
    fits = []
    coef, res = _linear_fit(np.log(L), S)
    fits.append(GrowthFit("log", (float(coef[0]), float(coef[1])), res / scale,
                          divergent=coef[1] > 0))
    coef, res = _linear_fit(-1.0 / L, S)
    fits.append(GrowthFit("bounded", (float(coef[0]), float(coef[1])), res / scale,
                          divergent=False))
    best = None
    # |alpha| >= 0.05 keeps the power family from impersonating the log model.
    alphas = np.concatenate([np.arange(-4.0, -0.05 + 1e-12, 0.01),
                             np.arange(0.05, 4.0 + 1e-12, 0.01)])
    u = np.log(L / L[0])
    for alpha in alphas:
        with np.errstate(over="ignore"):
            basis = np.exp(alpha * u)
        if not np.all(np.isfinite(basis)):
            continue
        coef, res = _linear_fit(basis, S)
        if best is None or res < best[2]:
            best = (alpha, coef, res)
    alpha, coef, res = best
    fits.append(GrowthFit("power", (float(coef[0]), float(coef[1]), float(alpha)),
                          res / scale, divergent=bool(alpha > 0 and coef[1] > 0)))
    return fits


def is_complete(m: Metric1D, cutoffs=COMPLETENESS_CUTOFFS,
                fit_tolerance: float = 0.05) -> CompletenessVerdict:
    """Decide metric completeness from partial arclength integrals.

    A compact interval is complete.  For an open end the partial integrals
    ``S(L) = int_start^L sqrt(g)`` at each cutoff are fitted against a
    logarithmic, a power-law and a bounded ``c - d/L`` growth model; the model
    with the smallest residual decides.  When the partial integrals are not
    monotone or no model fits within ``fit_tolerance`` (relative to the total
    variation of ``S``) the verdict is ``"indeterminate"``.
    """
    if not m.has_open_end:
        return CompletenessVerdict("complete", (), (),
                                   distance_to_end=geodesic_distance(m, m.domain_start,
                                                                     m.domain_end),
                                   reason="compact interval")
    L = np.array([c for c in cutoffs if c > m.domain_start], dtype=float)
    if len(L) < 4:
        raise DomainError("need at least four cutoffs beyond the domain start")
    S = np.empty_like(L)
    prev, acc = m.domain_start, 0.0
    for i, c in enumerate(L):
        acc += geodesic_distance(m, prev, c)
        S[i] = acc
        prev = c
    if not np.all(np.isfinite(S)) or np.any(np.diff(S) < -QUAD_ABS_TOL):
        return CompletenessVerdict("indeterminate", tuple(L), tuple(S),
                                   reason="partial integrals not monotone")
    if S[-1] - S[0] <= QUAD_ABS_TOL * len(L):
        # No measurable growth over six decades.
        return CompletenessVerdict("incomplete", tuple(L), tuple(S),
                                   distance_to_end=_tail_integral(m, m.domain_start),
                                   reason="partial integrals stationary")
    fits = _fit_growth_models(L, S)
    best = min(fits, key=lambda f: f.residual)
    if best.residual > fit_tolerance:
        return CompletenessVerdict("indeterminate", tuple(L), tuple(S), tuple(fits),
                                   reason=f"no growth model fits (best {best.model})")
    if best.divergent:
        return CompletenessVerdict("complete", tuple(L), tuple(S), tuple(fits),
                                   distance_to_end=math.inf,
                                   reason=f"best fit {best.model} diverges")
    return CompletenessVerdict("incomplete", tuple(L), tuple(S), tuple(fits),
                               distance_to_end=_tail_integral(m, m.domain_start),
                               reason=f"best fit {best.model} is bounded")


# --------------------------------------------------------------------------
# Collar smoothing h and the Fermi retraction
# --------------------------------------------------------------------------

def _smooth_step(t):
    """C-infinity step, 0 for t <= 0 and 1 for t >= 1, with S(t) + S(1-t) = 1."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
        b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


@lru_cache(maxsize=1)
def _step_antiderivative():
    # Table of A(t) = int_0^t S on a fine mesh, interpolated with the exact
    # derivative S, so A is accurate to ~1e-14.
    nodes = np.linspace(0.0, 1.0, 2049)
    xg, wg = np.polynomial.legendre.leggauss(10)
    vals = np.zeros_like(nodes)
    for i in range(1, len(nodes)):
        a, b = nodes[i - 1], nodes[i]
        x = 0.5 * (b - a) * xg + 0.5 * (a + b)
        vals[i] = vals[i - 1] + 0.5 * (b - a) * np.dot(wg, _smooth_step(x))
    return interpolate.CubicHermiteSpline(nodes, vals, _smooth_step(nodes))


def _step_integral(t):
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    return _step_antiderivative()(t)


def _plateau(sigma):
    """C-infinity bump on [0, 1], equal to 1 on the middle half [1/4, 3/4]."""
    sigma = np.asarray(sigma, dtype=float)
    return np.where(sigma <= 0.5, _smooth_step(4.0 * sigma), _smooth_step(4.0 * (1.0 - sigma)))


def _plateau_integral(sigma):
    sigma = np.clip(np.asarray(sigma, dtype=float), 0.0, 1.0)
    left = 0.25 * _step_integral(4.0 * sigma)
    mid = 0.125 + (sigma - 0.25)
    right = 0.75 - 0.25 * _step_integral(4.0 * (1.0 - sigma))
    return np.where(sigma <= 0.25, left, np.where(sigma <= 0.75, mid, right))


# Height of the plateau so that the transition integrates to delta/2.
PLATEAU_HEIGHT = 2.0


@dataclass(frozen=True)
class SmoothingParams:
    """Collar width parameter for the smoothing function ``h``.

    ``h`` vanishes on ``[0, delta/4]``, is the identity on ``[delta/2, inf)``
    and on the transition its derivative is ``S(sigma) + 2 * beta(sigma)``
    where ``S`` is a smooth 0-to-1 step and ``beta`` a smooth plateau bump
    (``sigma`` is the transition coordinate rescaled to ``[0, 1]``).  Hence
    ``0 <= h' <= 3``.
    """

    delta: float
    plateau_height: float = field(default=PLATEAU_HEIGHT, repr=False)

    def __post_init__(self):
        if not 0 < self.delta <= 0.5:
            raise DomainError(f"delta must lie in (0, 1/2], got {self.delta}")


def smoothing_h(params: SmoothingParams, s):
    """Evaluate the collar smoothing ``h`` at ``s >= 0`` (scalar or array)."""
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0) or not np.all(np.isfinite(s_arr)):
        raise DomainError("smoothing_h is defined for finite s >= 0")
    d = params.delta
    sigma = (s_arr - 0.25 * d) / (0.25 * d)
    inner = 0.25 * d * (_step_integral(sigma) + params.plateau_height * _plateau_integral(sigma))
    out = np.where(s_arr <= 0.25 * d, 0.0, np.where(s_arr >= 0.5 * d, s_arr, inner))
    return float(out) if np.ndim(s) == 0 else out


def smoothing_h_prime(params: SmoothingParams, s):
    """Derivative ``h'(s)``."""
    s_arr = np.asarray(s, dtype=float)
    d = params.delta
    sigma = (s_arr - 0.25 * d) / (0.25 * d)
    inner = _smooth_step(sigma) + params.plateau_height * _plateau(np.clip(sigma, 0, 1))
    out = np.where(s_arr <= 0.25 * d, 0.0, np.where(s_arr >= 0.5 * d, 1.0, inner))
    return float(out) if np.ndim(s) == 0 else out


def fermi_retraction(surface: WarpedSurface2D, params: SmoothingParams, point):
    """Collapse the boundary collar: ``(r, theta) -> (h(r), theta)``."""
    r, theta = point
    if not 0.0 <= r <= surface.r_max:
        raise DomainError(f"r={r} outside [0, {surface.r_max}]")
    return (smoothing_h(params, r), theta)


def retraction_differential_norm(surface: WarpedSurface2D, params: SmoothingParams, r):
    """Operator norm of ``d tau`` at radius ``r`` (independent of ``theta``).

    In the orthonormal frames ``(d_r, d_theta / warp)`` the differential is
    ``diag(h'(r), warp(h(r)) / warp(r))``.
    """
    r = np.asarray(r, dtype=float)
    hr = smoothing_h(params, r)
    radial = smoothing_h_prime(params, r)
    angular = surface.warp(np.asarray(hr, dtype=float)) / surface.warp(r)
    return np.maximum(np.abs(radial), np.abs(angular))


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------

def _const(value):
    return lambda x: np.full(np.shape(x), value, dtype=float)


def flat_metric(start: float = 0.0, end: float = math.inf, label: str = "flat") -> Metric1D:
    return Metric1D(start, end, _const(1.0), _const(0.0), label)


def x4_metric(start: float = 1.0) -> Metric1D:
    return Metric1D(start, math.inf, lambda x: np.asarray(x, float) ** -4.0,
                    lambda x: -4.0 * np.asarray(x, float) ** -5.0, "x4_example")


def inv_x2_metric(start: float = 1.0) -> Metric1D:
    return Metric1D(start, math.inf, lambda x: np.asarray(x, float) ** -2.0,
                    lambda x: -2.0 * np.asarray(x, float) ** -3.0, "inv_x2_halfline")


def x2_metric(start: float = 1.0) -> Metric1D:
    return Metric1D(start, math.inf, lambda x: np.asarray(x, float) ** 2,
                    lambda x: 2.0 * np.asarray(x, float), "x2_halfline")


def exp_decay_metric(start: float = 1.0) -> Metric1D:
    return Metric1D(start, math.inf, lambda x: np.exp(-np.asarray(x, float)),
                    lambda x: -np.exp(-np.asarray(x, float)), "exp_decay_halfline")


def flat_cylinder(r_max: float = 2.0) -> WarpedSurface2D:
    return WarpedSurface2D(r_max, _const(1.0), _const(0.0), "flat_cylinder")


def flared_cylinder(r_max: float = 2.0) -> WarpedSurface2D:
    return WarpedSurface2D(r_max, lambda r: 1.0 + 0.5 * np.asarray(r, float),
                           _const(0.5), "flared_cylinder")


@dataclass(frozen=True)
class RegistryEntry:
    label: str
    kind: str  # "metric" or "surface"
    factory: Callable[[], Metric1D | WarpedSurface2D]
    expected_complete: bool
    expected_esa: bool | None
    basis: str
    description: str
    arclength: Callable[[float], float] | None = None

    def build(self):
        return self.factory()

    def as_row(self) -> dict:
        return {
            "label": self.label,
            "kind": self.kind,
            "expected_complete": self.expected_complete,
            "expected_esa": self.expected_esa,
            "basis": self.basis,
            "description": self.description,
        }


REGISTRY: dict[str, RegistryEntry] = {
    e.label: e
    for e in [
        RegistryEntry("flat_halfline", "metric", lambda: flat_metric(1.0, math.inf, "flat_halfline"),
                      True, True, "complete, so essentially self-adjoint",
                      "g = 1 on [1, inf)", arclength=lambda x: x),
        RegistryEntry("x4_example", "metric", x4_metric, False, False,
                      "finite length; bounded kernel function cosh(1/x - 1)",
                      "g = 1/x^4 on [1, inf)", arclength=lambda x: -1.0 / x),
        RegistryEntry("inv_x2_halfline", "metric", inv_x2_metric, True, True,
                      "length integral of 1/x diverges", "g = 1/x^2 on [1, inf)",
                      arclength=lambda x: math.log(x)),
        RegistryEntry("x2_halfline", "metric", x2_metric, True, True,
                      "length integral of x diverges", "g = x^2 on [1, inf)",
                      arclength=lambda x: 0.5 * x * x),
        RegistryEntry("exp_decay_halfline", "metric", exp_decay_metric, False, None,
                      "finite length 2 exp(-1/2); self-adjointness not pinned",
                      "g = exp(-x) on [1, inf)", arclength=lambda x: -2.0 * math.exp(-0.5 * x)),
        RegistryEntry("flat_interval", "metric", lambda: flat_metric(0.0, math.pi, "flat_interval"),
                      True, True, "compact interval", "g = 1 on [0, pi]",
                      arclength=lambda x: x),
        RegistryEntry("flat_segment_40", "metric",
                      lambda: flat_metric(0.0, 40.0, "flat_segment_40"),
                      True, True, "compact interval", "g = 1 on [0, 40]",
                      arclength=lambda x: x),
        RegistryEntry("flat_cylinder", "surface", flat_cylinder, True, True,
                      "boundary circle r = 0, flat product",
                      "[0, 2] x S^1, warp = 1"),
        RegistryEntry("flared_cylinder", "surface", flared_cylinder, True, True,
                      "boundary circle r = 0, monotone warp",
                      "[0, 2] x S^1, warp = 1 + r/2"),
    ]
}


def get_manifold(label: str):
    try:
        return REGISTRY[label].build()
    except KeyError:
        raise DomainError(f"unknown manifold label {label!r}") from None
