"""Heat and wave propagators and the distance-based checks built on them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import linalg as splinalg

from .discretize import NeumannOperator, normal_derivative
from .exceptions import DomainError, PreconditionError
from .geometry import geodesic_distance

CN_STEP_FACTOR = 0.5
COURANT = 0.9
FINITE_SPEED_COURANT = 1.0
DG_SLACK = 1.05
EPS_TAIL = 1e-6
MARGIN_CELLS = 3
SUPPORT_MASS_FRACTION = 1.0 - 1e-8
# Long runs on small grids switch to repeated squaring of the step matrix.
DENSE_SQUARING_MAX_NODES = 2048
SQUARING_STEP_RATIO = 4


# --------------------------------------------------------------------------
# Heat semigroup
# --------------------------------------------------------------------------

class _CrankNicolson:
    """Stepper for ``(W + dt/2 L) u+ = (W - dt/2 L) u``."""

    def __init__(self, op: NeumannOperator, dt: float):
        self.op = op
        self.dt = dt
        W = sparse.diags(op.weights)
        self.rhs = (W - 0.5 * dt * op.stiffness).tocsr()
        A = (W + 0.5 * dt * op.stiffness).tocsr()
        if op.grid.dim == 1:
            # Banded Cholesky keeps every intermediate sum sign-definite for
            # this M-matrix, so tiny tail values keep their relative accuracy.
            n = A.shape[0]
            ab = np.zeros((2, n))
            ab[0, 1:] = A.diagonal(1)
            ab[1] = A.diagonal()
            self._cho = linalg.cholesky_banded(ab, lower=False)
            self._solve = lambda b: linalg.cho_solve_banded((self._cho, False), b)
        else:
            lu = splinalg.splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                               options={"SymmetricMode": True})
            self._solve = lu.solve

    def step(self, u, n_steps: int = 1):
        for _ in range(n_steps):
            u = self._solve(self.rhs @ u)
        return u


def _cn_steps(op: NeumannOperator, t: float) -> int:
    return max(1, math.ceil(t * op.spectral_bound / CN_STEP_FACTOR))


def heat_apply(op: NeumannOperator, t: float, f, method: str = "crank-nicolson") -> np.ndarray:
    """Approximate ``exp(-t H) f``.

    ``method="crank-nicolson"`` uses equal substeps with
    ``dt * spectral_bound <= 0.5`` (on small grids with many steps the
    step count is rounded up to a power of two and the step matrix is
    squared); ``method="spectral"`` uses the dense
    eigendecomposition (reference path for small grids).  ``f`` may carry
    several columns.
    """
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    f = np.asarray(f, dtype=float)
    if method == "spectral":
        if f.ndim == 2:
            return np.column_stack([op.spectral_apply(lambda lam: np.exp(-t * lam), c)
                                    for c in f.T])
        return op.spectral_apply(lambda lam: np.exp(-t * lam), f)
    if method != "crank-nicolson":
        raise DomainError(f"unknown heat method {method!r}")
    n = _cn_steps(op, t)
    if op.grid.n_nodes <= DENSE_SQUARING_MAX_NODES and n > SQUARING_STEP_RATIO * op.grid.n_nodes:
        return heat_apply_squaring(op, [t], f)[0]
    return _CrankNicolson(op, t / n).step(f, n)




def _cn_step_count(op: NeumannOperator, t: float) -> tuple[int, float]:
    """Power-of-two step count ``2^j`` with ``dt * spectral_bound <= 0.5``."""
    j = max(0, math.ceil(math.log2(max(t * op.spectral_bound / CN_STEP_FACTOR, 1.0))))
    return j, t / 2.0 ** j


def _cn_step_matrix(op: NeumannOperator, dt: float) -> np.ndarray:
    # Both factors are entrywise nonnegative for dt * bound <= 0.5, so
    # products of powers are free of cancellation.
    n = op.grid.n_nodes
    W = sparse.diags(op.weights)
    B = (W - 0.5 * dt * op.stiffness).toarray()
    A = (W + 0.5 * dt * op.stiffness).tocsr()
    if op.grid.dim == 1:
        ab = np.zeros((2, n))
        ab[0, 1:] = A.diagonal(1)
        ab[1] = A.diagonal()
        cho = linalg.cholesky_banded(ab, lower=False)
        P = linalg.cho_solve_banded((cho, False), B)
    else:
        P = splinalg.splu(A.tocsc()).solve(B)
    np.maximum(P, 0.0, out=P)
    return P


def heat_apply_squaring(op: NeumannOperator, t_list, f) -> list[np.ndarray]:
    """Crank-Nicolson with ``2^j`` equal substeps, evaluated by repeated squaring.

    Gives the same propagator as :func:`heat_apply` with a power-of-two
    step count, but in ``O(j)`` dense products.  Times that share a step
    size (for example ``t0 * 2^k``) share one squaring chain.
    """
    if op.grid.n_nodes > DENSE_SQUARING_MAX_NODES:
        raise DomainError("grid too large for dense squaring")
    f = np.asarray(f, dtype=float)
    plans = {}
    for i, t in enumerate(t_list):
        if not t > 0:
            raise DomainError(f"t must be positive, got {t}")
        j, dt = _cn_step_count(op, float(t))
        plans.setdefault(dt, []).append((j, i))
    out = [None] * len(t_list)
    for dt, jobs in plans.items():
        jobs.sort()
        P = _cn_step_matrix(op, dt)
        level = 0
        for j, i in jobs:
            while level < j:
                P = P @ P
                level += 1
            out[i] = P @ f
    return out


def heat_trajectory(op: NeumannOperator, t_list, f) -> list[np.ndarray]:
    """``exp(-t H) f`` for an increasing list of times, marching once."""
    t_list = [float(t) for t in t_list]
    if any(b <= a for a, b in zip(t_list, t_list[1:])) or t_list[0] <= 0:
        raise DomainError("t_list must be positive and strictly increasing")
    out = []
    u = np.asarray(f, dtype=float)
    t_prev = 0.0
    for t in t_list:
        u = heat_apply(op, t - t_prev, u)
        out.append(u)
        t_prev = t
    return out


def heat_boundary_flux(op: NeumannOperator, t: float, f) -> np.ndarray:
    """Outward normal derivative of ``exp(-t H) f`` at the boundary nodes."""
    return normal_derivative(op.grid, heat_apply(op, t, f))


# --------------------------------------------------------------------------
# Wave propagator
# --------------------------------------------------------------------------

def max_wave_step(op: NeumannOperator, courant: float = COURANT) -> float:
    return courant * 2.0 / math.sqrt(op.spectral_bound)


def wave_cos_apply(op: NeumannOperator, s: float, f, method: str = "leapfrog",
                   courant: float = COURANT, return_energy: bool = False):
    """Approximate ``cos(s sqrt(H)) f`` (zero initial velocity).

    Leapfrog ``u+ = 2u - u- - dt^2 H u`` started with
    ``u1 = u0 - dt^2/2 H u0``; ``dt`` is the largest step not exceeding
    ``courant * 2 / sqrt(spectral_bound)`` that divides ``s``.  With
    ``return_energy`` the discrete energies
    ``|(u_{k+1}-u_k)/dt|^2 + <H u_k, u_{k+1}>`` are returned as well.
    """
    if s < 0:
        raise DomainError(f"s must be nonnegative, got {s}")
    f = np.asarray(f, dtype=float)
    if method == "spectral":
        out = op.spectral_apply(lambda lam: np.cos(s * np.sqrt(lam)), f)
        return (out, np.array([])) if return_energy else out
    if method != "leapfrog":
        raise DomainError(f"unknown wave method {method!r}")
    if s == 0:
        return (f.copy(), np.array([])) if return_energy else f.copy()
    n = max(1, math.ceil(s / max_wave_step(op, courant) - 1e-12))
    dt = s / n
    u_prev = f
    u = f - 0.5 * dt * dt * op.apply(f)
    energies = []
    if return_energy:
        energies.append(_wave_energy(op, u_prev, u, dt))
    for _ in range(n - 1):
        u_prev, u = u, 2.0 * u - u_prev - dt * dt * op.apply(u)
        if return_energy:
            energies.append(_wave_energy(op, u_prev, u, dt))
    return (u, np.array(energies)) if return_energy else u


def _wave_energy(op, u0, u1, dt):
    v = (u1 - u0) / dt
    return op.inner(v, v) + op.inner(op.apply(u0), u1)


# --------------------------------------------------------------------------
# Test functions on sets
# --------------------------------------------------------------------------

def _arclength_at(grid, x: float) -> float:
    m = grid.manifold
    return geodesic_distance(m, m.domain_start, x) if x > m.domain_start else 0.0


def smoothed_indicator(grid, interval, taper: float | None = None) -> np.ndarray:
    """Indicator of ``[a, b]`` with a one-cell cosine taper, unit weighted L2 norm.

    Tapering happens inside the interval and only at ends interior to the
    gridded region, so the support stays within ``[a, b]``.
    """
    if grid.dim != 1:
        raise DomainError("set indicators are implemented for 1D grids")
    a, b = interval
    if not a < b:
        raise PreconditionError(f"empty interval {interval}")
    taper = grid.h_arc if taper is None else taper
    s = grid.normal_coordinate
    sa, sb = _arclength_at(grid, a), _arclength_at(grid, b)
    x = grid.nodes
    inside = (x >= a) & (x <= b)
    v = np.ones_like(s)
    if a > x[0]:
        v = np.minimum(v, np.clip((s - sa) / taper, 0.0, 1.0))
    if b < x[-1]:
        v = np.minimum(v, np.clip((sb - s) / taper, 0.0, 1.0))
    f = np.where(inside, 0.5 * (1.0 - np.cos(math.pi * v)), 0.0)
    norm = math.sqrt(np.sum(grid.volume_weights * f * f))
    if norm == 0:
        raise PreconditionError(f"interval {interval} contains no grid support")
    return f / norm


def set_distance(grid, U1, U2) -> float:
    """Geodesic distance between two disjoint coordinate intervals."""
    (a1, b1), (a2, b2) = sorted([tuple(U1), tuple(U2)])
    if not b1 < a2:
        raise PreconditionError(f"sets {U1} and {U2} overlap")
    return geodesic_distance(grid.manifold, b1, a2)


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

@dataclass
class PropagationSample:
    pair: int
    time: float
    inner_product: float
    bound: float
    ratio: float
    passed: bool


@dataclass
class PropagationReport:
    kind: str
    pairs: list  # (U1, U2, rho)
    samples: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    threshold: float = 0.0

    @property
    def max_violation_ratio(self) -> float:
        return max((s.ratio for s in self.samples), default=0.0)

    @property
    def n_violations(self) -> int:
        return sum(not s.passed for s in self.samples)

    @property
    def passed(self) -> bool:
        return self.n_violations == 0 and all(self.extras.get("pair_passed", [True]))

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "pairs": [{"U1": list(p[0]), "U2": list(p[1]), "rho": p[2]} for p in self.pairs],
            "threshold": self.threshold,
            "max_violation_ratio": self.max_violation_ratio,
            "n_violations": self.n_violations,
            "passed": self.passed,
            "samples": [asdict(s) for s in self.samples],
            "extras": self.extras,
        }

    def csv_rows(self):
        yield ["pair", "t_or_s", "inner_product", "bound", "ratio", "pass"]
        for s in self.samples:
            yield [s.pair, repr(s.time), repr(s.inner_product), repr(s.bound), repr(s.ratio),
                   int(s.passed)]


def davies_gaffney_t_min(grid) -> float:
    return (2.0 * grid.h_arc) ** 2


def davies_gaffney_check(op: NeumannOperator, pairs, t_list, slack: float = DG_SLACK,
                         method: str = "crank-nicolson") -> PropagationReport:
    """Check ``|<exp(-tH) f1, f2>| <= slack exp(-rho^2/4t) |f1| |f2|``.

    ``pairs`` is a list of disjoint coordinate intervals ``(U1, U2)``;
    ``f_i`` are smoothed normalized indicators.  Times below
    ``(2 h_arc)^2`` are rejected.  Ratios are formed in log space so that
    underflowing bounds are still compared correctly.
    """
    grid = op.grid
    t_list = sorted(float(t) for t in t_list)
    t_min = davies_gaffney_t_min(grid)
    if t_list[0] < t_min:
        raise PreconditionError(f"t={t_list[0]} below t_min={t_min:.3g}")
    pair_info, F1, F2 = [], [], []
    for U1, U2 in pairs:
        rho = set_distance(grid, U1, U2)
        pair_info.append((tuple(U1), tuple(U2), rho))
        F1.append(smoothed_indicator(grid, U1))
        F2.append(smoothed_indicator(grid, U2))
    F1 = np.column_stack(F1)
    report = PropagationReport("davies_gaffney", pair_info, threshold=slack,
                               extras={"t_min": t_min, "method": method})
    if method == "crank-nicolson":
        if grid.n_nodes <= DENSE_SQUARING_MAX_NODES:
            evolved = heat_apply_squaring(op, t_list, F1)
        else:
            evolved = heat_trajectory(op, t_list, F1)
    else:
        evolved = [heat_apply(op, t, F1, method=method) for t in t_list]
    w = op.weights
    for t, U in zip(t_list, evolved):
        for k, (_, _, rho) in enumerate(pair_info):
            ip = float(np.sum(w * U[:, k] * F2[k]))
            log_gauss = -rho * rho / (4.0 * t)
            nf = op.norm(F1[:, k]) * op.norm(F2[k])
            bound = slack * math.exp(log_gauss) * nf
            if ip == 0.0:
                ratio = 0.0
            else:
                expo = math.log(abs(ip)) - log_gauss - math.log(nf)
                ratio = math.exp(min(expo, 700.0))
            report.samples.append(PropagationSample(k, t, ip, bound, ratio, ratio <= slack))
    return report


def _energy_radius(grid, u, center_s: float) -> float:
    s = grid.normal_coordinate
    dist = np.abs(s - center_s)
    order = np.argsort(dist, kind="stable")
    mass = np.cumsum((grid.volume_weights * u * u)[order])
    total = mass[-1]
    if total == 0:
        return 0.0
    k = int(np.searchsorted(mass, SUPPORT_MASS_FRACTION * total))
    return float(dist[order][min(k, len(order) - 1)])


def finite_speed_check(op: NeumannOperator, pairs, s_list=None, eps_tail: float = EPS_TAIL,
                       margin: float | None = None, courant: float = FINITE_SPEED_COURANT,
                       n_samples: int = 12, bracket_arrival: bool = True) -> PropagationReport:
    """Check that ``<cos(s sqrt H) f1, f2>`` vanishes before the front arrives.

    For every pair and every ``s <= rho - margin`` the inner product must stay
    below ``eps_tail |f1| |f2|``; the energy radius of ``cos(s sqrt H) f1``
    around the centre of ``U1`` must stay within ``r + s + margin``.  The
    arrival time (first ``s`` with an inner product above threshold) is
    bracketed by bisection and must lie within ``margin`` of ``rho``.
    """
    grid = op.grid
    margin = MARGIN_CELLS * grid.h_arc if margin is None else margin
    report = PropagationReport("finite_speed", [], threshold=eps_tail,
                               extras={"margin": margin, "courant": courant,
                                       "arrival": [], "support": [], "pair_passed": []})
    for k, (U1, U2) in enumerate(pairs):
        rho = set_distance(grid, U1, U2)
        report.pairs.append((tuple(U1), tuple(U2), rho))
        f1 = smoothed_indicator(grid, U1)
        f2 = smoothed_indicator(grid, U2)
        nf = op.norm(f1) * op.norm(f2)
        s_max = rho - margin
        if s_list is None:
            ss = np.linspace(0.0, max(s_max, 0.0), n_samples)
        else:
            ss = np.asarray(s_list, dtype=float)
            if np.any(ss > s_max + 1e-12):
                raise PreconditionError(f"s beyond rho - margin = {s_max:.6g}")
        sa, sb = _arclength_at(grid, U1[0]), _arclength_at(grid, U1[1])
        centre, radius = 0.5 * (sa + sb), 0.5 * (sb - sa)
        support_ok = True
        support_rows = []
        for s in ss:
            u = wave_cos_apply(op, float(s), f1, courant=courant)
            ip = op.inner(u, f2)
            ratio = abs(ip) / nf
            report.samples.append(PropagationSample(k, float(s), ip, eps_tail * nf,
                                                    ratio / eps_tail, ratio <= eps_tail))
            R = _energy_radius(grid, u, centre)
            ok = R <= radius + s + margin
            support_ok &= ok
            support_rows.append({"s": float(s), "radius": R, "limit": radius + s + margin,
                                 "pass": bool(ok)})
        report.extras["support"].append(support_rows)
        arrival_ok = True
        if bracket_arrival:
            arrival = _arrival_time(op, f1, f2, nf, rho, margin, eps_tail, courant)
            arrival_ok = arrival is not None and abs(arrival - rho) <= margin
            report.extras["arrival"].append({"rho": rho, "arrival": arrival,
                                             "pass": bool(arrival_ok)})
        report.extras["pair_passed"].append(bool(support_ok and arrival_ok))
    return report


def _arrival_time(op, f1, f2, nf, rho, margin, eps_tail, courant, iters: int = 30):
    def arrived(s):
        u = wave_cos_apply(op, s, f1, courant=courant)
        return abs(op.inner(u, f2)) > eps_tail * nf

    lo, hi = max(rho - margin, 0.0), rho + margin
    if arrived(lo) or not arrived(hi):
        return None
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if arrived(mid):
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-3 * op.grid.h_arc:
            break
    return 0.5 * (lo + hi)
