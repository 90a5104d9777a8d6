"""Scenario runner: ``neumannlb verify | classify | list``.

A config file is TOML.  A single scenario is written at top level; several
scenarios go into ``[[scenario]]`` tables::

    seed = 7
    [output]
    dir = "report"
    formats = ["json", "csv"]

    [[scenario]]
    name = "x4"
    manifold = "x4_example"
    suites = ["distance", "completeness", "spectral"]
    [scenario.grid]
    n_cells = 500
    truncation = 100.0
    grading = "uniform-in-arclength"

Exit status: 0 all checks pass, 1 a check failed, 2 config error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import re
import sys
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from . import cutoffs as co
from . import propagators as pr
from . import spectral as sp
from .discretize import (GRADINGS, assemble_neumann, build_grid, leibniz_residual)
from .exceptions import ConfigError, NeumannLBError, ResolutionError
from .geometry import (REGISTRY, Metric1D, SmoothingParams, geodesic_distance,
                       is_complete)

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

REPORT_VERSION = 1
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

SUITES = ("distance", "completeness", "spectral", "davies_gaffney", "finite_speed", "cutoffs",
          "density", "interpolation", "leibniz", "boundary_flux")
FORMATS = ("json", "csv")

DEFAULT_TOLERANCES = {
    "distance": 1e-9,
    "dijkstra_relative": 0.02,
    "dg_slack": pr.DG_SLACK,
    "eps_tail": pr.EPS_TAIL,
    "margin_cells": float(pr.MARGIN_CELLS),
    "bc_gap": 1e-3,
    "bc_stable_relative": 0.05,
    "bc_gap_floor": 0.1,
    "flux": 1e-10,
    "gradient_h_factor": 5.0,
    "gradient_inflation": 6.0,
    "density_fraction": 1e-3,
    "interpolation_allowance": co.INTERPOLATION_ALLOWANCE,
    "equality_band": 0.02,
    "leibniz_order": 2.0,
    "leibniz_order_band": 0.3,
    "heat_flux_fraction": 0.02,
}

REFERENCES = {
    "distance": "geodesic distance is the arclength integral of sqrt(g)",
    "completeness": "completeness of a 1D end is divergence of its length integral",
    "spectral": "complete implies essential self-adjointness of the Neumann Laplacian",
    "davies_gaffney": "heat semigroup obeys the Gaussian off-diagonal bound with C=1, a=0",
    "finite_speed": "wave propagator has unit propagation speed in the metric",
    "cutoffs": "complete manifolds carry first order Neumann cut-off sequences",
    "density": "Neumann functions are dense in W^{1,p}",
    "interpolation": "|grad f|_p^2 <= (p-1)^-1 |Delta f|_p |f|_p on Neumann functions",
    "leibniz": "Delta(f chi) = chi Delta f + f Delta chi + 2 (grad f, grad chi)",
    "boundary_flux": "heat evolution satisfies the Neumann condition for t > 0",
}

SCENARIO_KEYS = {"name", "manifold", "grid", "suites", "advisory", "tolerances", "params"}
GRID_KEYS = {"n_cells", "truncation", "grading", "n_theta"}
PARAM_KEYS = {"pairs", "t_list", "s_list", "truncations", "h_arc", "n_list", "delta", "p_list",
              "delta_list", "n_random", "leibniz_levels"}


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------

@dataclass
class ScenarioConfig:
    name: str
    manifold: str
    suites: tuple
    grid: dict = field(default_factory=dict)
    advisory: tuple = ()
    tolerances: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def tol(self, key: str) -> float:
        return float(self.tolerances.get(key, DEFAULT_TOLERANCES[key]))

    def echo(self) -> dict:
        return {"name": self.name, "manifold": self.manifold, "suites": list(self.suites),
                "grid": self.grid, "advisory": list(self.advisory),
                "tolerances": self.tolerances, "params": self.params}


@dataclass
class RunConfig:
    scenarios: list
    seed: int = 0
    out_dir: Path = Path("report")
    formats: tuple = FORMATS

    def echo(self) -> dict:
        return {"seed": self.seed, "formats": list(self.formats),
                "scenarios": [s.echo() for s in self.scenarios]}


def _locate(text: str, token) -> str:
    """``line L, column C`` of the first occurrence of ``token`` in ``text``."""
    for pattern in (rf'"{re.escape(str(token))}"', rf"\b{re.escape(str(token))}\b"):
        m = re.search(pattern, text)
        if m:
            line = text.count("\n", 0, m.start()) + 1
            col = m.start() - (text.rfind("\n", 0, m.start()) + 1) + 1
            return f"line {line}, column {col}"
    return "unknown position"


def _fail(path, text, token, msg):
    raise ConfigError(f"{path}: {_locate(text, token)}: {msg}")


def _check_keys(path, text, table: dict, allowed: set, where: str):
    for key in table:
        if key not in allowed:
            _fail(path, text, key, f"unknown key {key!r} in {where}")


def _parse_scenario(path, text, raw: dict, index: int) -> ScenarioConfig:
    _check_keys(path, text, raw, SCENARIO_KEYS, "scenario")
    label = raw.get("manifold")
    if not isinstance(label, str):
        _fail(path, text, "manifold", "scenario needs a manifold label")
    if label not in REGISTRY:
        _fail(path, text, label, f"unknown manifold label {label!r}")
    suites = raw.get("suites")
    if not isinstance(suites, list) or not suites:
        _fail(path, text, "suites", "suites must be a non-empty list")
    for s in suites:
        if s not in SUITES:
            _fail(path, text, s, f"unknown suite {s!r}; expected a subset of {list(SUITES)}")
    advisory = raw.get("advisory", [])
    for s in advisory:
        if s not in SUITES:
            _fail(path, text, s, f"unknown advisory suite {s!r}")
    grid = dict(raw.get("grid", {}))
    _check_keys(path, text, grid, GRID_KEYS, "grid")
    if "grading" in grid and grid["grading"] not in GRADINGS:
        _fail(path, text, grid["grading"], f"unknown grading {grid['grading']!r}")
    if "n_cells" in grid and (not isinstance(grid["n_cells"], int) or grid["n_cells"] < 8):
        _fail(path, text, "n_cells", "n_cells must be an integer >= 8")
    tols = dict(raw.get("tolerances", {}))
    _check_keys(path, text, tols, set(DEFAULT_TOLERANCES), "tolerances")
    for k, v in tols.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            _fail(path, text, k, f"tolerance {k!r} must be a number")
    params = dict(raw.get("params", {}))
    _check_keys(path, text, params, PARAM_KEYS, "params")
    name = raw.get("name", f"s{index}_{label}")
    if not isinstance(name, str) or not re.fullmatch(r"[A-Za-z0-9_.-]+", name):
        _fail(path, text, "name", "scenario name must match [A-Za-z0-9_.-]+")
    return ScenarioConfig(name, label, tuple(suites), grid, tuple(advisory), tols, params)


def parse_config(text: str, path: str = "<config>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    top = {"seed", "output", "scenario"} | SCENARIO_KEYS
    _check_keys(path, text, raw, top, "top level")
    if "scenario" in raw:
        blocks = raw["scenario"]
        if not isinstance(blocks, list) or not blocks:
            _fail(path, text, "scenario", "scenario must be an array of tables")
        stray = SCENARIO_KEYS & raw.keys()
        if stray:
            _fail(path, text, sorted(stray)[0], "mix of top-level and [[scenario]] entries")
    else:
        blocks = [{k: v for k, v in raw.items() if k in SCENARIO_KEYS}]
    scenarios = [_parse_scenario(path, text, b, i) for i, b in enumerate(blocks)]
    names = [s.name for s in scenarios]
    if len(set(names)) != len(names):
        _fail(path, text, "name", "scenario names must be unique")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        _fail(path, text, "seed", "seed must be a nonnegative integer")
    out = raw.get("output", {})
    _check_keys(path, text, out, {"dir", "formats"}, "output")
    formats = tuple(out.get("formats", FORMATS))
    for f in formats:
        if f not in FORMATS:
            _fail(path, text, f, f"unknown format {f!r}")
    return RunConfig(scenarios, seed, Path(out.get("dir", "report")), formats)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    return parse_config(text, str(path))


# --------------------------------------------------------------------------
# Checks and reports
# --------------------------------------------------------------------------

@dataclass
class Check:
    name: str
    status: str  # pass, fail, indeterminate, info
    observed: object = None
    bound: object = None
    tolerance: object = None
    details: dict = field(default_factory=dict)

    @classmethod
    def compare(cls, name, observed, bound, ok, tolerance=None, **details):
        return cls(name, "pass" if ok else "fail", observed, bound, tolerance, details)


@dataclass
class SuiteResult:
    scenario: str
    suite: str
    checks: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)
    advisory: bool = False
    error: str | None = None

    @property
    def status(self) -> str:
        if self.error:
            return "error"
        states = {c.status for c in self.checks}
        if "fail" in states:
            return "fail"
        if "indeterminate" in states and not self.advisory:
            return "indeterminate"
        return "pass"

    def as_dict(self) -> dict:
        return {
            "scenario": self.scenario, "suite": self.suite, "status": self.status,
            "advisory": self.advisory, "error": self.error, "artifacts": self.artifacts,
            "checks": [{"name": c.name, "status": c.status, "observed": c.observed,
                        "bound": c.bound, "tolerance": c.tolerance,
                        "reference": REFERENCES[self.suite], "details": c.details}
                       for c in self.checks],
        }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, Path):
        return obj.as_posix()
    return obj


def dumps_report(report: dict) -> str:
    return json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"


# --------------------------------------------------------------------------
# Scenario context
# --------------------------------------------------------------------------

class Scenario:
    """Lazily built manifold, grid and operator for one scenario."""

    def __init__(self, cfg: ScenarioConfig, seed: int, index: int, out_dir: Path, formats):
        self.cfg = cfg
        self.entry = REGISTRY[cfg.manifold]
        self.manifold = self.entry.build()
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        self.out_dir = out_dir
        self.formats = formats

    @property
    def is_1d(self) -> bool:
        return isinstance(self.manifold, Metric1D)

    def grid_kwargs(self) -> dict:
        g = self.cfg.grid
        kw = {"n_cells": int(g.get("n_cells", 256)),
              "grading": g.get("grading", "uniform-in-arclength" if self.is_1d
                               else "uniform-in-coordinate")}
        if self.is_1d:
            if self.manifold.has_open_end:
                kw["truncation"] = float(g.get("truncation", 100.0))
        else:
            kw["n_theta"] = int(g.get("n_theta", 64))
        return kw

    @cached_property
    def grid(self):
        return build_grid(self.manifold, **self.grid_kwargs())

    @cached_property
    def op(self):
        return assemble_neumann(self.grid)

    def write_csv(self, result: SuiteResult, check: str, rows) -> None:
        if "csv" not in self.formats:
            return
        rel = Path(f"{self.cfg.name}__{result.suite}__{check}.csv")
        path = self.out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in rows:
                w.writerow([_csv_cell(v) for v in row])
        result.artifacts.append(rel.as_posix())


def _csv_cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _not_applicable(result: SuiteResult, why: str):
    result.checks.append(Check("applicability", "info", details={"reason": why}))


# --------------------------------------------------------------------------
# Suites
# --------------------------------------------------------------------------

def _sample_points(m: Metric1D, end: float) -> list[float]:
    a = m.domain_start
    pts = [a, a + 0.5 * (end - a) ** 0.5 if end > a + 1 else a + 0.25 * (end - a)]
    pts += [a + (end - a) * f for f in (0.1, 0.5, 1.0)]
    return sorted(set(float(p) for p in pts))


def suite_distance(sc: Scenario, res: SuiteResult):
    m = sc.manifold
    if sc.is_1d:
        end = sc.grid.nodes[-1]
        oracle = sc.entry.arclength
        pts = _sample_points(m, end)
        if m.label == "x4_example":
            pts = sorted(set(pts) | {1.0, 2.0})
        errs, rows = [], [["p", "q", "distance", "oracle", "error"]]
        for p in pts:
            for q in pts:
                if q <= p:
                    continue
                d = geodesic_distance(m, p, q)
                o = abs(oracle(q) - oracle(p)) if oracle else d
                err = abs(d - o) / max(1.0, abs(o))
                errs.append(err)
                rows.append([p, q, d, o, err])
        tol = sc.cfg.tol("distance")
        res.checks.append(Check.compare("arclength_oracle", max(errs), tol, max(errs) <= tol, tol,
                                        pairs=len(errs)))
        if m.label == "x4_example":
            d12 = geodesic_distance(m, 1.0, 2.0)
            res.checks.append(Check.compare("x4_distance_1_2", d12, 0.5, abs(d12 - 0.5) <= tol,
                                            tol))
        sc.write_csv(res, "pairs", rows)
        return
    g = sc.grid
    d = co.surface_distance(g)
    r, th = g.nodes[:, 0], g.nodes[:, 1]
    far = d > 5 * g.h_arc
    if m.label == "flat_cylinder":
        dth = np.minimum(th, 2 * math.pi - th)
        exact = np.sqrt(r ** 2 + dth ** 2)
        label = "dijkstra_vs_flat_formula"
    else:
        # Radial segments from the base point are geodesics of any warped product.
        far &= th == 0.0
        exact = r
        label = "dijkstra_radial"
    rel = float(np.max(np.abs(d[far] - exact[far]) / exact[far]))
    tol = sc.cfg.tol("dijkstra_relative")
    res.checks.append(Check.compare(label, rel, tol, rel <= tol, tol))


def suite_completeness(sc: Scenario, res: SuiteResult):
    if not sc.is_1d:
        _not_applicable(res, "surface models are product collars over a complete base")
        return
    v = is_complete(sc.manifold)
    expected = sc.entry.expected_complete
    status = ("indeterminate" if v.complete is None
              else "pass" if v.complete == expected else "fail")
    res.checks.append(Check("completeness_verdict", status, v.verdict,
                            "complete" if expected else "incomplete", details=v.as_dict()))
    sc.write_csv(res, "partial_integrals",
                 [["cutoff", "partial_integral"]] + [list(t) for t in
                                                     zip(v.cutoffs, v.partial_integrals)])


def _anchors(m: Metric1D):
    a = m.domain_start
    return (a + 1.0, a + 2.0)


def suite_spectral(sc: Scenario, res: SuiteResult):
    if not sc.is_1d:
        _not_applicable(res, "deficiency analysis is one-dimensional")
        return
    m = sc.manifold
    a1, a2 = _anchors(m) if m.has_open_end else (None, None)
    rep = sp.deficiency_indices(m, anchor=a1) if m.has_open_end else sp.deficiency_indices(m)
    expected = sc.entry.expected_esa
    esa = rep.essentially_selfadjoint
    if esa is None:
        status = "indeterminate"
    elif expected is None:
        status = "info"
    else:
        status = "pass" if esa == expected else "fail"
    res.checks.append(Check("essentially_selfadjoint", status, esa, expected,
                            details=rep.as_dict()))
    if m.has_open_end:
        plus, minus = rep.evidence["+i"].classification, rep.evidence["-i"].classification
        res.checks.append(Check.compare("conjugate_symmetry", [plus, minus], "equal",
                                        plus == minus))
        other = sp.weyl_classify(m, 1j, anchor=a2).classification
        res.checks.append(Check.compare("anchor_invariance", [plus, other], "equal",
                                        plus == other, anchors=[a1, a2]))
        sc.write_csv(res, "tail_norms", rep.csv_rows())
    complete = is_complete(m).complete
    if complete:
        res.checks.append(Check.compare("complete_implies_esa", esa, True, esa is True))
    truncs = sc.cfg.params.get("truncations")
    if truncs and m.has_open_end:
        kw = ({"h_arc": float(sc.cfg.params["h_arc"])} if "h_arc" in sc.cfg.params
              else {"n_cells": sc.grid_kwargs()["n_cells"]})
        table = sp.bc_sensitivity(m, truncs, k_eigs=4, **kw)
        sc.write_csv(res, "bc_sensitivity", table.csv_rows())
        last = table.rows[-1].gaps[1:4]
        if expected is True or (expected is None and complete):
            tol = sc.cfg.tol("bc_gap")
            res.checks.append(Check.compare("bc_gaps_vanish", max(last), tol, max(last) < tol,
                                            tol, gaps=last))
        elif expected is False:
            g1 = table.gaps(1)
            change = abs(g1[-1] - g1[-2]) / g1[-1]
            floor = sc.cfg.tol("bc_gap_floor")
            ok = change <= sc.cfg.tol("bc_stable_relative") and g1[-1] > floor
            res.checks.append(Check.compare("bc_gap_persists", float(g1[-1]), floor, ok,
                                            sc.cfg.tol("bc_stable_relative"),
                                            relative_change=change, gaps=g1))


def default_pairs(grid) -> list:
    """Five disjoint interval pairs placed by arclength fraction of the gridded region."""
    s = grid.normal_coordinate
    ell = s[-1]
    fr = [((0.0, 0.025), (0.5, 0.525)), ((0.0, 0.025), (0.125, 0.15)),
          ((0.25, 0.3), (0.375, 0.4)), ((0.075, 0.1), (0.1125, 0.15)),
          ((0.75, 0.775), (0.95, 1.0))]
    to_x = lambda f: float(np.interp(f * ell, s, grid.nodes))  # noqa: E731
    return [((to_x(a), to_x(b)), (to_x(c), to_x(d))) for (a, b), (c, d) in fr]


def _pairs(sc: Scenario):
    raw = sc.cfg.params.get("pairs")
    if raw is None:
        return default_pairs(sc.grid)
    return [(tuple(map(float, u1)), tuple(map(float, u2))) for u1, u2 in raw]


def default_t_list(grid, pairs) -> list:
    """``t0 * 2^k`` for ``k = 0..7``; ``t0`` clears both ``10 t_min`` and ``rho_max h_arc``."""
    rho = max(pr.set_distance(grid, u1, u2) for u1, u2 in pairs)
    t0 = max(10.0 * pr.davies_gaffney_t_min(grid), rho * grid.h_arc)
    return [t0 * 2.0 ** k for k in range(8)]


def suite_davies_gaffney(sc: Scenario, res: SuiteResult):
    if not sc.is_1d:
        _not_applicable(res, "set pairs are defined for 1D models")
        return
    pairs = _pairs(sc)
    t_list = sc.cfg.params.get("t_list") or default_t_list(sc.grid, pairs)
    rep = pr.davies_gaffney_check(sc.op, pairs, t_list, slack=sc.cfg.tol("dg_slack"))
    span = math.log10(max(t_list) / min(t_list))
    res.checks.append(Check.compare("gaussian_bound", rep.max_violation_ratio, rep.threshold,
                                    rep.passed, rep.threshold, violations=rep.n_violations,
                                    pairs=len(pairs), t_decades=span,
                                    t_min=pr.davies_gaffney_t_min(sc.grid)))
    sc.write_csv(res, "samples", rep.csv_rows())


def suite_finite_speed(sc: Scenario, res: SuiteResult):
    if not sc.is_1d:
        _not_applicable(res, "set pairs are defined for 1D models")
        return
    pairs = _pairs(sc)
    margin = sc.cfg.tol("margin_cells") * sc.grid.h_arc
    rep = pr.finite_speed_check(sc.op, pairs, s_list=sc.cfg.params.get("s_list"),
                                eps_tail=sc.cfg.tol("eps_tail"), margin=margin)
    tail_ok = rep.n_violations == 0
    res.checks.append(Check.compare("tail_below_threshold", rep.max_violation_ratio * rep.threshold,
                                    rep.threshold, tail_ok, rep.threshold))
    arr = rep.extras["arrival"]
    res.checks.append(Check.compare("arrival_brackets_rho",
                                    [a["arrival"] for a in arr], [a["rho"] for a in arr],
                                    all(a["pass"] for a in arr), margin))
    sup = [row for rows in rep.extras["support"] for row in rows]
    res.checks.append(Check.compare("support_growth", max(r["radius"] - r["limit"] for r in sup),
                                    0.0, all(r["pass"] for r in sup), margin))
    sc.write_csv(res, "samples", rep.csv_rows())


def _n_list(sc: Scenario, diameter: float):
    if "n_list" in sc.cfg.params:
        return [float(n) for n in sc.cfg.params["n_list"]]
    out, n = [], 1.0
    while True:
        out.append(n)
        if n >= diameter or len(out) >= 12:
            return out
        n *= 2.0


def suite_cutoffs(sc: Scenario, res: SuiteResult):
    g = sc.grid
    dist = co.base_distance(g)
    diameter = float(dist.max())
    ns = _n_list(sc, diameter)
    seqs = [co.build_first_order_cutoffs(g, n) for n in ns]
    h = g.h_arc
    in_range = all(c.chi.min() >= 0.0 and c.chi.max() <= 1.0 for c in seqs)
    res.checks.append(Check.compare("range_0_1", in_range, True, in_range))
    ratios = [c.sup_gradient / ((2.0 / c.n) * (1.0 + sc.cfg.tol("gradient_h_factor") * h))
              for c in seqs]
    res.checks.append(Check.compare("sup_gradient", max(ratios), 1.0, max(ratios) <= 1.0,
                                    sc.cfg.tol("gradient_h_factor"),
                                    sup_gradient=[c.sup_gradient for c in seqs]))
    complete = sc.entry.expected_complete
    if complete and (not sc.is_1d or sc.manifold.has_open_end):
        radii = [diameter / 8, diameter / 4, diameter / 2]
        first = []
        for R in radii:
            K = dist <= R
            hit = next((c.n for c in seqs if np.all(c.plateau[K])), None)
            first.append(hit)
        res.checks.append(Check.compare("plateau_exhausts_compacta", first, radii,
                                        all(f is not None for f in first)))
    elif not complete:
        c2 = co.build_first_order_cutoffs(g, 2)
        ok = bool(np.all(c2.chi == 1.0))
        res.checks.append(Check.compare("finite_diameter_saturation", ok, True, ok,
                                        diameter=diameter))
    delta = float(sc.cfg.params.get("delta", 0.5))
    try:
        neu = [co.neumannize(g, c, SmoothingParams(delta)) for c in seqs]
    except ResolutionError as exc:
        res.checks.append(Check("neumannize", "fail", details={"error": str(exc)}))
        return
    flux = max(c.boundary_flux for c in neu)
    ftol = sc.cfg.tol("flux")
    res.checks.append(Check.compare("neumann_flux", flux, ftol, flux <= ftol, ftol))
    infl = max(c.checks["gradient_inflation"] for c in neu)
    bound = sc.cfg.tol("gradient_inflation") * (1.0 + sc.cfg.tol("gradient_h_factor") * h)
    res.checks.append(Check.compare("gradient_inflation", infl, bound, infl <= bound))
    defect = max(c.checks["outside_collar_defect"] for c in neu)
    res.checks.append(Check.compare("identity_outside_collar", defect, 0.0, defect == 0.0))
    kept = all(c.checks["plateau_retained"] for c in neu)
    res.checks.append(Check.compare("plateau_retained", kept, True, kept))
    in_range = all(c.chi.min() >= 0.0 and c.chi.max() <= 1.0 for c in neu)
    res.checks.append(Check.compare("neumannized_range_0_1", in_range, True, in_range))
    sc.write_csv(res, "sequence", co.summary_csv_rows(seqs))
    sc.write_csv(res, "neumannized", co.summary_csv_rows(neu))


DEFAULT_DELTAS = (0.4, 0.1, 1e-2, 1e-4, 1e-6, 1e-8, 1e-10, 1e-12, 1e-14)


def cylinder_test_function(r, theta):
    return r * np.cos(theta)


def suite_density(sc: Scenario, res: SuiteResult):
    if sc.is_1d:
        _not_applicable(res, "density experiment runs on surface models")
        return
    deltas = [float(d) for d in sc.cfg.params.get("delta_list", DEFAULT_DELTAS)]
    g = co.density_grid(sc.manifold, min(deltas))
    frac = sc.cfg.tol("density_fraction")
    ftol = sc.cfg.tol("flux")
    for p in sc.cfg.params.get("p_list", (1.1, 1.5, 2.0, 4.0)):
        t = co.density_experiment(g, cylinder_test_function, float(p), deltas)
        res.checks.append(Check.compare(f"decreasing_p{p}", t.errors.tolist(), "strict",
                                        t.strictly_decreasing))
        res.checks.append(Check.compare(f"final_error_p{p}", t.final_relative_error, frac,
                                        t.final_relative_error <= frac, frac))
        flux = max(r.boundary_flux for r in t.rows)
        res.checks.append(Check.compare(f"retracted_flux_p{p}", flux, ftol, flux <= ftol, ftol))
        sc.write_csv(res, f"errors_p{p}", t.csv_rows())


def suite_interpolation(sc: Scenario, res: SuiteResult):
    if not sc.is_1d:
        _not_applicable(res, "random Neumann functions are drawn on 1D models")
        return
    op = sc.op
    n_random = int(sc.cfg.params.get("n_random", 50))
    allowance = sc.cfg.tol("interpolation_allowance") + op.grid.h_arc
    rows = [["p", "draw", "lhs", "rhs", "ratio", "holds"]]
    for p in (1.25, 1.5, 2.0):
        results = [co.interpolation_check(op, co.random_cosine_sum(op.grid, sc.rng), p,
                                          allowance=allowance) for _ in range(n_random)]
        rows += [[p, i, r.lhs, r.rhs, r.ratio, r.holds] for i, r in enumerate(results)]
        ok = all(r.holds for r in results)
        res.checks.append(Check.compare(f"random_p{p}", min(r.ratio for r in results),
                                        1.0 / (1.0 + allowance), ok, allowance, draws=n_random))
    s = op.grid.normal_coordinate
    eq = co.interpolation_check(op, np.cos(math.pi * s / s[-1]), 2.0)
    band = sc.cfg.tol("equality_band")
    res.checks.append(Check.compare("equality_case_p2", eq.ratio, [1 - band, 1 + band],
                                    abs(eq.ratio - 1.0) <= band, band))
    sc.write_csv(res, "draws", rows)


def suite_leibniz(sc: Scenario, res: SuiteResult):
    levels = int(sc.cfg.params.get("leibniz_levels", 3))
    kw = sc.grid_kwargs()
    n0 = kw.pop("n_cells")
    vals, hs = [], []
    for k in range(levels):
        if not sc.is_1d:
            kw["n_theta"] = sc.grid_kwargs()["n_theta"] * 2 ** k
        g = build_grid(sc.manifold, n0 * 2 ** k, **kw)
        op = assemble_neumann(g)
        if sc.is_1d:
            s = g.normal_coordinate
            ell = s[-1]
            f, chi = np.cos(math.pi * s / ell), np.cos(2 * math.pi * s / ell) ** 2
        else:
            r, th = g.nodes[:, 0], g.nodes[:, 1]
            rm = sc.manifold.r_max
            f = np.cos(math.pi * r / rm) * (1 + 0.5 * np.cos(th))
            chi = np.cos(math.pi * r / rm) ** 2
        vals.append(leibniz_residual(op, f, chi))
        hs.append(g.h_arc)
    orders = [math.log2(a / b) for a, b in zip(vals, vals[1:])]
    target, band = sc.cfg.tol("leibniz_order"), sc.cfg.tol("leibniz_order_band")
    ok = abs(orders[-1] - target) <= band
    res.checks.append(Check.compare("residual_order", orders[-1], target, ok, band,
                                    residuals=vals, h=hs, orders=orders))


def suite_boundary_flux(sc: Scenario, res: SuiteResult):
    if not sc.is_1d:
        _not_applicable(res, "heat evolution suites run on 1D models")
        return
    op = sc.op
    s = op.grid.normal_coordinate
    ell = s[-1]
    f = s / ell
    scale = (ell / math.pi) ** 2
    ts = [0.01 * scale, 0.1 * scale, 1.0 * scale]
    flux = [float(np.abs(pr.heat_boundary_flux(op, t, f)[~op.grid.boundary_artificial]).max())
            for t in ts]
    dec = all(b < a for a, b in zip(flux, flux[1:]))
    res.checks.append(Check.compare("flux_decreasing", flux, "decreasing", dec, times=ts))
    bound = sc.cfg.tol("heat_flux_fraction") / ell
    res.checks.append(Check.compare("flux_small", flux[1], bound, flux[1] <= bound,
                                    sc.cfg.tol("heat_flux_fraction")))
    sc.write_csv(res, "flux", [["t", "max_flux"]] + [[t, v] for t, v in zip(ts, flux)])


SUITE_RUNNERS = {
    "distance": suite_distance,
    "completeness": suite_completeness,
    "spectral": suite_spectral,
    "davies_gaffney": suite_davies_gaffney,
    "finite_speed": suite_finite_speed,
    "cutoffs": suite_cutoffs,
    "density": suite_density,
    "interpolation": suite_interpolation,
    "leibniz": suite_leibniz,
    "boundary_flux": suite_boundary_flux,
}


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------

def run(config: RunConfig) -> dict:
    """Execute every scenario and return the report dictionary."""
    results = []
    for i, scfg in enumerate(config.scenarios):
        sc = Scenario(scfg, config.seed, i, config.out_dir, config.formats)
        for suite in scfg.suites:
            res = SuiteResult(scfg.name, suite, advisory=suite in scfg.advisory)
            try:
                SUITE_RUNNERS[suite](sc, res)
            except NeumannLBError as exc:
                res.error = f"{type(exc).__name__}: {exc}"
            results.append(res)
    statuses = [r.status for r in results]
    overall = ("error" if "error" in statuses else
               "fail" if any(s in ("fail", "indeterminate") for s in statuses) else "pass")
    return {"version": REPORT_VERSION, "config": config.echo(), "status": overall,
            "suites": [r.as_dict() for r in results]}


def exit_code(report: dict) -> int:
    return {"pass": EXIT_PASS, "fail": EXIT_FAIL}.get(report["status"], EXIT_RUNTIME)


def write_report(report: dict, config: RunConfig) -> Path | None:
    if "json" not in config.formats:
        return None
    config.out_dir.mkdir(parents=True, exist_ok=True)
    path = config.out_dir / "report.json"
    path.write_text(dumps_report(report))
    return path


def list_registry() -> list[dict]:
    return [e.as_row() for e in REGISTRY.values()]


def _cmd_verify(args) -> int:
    try:
        config = load_config(args.config)
        if args.out:
            config.out_dir = Path(args.out)
        if args.format:
            fmts = tuple(f.strip() for f in args.format.split(",") if f.strip())
            bad = [f for f in fmts if f not in FORMATS]
            if bad:
                raise ConfigError(f"--format: unknown format {bad[0]!r}")
            config.formats = fmts
        if args.seed is not None:
            config.seed = args.seed
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run(config)
        path = write_report(report, config)
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for s in report["suites"]:
        line = f"{s['scenario']:<24} {s['suite']:<16} {s['status'].upper()}"
        if s["error"]:
            line += f"  ({s['error']})"
        print(line)
    if path:
        print(f"report: {path}")
    return exit_code(report)


def _cmd_classify(args) -> int:
    try:
        entry = REGISTRY[args.metric]
    except KeyError:
        print(f"config error: unknown metric {args.metric!r}", file=sys.stderr)
        return EXIT_CONFIG
    m = entry.build()
    if not isinstance(m, Metric1D) or not m.has_open_end:
        print(f"config error: {args.metric!r} has no open end to classify", file=sys.stderr)
        return EXIT_CONFIG
    try:
        re_, im = (float(v) for v in args.lam.split(","))
    except ValueError:
        print("config error: --lambda expects <re>,<im>", file=sys.stderr)
        return EXIT_CONFIG
    try:
        anchor = args.anchor if args.anchor is not None else _anchors(m)[0]
        out = sp.weyl_classify(m, complex(re_, im), anchor=anchor)
    except NeumannLBError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(dumps_report({"metric": args.metric, **out.as_dict()}), end="")
    return EXIT_PASS if out.classification != sp.INDETERMINATE else EXIT_FAIL


def _cmd_list(args) -> int:
    rows = list_registry()
    if args.json:
        print(dumps_report({"registry": rows}), end="")
        return EXIT_PASS
    print(f"{'label':<20} {'kind':<8} {'complete':<9} {'esa':<6} description / basis")
    for r in rows:
        esa = "-" if r["expected_esa"] is None else str(r["expected_esa"]).lower()
        print(f"{r['label']:<20} {r['kind']:<8} {str(r['expected_complete']).lower():<9} "
              f"{esa:<6} {r['description']}; {r['basis']}")
    return EXIT_PASS


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="neumannlb",
                                 description="Numerical checks for Neumann Laplacians.")
    sub = ap.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run the suites of a scenario config")
    v.add_argument("--config", required=True)
    v.add_argument("--out", help="output directory (overrides the config)")
    v.add_argument("--format", help="comma separated subset of json,csv")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=_cmd_verify)
    c = sub.add_parser("classify", help="limit-point / limit-circle test of an open end")
    c.add_argument("--metric", required=True)
    c.add_argument("--lambda", dest="lam", default="0,1", help="<re>,<im>")
    c.add_argument("--anchor", type=float)
    c.set_defaults(func=_cmd_classify)
    ls = sub.add_parser("list", help="print the model registry")
    ls.add_argument("--json", action="store_true")
    ls.set_defaults(func=_cmd_list)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
