"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import observed_order
from neumannlb import cli
from neumannlb import cutoffs as co
from neumannlb import propagators as pr
from neumannlb import spectral as sp
from neumannlb.discretize import (assemble_neumann, build_grid, green_identity_defect,
                                  leibniz_residual, normal_derivative)
from neumannlb.geometry import SmoothingParams, geodesic_distance, get_manifold, is_complete

pytestmark = pytest.mark.acceptance

FULL_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "full.toml"


@pytest.fixture
def verdict(capsys):
    def emit(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n[acceptance] {label}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def _x4_grid(n):
    return build_grid(get_manifold("x4_example"), n, truncation=100.0,
                      grading="uniform-in-arclength")


def test_criterion_1_incomplete_example(verdict):
    start = time.perf_counter()
    m = get_manifold("x4_example")
    dist = geodesic_distance(m, 1.0, 2.0)
    complete = is_complete(m).verdict
    rep = sp.deficiency_indices(m)
    residuals, fluxes = [], []
    for n in (250, 500, 1000, 2000):
        g = _x4_grid(n)
        f = g.sample(sp.x4_kernel_function)
        residuals.append(sp.eigen_residual(assemble_neumann(g), f, -1.0))
        true = np.isin(g.boundary_nodes, g.true_boundary_nodes)
        fluxes.append(float(np.abs(normal_derivative(g, f)[true]).max()))
    res_order = observed_order(residuals)
    flux_order = observed_order(fluxes)
    elapsed = time.perf_counter() - start
    ok = (abs(dist - 0.5) <= 1e-9 and complete == "incomplete"
          and rep.deficiency_indices == (1, 1) and rep.essentially_selfadjoint is False
          and np.all(np.abs(res_order - 2.0) <= 0.3) and np.all(flux_order >= 1.7)
          and elapsed < 10.0)
    verdict("criterion 1 (incomplete example)", ok,
            f"residual orders {np.round(res_order, 3).tolist()}, "
            f"normal-derivative orders {np.round(flux_order, 3).tolist()}, {elapsed:.1f}s")
    assert ok


BC_CASES = {
    "flat_halfline": [41.0, 81.0, 161.0, 321.0],
    "inv_x2_halfline": [math.exp(40), math.exp(80), math.exp(160), math.exp(320)],
    "x2_halfline": [9.0, 12.68857754044952, 17.916472867168917, 25.317977802344327],
}


def test_criterion_2_completeness_and_selfadjointness(verdict):
    start = time.perf_counter()
    ok = True
    worst = 0.0
    for label, truncs in BC_CASES.items():
        m = get_manifold(label)
        for lam in (1j, -1j):
            ok &= sp.weyl_classify(m, lam).classification == sp.LIMIT_POINT
        gaps = sp.bc_sensitivity(m, truncs, h_arc=0.08, k_eigs=4).rows[-1].gaps[1:4]
        worst = max(worst, max(gaps))
    ok &= worst < 1e-3
    x4 = sp.bc_sensitivity(get_manifold("x4_example"), [10.0, 20.0, 40.0, 80.0], n_cells=512)
    g1 = x4.gaps(1)
    stable = abs(g1[-1] - g1[-2]) / g1[-1] <= 0.05
    ok &= bool(stable and g1[-1] > 10 * worst and g1[-1] > 0)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 60.0
    verdict("criterion 2 (completeness and self-adjointness)", ok,
            f"max complete gap {worst:.2e}, incomplete gap {g1[-1]:.4g}, {elapsed:.1f}s")
    assert ok


def _distance_operators():
    seg = assemble_neumann(build_grid(get_manifold("flat_segment_40"), 1024))
    return {"flat [0,40]": seg, "x4 truncated": assemble_neumann(_x4_grid(512))}


def test_criterion_3_davies_gaffney(verdict):
    ok, details = True, []
    for name, op in _distance_operators().items():
        pairs = cli.default_pairs(op.grid)
        t_list = cli.default_t_list(op.grid, pairs)
        rep = pr.davies_gaffney_check(op, pairs, t_list, slack=1.05)
        decades = math.log10(t_list[-1] / t_list[0])
        ok &= (len(pairs) >= 5 and decades >= 2.0 and t_list[0] > pr.davies_gaffney_t_min(op.grid)
               and rep.n_violations == 0 and rep.max_violation_ratio <= 1.05)
        details.append(f"{name}: max ratio {rep.max_violation_ratio:.3f}")
    verdict("criterion 3 (Gaussian heat bound)", ok, "; ".join(details))
    assert ok


def test_criterion_4_finite_speed(verdict):
    ok, details = True, []
    for name, op in _distance_operators().items():
        pairs = cli.default_pairs(op.grid)
        margin = 3 * op.grid.h_arc
        rep = pr.finite_speed_check(op, pairs, eps_tail=1e-6, margin=margin)
        arrivals = rep.extras["arrival"]
        support = [r for rows in rep.extras["support"] for r in rows]
        ok &= (rep.n_violations == 0
               and all(a["arrival"] is not None and abs(a["arrival"] - a["rho"]) <= margin
                       for a in arrivals)
               and all(r["radius"] <= r["limit"] for r in support))
        lag = max(abs(a["arrival"] - a["rho"]) / op.grid.h_arc for a in arrivals
                  if a["arrival"] is not None)
        details.append(f"{name}: max tail {rep.max_violation_ratio:.2g} eps, "
                       f"arrival within {lag:.2f} h")
    verdict("criterion 4 (finite propagation speed)", ok, "; ".join(details))
    assert ok


def test_criterion_5_cutoffs(verdict):
    start = time.perf_counter()
    ok, details = True, []
    cases = [
        ("flat_halfline", build_grid(get_manifold("flat_halfline"), 4096, truncation=101.0,
                                     grading="uniform-in-arclength"), 0.5),
        ("flat_interval", build_grid(get_manifold("flat_interval"), 256), 0.2),
        ("flared_cylinder", build_grid(get_manifold("flared_cylinder"), 128, n_theta=64), 0.5),
    ]
    for name, g, delta in cases:
        dist = co.base_distance(g)
        diameter = float(dist.max())
        ns = [2.0 ** k for k in range(int(math.log2(diameter)) + 2)]
        seqs = [co.build_first_order_cutoffs(g, n) for n in ns]
        h = g.h_arc
        ok &= all(c.chi.min() >= 0.0 and c.chi.max() <= 1.0 for c in seqs)
        ok &= all(c.sup_gradient <= (2.0 / c.n) * (1 + 5 * h) for c in seqs)
        for R in (diameter / 8, diameter / 4, diameter / 2):
            ok &= any(np.all(c.plateau[dist <= R]) for c in seqs)
        neu = [co.neumannize(g, c, SmoothingParams(delta)) for c in seqs]
        flux = max(c.boundary_flux for c in neu)
        infl = max(c.checks["gradient_inflation"] for c in neu)
        ok &= flux <= 1e-10 and infl <= 6 * (1 + 5 * h)
        details.append(f"{name}: flux {flux:.1e}, inflation {infl:.2f}")
    chi2 = co.build_first_order_cutoffs(_x4_grid(512), 2)
    ok &= bool(np.all(chi2.chi == 1.0))
    elapsed = time.perf_counter() - start
    ok &= elapsed < 30.0
    verdict("criterion 5 (cut-off sequences)", ok, "; ".join(details) + f"; {elapsed:.1f}s")
    assert ok


def test_criterion_6_density(verdict):
    deltas = cli.DEFAULT_DELTAS
    ok, details = True, []
    for label in ("flat_cylinder", "flared_cylinder"):
        g = co.density_grid(get_manifold(label), min(deltas))
        for p in (1.1, 1.5, 2.0, 4.0):
            t = co.density_experiment(g, cli.cylinder_test_function, p, deltas)
            ok &= t.strictly_decreasing and t.final_relative_error <= 1e-3
            details.append(f"{label} p={p}: {t.final_relative_error:.1e}")
    verdict("criterion 6 (density)", ok, ", ".join(details))
    assert ok


def test_criterion_7_interpolation(verdict):
    g = build_grid(get_manifold("flat_interval"), 256)
    op = assemble_neumann(g)
    rng = np.random.default_rng(np.random.SeedSequence([20240101, 7]))
    allowance = 0.02 + g.h_arc
    ok, mins = True, []
    for p in (1.25, 1.5, 2.0):
        res = [co.interpolation_check(op, co.random_cosine_sum(g, rng), p, allowance=allowance)
               for _ in range(50)]
        ok &= all(r.holds for r in res)
        mins.append(min(r.ratio for r in res))
    eq = co.interpolation_check(op, np.cos(g.nodes), 2.0)
    ok &= 0.98 <= eq.ratio <= 1.02
    verdict("criterion 7 (interpolation inequality)", ok,
            f"150 draws, min rhs/lhs {np.round(mins, 3).tolist()}, equality {eq.ratio:.5f}")
    assert ok


def test_criterion_8_operator_invariants(verdict):
    rng = np.random.default_rng(8)
    ok, details = True, []
    ops = {"interval": assemble_neumann(build_grid(get_manifold("flat_interval"), 128)),
           "x4": assemble_neumann(_x4_grid(400)),
           "cylinder": assemble_neumann(build_grid(get_manifold("flared_cylinder"), 24,
                                                   n_theta=16))}
    sym = 0.0
    for op in ops.values():
        n = op.grid.n_nodes
        f, g = rng.standard_normal(n), rng.standard_normal(n)
        a, b = op.inner(op.apply(f), g), op.inner(f, op.apply(g))
        sym = max(sym, abs(a - b) / (op.norm(op.apply(f)) * op.norm(g)))
        ok &= op.inner(op.apply(f), f) >= 0.0
        ok &= bool(np.all(op.apply(np.ones(n)) == 0.0))
    ok &= sym <= 1e-12
    details.append(f"symmetry {sym:.1e}")

    greens, leib = [], []
    for n in (32, 64, 128, 256):
        g = build_grid(get_manifold("flat_interval"), n)
        op = assemble_neumann(g)
        x = g.nodes
        greens.append(green_identity_defect(op, np.sin(x) + x**2, np.exp(-x)))
        leib.append(leibniz_residual(op, np.cos(2 * x), np.cos(3 * x) + 0.5))
    ok &= bool(np.all(observed_order(greens) >= 0.9))
    leib_order = observed_order(leib)
    ok &= bool(np.all(np.abs(leib_order - 2.0) <= 0.3))
    details.append(f"Green order {observed_order(greens)[-1]:.2f}, "
                   f"Leibniz order {leib_order[-1]:.2f}")

    op = ops["interval"]
    f = rng.standard_normal(op.grid.n_nodes)
    a = pr.heat_apply(op, 0.3, pr.heat_apply(op, 0.2, f, "spectral"), "spectral")
    semi = op.norm(a - pr.heat_apply(op, 0.5, f, "spectral")) / op.norm(f)
    ok &= semi <= 1e-9
    x = op.grid.nodes
    _, energy = pr.wave_cos_apply(op, 5.0, np.exp(-10 * (x - 1.5) ** 2), return_energy=True)
    drift = float(np.ptp(energy) / energy[0])
    ok &= drift <= 1e-10
    details.append(f"semigroup {semi:.1e}, energy drift {drift:.1e}")
    verdict("criterion 8 (operator invariants)", ok, ", ".join(details))
    assert ok


def test_criterion_9_determinism(verdict, tmp_path):
    start = time.perf_counter()
    dumps = []
    for k in range(2):
        cfg = cli.load_config(FULL_CONFIG)
        cfg.out_dir = tmp_path / f"run{k}"
        report = cli.run(cfg)
        cli.write_report(report, cfg)
        dumps.append((cfg.out_dir / "report.json").read_bytes())
    elapsed = time.perf_counter() - start
    identical = dumps[0] == dumps[1]
    ok = identical and elapsed < 300.0 and report["status"] == "pass"
    verdict("criterion 9 (determinism)", ok,
            f"identical={identical}, status={report['status']}, two runs {elapsed:.1f}s")
    assert ok
