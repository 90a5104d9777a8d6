import math

import numpy as np
import pytest

from conftest import observed_order
from neumannlb import propagators as P
from neumannlb.discretize import assemble_neumann, build_grid
from neumannlb.exceptions import DomainError, PreconditionError
from neumannlb.geometry import get_manifold
from neumannlb.propagators import (davies_gaffney_check, davies_gaffney_t_min,
                                   finite_speed_check, heat_apply, heat_apply_squaring,
                                   heat_boundary_flux, heat_trajectory, set_distance,
                                   smoothed_indicator, wave_cos_apply)


@pytest.fixture(scope="module")
def segment_op():
    return assemble_neumann(build_grid(get_manifold("flat_segment_40"), 400,
                                       grading="uniform-in-arclength"))


def test_documented_constants():
    assert P.CN_STEP_FACTOR == 0.5
    assert P.COURANT == 0.9
    assert P.DG_SLACK == 1.05
    assert P.EPS_TAIL == 1e-6
    assert P.MARGIN_CELLS == 3


# --- heat --------------------------------------------------------------------

@pytest.mark.parametrize("t", [0.01, 0.3, 2.0])
def test_heat_is_a_contraction(interval_op, rng, t):
    f = rng.standard_normal(interval_op.grid.n_nodes)
    u = heat_apply(interval_op, t, f)
    assert interval_op.norm(u) <= interval_op.norm(f) * (1 + 1e-12)
    assert u.max() <= f.max() + 1e-12 and u.min() >= f.min() - 1e-12


def test_heat_preserves_mass_and_constants(interval_op, rng):
    f = rng.random(interval_op.grid.n_nodes)
    u = heat_apply(interval_op, 0.7, f)
    w = interval_op.weights
    assert np.sum(w * u) == pytest.approx(np.sum(w * f), rel=1e-10)
    ones = np.ones_like(f)
    assert heat_apply(interval_op, 0.7, ones) == pytest.approx(ones, abs=1e-10)


def test_heat_cosine_decays_at_second_order():
    m = get_manifold("flat_interval")
    errs = []
    for n in (64, 128, 256):
        op = assemble_neumann(build_grid(m, n))
        x = op.grid.nodes
        errs.append(np.abs(heat_apply(op, 0.5, np.cos(x)) - math.exp(-0.5) * np.cos(x)).max())
    assert np.all(observed_order(errs) > 1.9)


def test_heat_semigroup(interval_op, rng):
    f = rng.standard_normal(interval_op.grid.n_nodes)
    a = heat_apply(interval_op, 0.3, heat_apply(interval_op, 0.2, f, "spectral"), "spectral")
    b = heat_apply(interval_op, 0.5, f, "spectral")
    assert interval_op.norm(a - b) <= 1e-9 * interval_op.norm(f)


def test_heat_is_selfadjoint(interval_op, rng):
    n = interval_op.grid.n_nodes
    f, g = rng.standard_normal(n), rng.standard_normal(n)
    lhs = interval_op.inner(heat_apply(interval_op, 0.4, f), g)
    rhs = interval_op.inner(f, heat_apply(interval_op, 0.4, g))
    assert abs(lhs - rhs) <= 1e-11 * interval_op.norm(f) * interval_op.norm(g)


def test_crank_nicolson_matches_spectral(interval_op):
    x = interval_op.grid.nodes
    f = np.exp(-4 * (x - 1) ** 2)
    a = heat_apply(interval_op, 0.25, f)
    b = heat_apply(interval_op, 0.25, f, method="spectral")
    assert interval_op.norm(a - b) < 1e-5


def test_squaring_agrees_with_stepping(interval_op, rng):
    f = rng.random(interval_op.grid.n_nodes)
    t = 0.8
    j, dt = P._cn_step_count(interval_op, t)
    stepped = P._CrankNicolson(interval_op, dt).step(f, 2**j)
    squared = heat_apply_squaring(interval_op, [t], f)[0]
    assert squared == pytest.approx(stepped, rel=1e-9, abs=1e-12)
    assert np.all(squared >= 0)


def test_trajectory_matches_direct(interval_op, rng):
    f = rng.standard_normal(interval_op.grid.n_nodes)
    ts = [0.1, 0.2, 0.4]
    traj = heat_trajectory(interval_op, ts, f)
    for t, u in zip(ts, traj):
        assert interval_op.norm(u - heat_apply(interval_op, t, f, "spectral")) < 1e-4
    with pytest.raises(DomainError):
        heat_trajectory(interval_op, [0.2, 0.1], f)


def test_heat_rejects_bad_arguments(interval_op):
    f = np.ones(interval_op.grid.n_nodes)
    with pytest.raises(DomainError):
        heat_apply(interval_op, 0.0, f)
    with pytest.raises(DomainError):
        heat_apply(interval_op, 1.0, f, method="euler")


def test_boundary_flux_of_coordinate_vanishes_under_refinement():
    m = get_manifold("flat_interval")
    flux = []
    for n in (64, 128, 256):
        op = assemble_neumann(build_grid(m, n))
        flux.append(np.abs(heat_boundary_flux(op, 0.5, op.grid.nodes)).max())
    assert flux[0] < 0.02
    assert np.all(observed_order(flux) > 1.9)


def test_boundary_flux_decreases_in_time(interval_op):
    x = interval_op.grid.nodes
    flux = [np.abs(heat_boundary_flux(interval_op, t, x)).max() for t in (0.1, 0.5, 1.0, 2.0)]
    assert np.all(np.diff(flux) < 0)


def test_eigenvector_flux_decays_exponentially(interval_op):
    lam, U = interval_op.eigh
    f = U[:, 3]
    a = heat_boundary_flux(interval_op, 0.1, f)
    b = heat_boundary_flux(interval_op, 0.5, f)
    assert b / a == pytest.approx(np.full(2, math.exp(-0.4 * lam[3])), rel=1e-3)


# --- wave --------------------------------------------------------------------

def test_wave_at_zero_is_identity(interval_op, rng):
    f = rng.standard_normal(interval_op.grid.n_nodes)
    assert np.array_equal(wave_cos_apply(interval_op, 0.0, f), f)


def test_wave_cosine_half_period():
    op = assemble_neumann(build_grid(get_manifold("flat_interval"), 256))
    x = op.grid.nodes
    assert np.abs(wave_cos_apply(op, math.pi, np.cos(x)) + np.cos(x)).max() < 1e-6


def test_wave_energy_is_conserved(interval_op):
    x = interval_op.grid.nodes
    _, energy = wave_cos_apply(interval_op, 5.0, np.exp(-10 * (x - 1.5) ** 2),
                               return_energy=True)
    assert np.ptp(energy) <= 1e-10 * energy[0]


def test_cosine_functional_equation(interval_op):
    # cos(a) cos(b) = (cos(a+b) + cos(a-b)) / 2
    x = interval_op.grid.nodes
    f = np.exp(-5 * (x - 1) ** 2)
    a, b = 0.9, 0.4

    def c(s, g):
        return wave_cos_apply(interval_op, s, g, method="spectral")

    lhs = c(a, c(b, f))
    rhs = 0.5 * (c(a + b, f) + c(a - b, f))
    assert interval_op.norm(lhs - rhs) < 1e-12


def test_leapfrog_matches_spectral(interval_op):
    x = interval_op.grid.nodes
    f = np.cos(2 * x)
    a = wave_cos_apply(interval_op, 1.3, f)
    b = wave_cos_apply(interval_op, 1.3, f, method="spectral")
    assert interval_op.norm(a - b) < 1e-3


def test_wave_rejects_negative_time(interval_op):
    with pytest.raises(DomainError):
        wave_cos_apply(interval_op, -1.0, np.ones(interval_op.grid.n_nodes))


# --- sets and distance checks --------------------------------------------------

def test_smoothed_indicator_support_and_norm(segment_op):
    g = segment_op.grid
    f = smoothed_indicator(g, (10.0, 12.0))
    assert segment_op.norm(f) == pytest.approx(1.0, rel=1e-13)
    x = g.nodes
    assert np.all(f[(x < 10.0) | (x > 12.0)] == 0.0)
    with pytest.raises(PreconditionError):
        smoothed_indicator(g, (3.0, 3.0))


def test_set_distance(segment_op):
    assert set_distance(segment_op.grid, (1, 2), (5, 7)) == pytest.approx(3.0)
    assert set_distance(segment_op.grid, (5, 7), (1, 2)) == pytest.approx(3.0)
    with pytest.raises(PreconditionError):
        set_distance(segment_op.grid, (1, 3), (2, 4))


PAIRS = [((1.0, 3.0), (8.0, 10.0)), ((15.0, 16.0), (25.0, 27.0))]


def test_davies_gaffney_bound_holds(segment_op):
    t0 = max(10 * davies_gaffney_t_min(segment_op.grid), 7 * segment_op.grid.h_arc)
    rep = davies_gaffney_check(segment_op, PAIRS, [t0 * 2**k for k in range(6)])
    assert rep.passed
    assert rep.max_violation_ratio < 1.0
    rows = list(rep.csv_rows())
    assert rows[0] == ["pair", "t_or_s", "inner_product", "bound", "ratio", "pass"]
    assert len(rows) == 1 + 6 * len(PAIRS)


def test_davies_gaffney_rejects_small_times(segment_op):
    with pytest.raises(PreconditionError):
        davies_gaffney_check(segment_op, PAIRS, [0.5 * davies_gaffney_t_min(segment_op.grid)])


def test_finite_speed_holds(segment_op):
    rep = finite_speed_check(segment_op, PAIRS, n_samples=6)
    assert rep.passed, rep.as_dict()["extras"]
    for a in rep.extras["arrival"]:
        assert abs(a["arrival"] - a["rho"]) <= rep.extras["margin"]


def test_finite_speed_rejects_late_samples(segment_op):
    with pytest.raises(PreconditionError):
        finite_speed_check(segment_op, PAIRS[:1], s_list=[6.0])
