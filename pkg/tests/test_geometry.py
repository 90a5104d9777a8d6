import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from neumannlb.exceptions import DomainError
from neumannlb.geometry import (REGISTRY, SmoothingParams, distance_to_end,
                                fermi_retraction, flat_metric, geodesic_distance, get_manifold,
                                is_complete, retraction_differential_norm, smoothing_h,
                                smoothing_h_prime)

METRICS_1D = [k for k, e in REGISTRY.items() if e.kind == "metric"]


def test_x4_distance_one_two():
    m = get_manifold("x4_example")
    assert geodesic_distance(m, 1.0, 2.0) == pytest.approx(0.5, abs=1e-9)


def test_x4_distance_to_end_is_one():
    assert distance_to_end(get_manifold("x4_example"), 1.0) == pytest.approx(1.0, abs=1e-9)


def test_flat_distance_to_end_diverges():
    assert distance_to_end(get_manifold("flat_halfline"), 1.0) == math.inf


@pytest.mark.parametrize("label", [k for k in METRICS_1D if REGISTRY[k].arclength])
@pytest.mark.parametrize("p,q", [(1.0, 1.5), (1.2, 7.0), (2.0, 90.0)])
def test_distance_matches_closed_form(label, p, q):
    m = get_manifold(label)
    oracle = REGISTRY[label].arclength
    if not (m.contains(p) and m.contains(q)):
        pytest.skip("points outside the domain")
    expected = abs(oracle(q) - oracle(p))
    assert geodesic_distance(m, p, q) == pytest.approx(expected, rel=1e-10, abs=1e-10)


def test_distance_over_many_decades():
    m = get_manifold("inv_x2_halfline")
    assert geodesic_distance(m, 1.0, 1e12) == pytest.approx(12 * math.log(10), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.floats(1.0, 50.0), st.floats(1.0, 50.0), st.floats(1.0, 50.0))
def test_distance_is_a_metric(a, b, c):
    m = get_manifold("x2_halfline")
    dab, dbc, dac = (geodesic_distance(m, *pq) for pq in ((a, b), (b, c), (a, c)))
    assert dab == pytest.approx(geodesic_distance(m, b, a), abs=1e-12)
    assert dac <= dab + dbc + 1e-9
    assert geodesic_distance(m, a, a) == 0.0


def test_distance_rejects_points_outside():
    m = get_manifold("x4_example")
    with pytest.raises(DomainError):
        geodesic_distance(m, 0.5, 2.0)
    with pytest.raises(DomainError):
        geodesic_distance(m, 1.0, math.nan)


def test_empty_domain_rejected():
    with pytest.raises(DomainError):
        flat_metric(2.0, 1.0)


@pytest.mark.parametrize("label", METRICS_1D)
def test_completeness_matches_registry(label):
    v = is_complete(get_manifold(label))
    assert v.complete is REGISTRY[label].expected_complete, v.reason


def test_incomplete_verdict_reports_finite_length():
    v = is_complete(get_manifold("exp_decay_halfline"))
    assert v.verdict == "incomplete"
    assert v.distance_to_end == pytest.approx(2 * math.exp(-0.5), rel=1e-8)


# --- collar smoothing -----------------------------------------------------

DELTAS = [0.5, 0.2, 1e-3, 1e-8]


@pytest.mark.parametrize("delta", DELTAS)
def test_h_vanishes_then_is_identity(delta):
    p = SmoothingParams(delta)
    s = np.linspace(0, delta / 4, 7)
    assert np.all(smoothing_h(p, s) == 0.0)
    far = np.array([delta / 2, 0.7 * delta, 3 * delta, 10.0])
    assert np.array_equal(smoothing_h(p, far), far)


@pytest.mark.parametrize("delta", DELTAS)
def test_h_is_continuous_and_monotone(delta):
    p = SmoothingParams(delta)
    s = np.linspace(0, delta, 4001)
    h = smoothing_h(p, s)
    assert np.all(np.diff(h) >= -1e-15 * delta)
    assert smoothing_h(p, 0.5 * delta * (1 - 1e-9)) == pytest.approx(0.5 * delta, rel=1e-7)


@pytest.mark.parametrize("delta", DELTAS)
def test_h_prime_bounds_and_antiderivative(delta):
    p = SmoothingParams(delta)
    s = np.linspace(0, delta, 20001)
    hp = smoothing_h_prime(p, s)
    assert hp.min() >= 0.0 and hp.max() <= 3.0
    total, _ = integrate.quad(lambda x: smoothing_h_prime(p, x), delta / 4, delta / 2,
                              epsabs=1e-14 * delta, limit=200)
    assert total == pytest.approx(delta / 2, rel=1e-9)
    mid = 0.37 * delta
    part, _ = integrate.quad(lambda x: smoothing_h_prime(p, x), 0, mid, limit=200,
                             epsabs=1e-14 * delta, points=[delta / 4])
    assert smoothing_h(p, mid) == pytest.approx(part, rel=1e-9)


@pytest.mark.parametrize("delta", [0.0, -0.1, 0.6])
def test_smoothing_params_validated(delta):
    with pytest.raises(DomainError):
        SmoothingParams(delta)


def test_retraction_fixes_far_points_and_collapses_collar():
    surf = get_manifold("flared_cylinder")
    p = SmoothingParams(0.4)
    assert fermi_retraction(surf, p, (1.3, 0.7)) == (1.3, 0.7)
    assert fermi_retraction(surf, p, (0.05, 2.0)) == (0.0, 2.0)
    with pytest.raises(DomainError):
        fermi_retraction(surf, p, (-0.1, 0.0))


def test_retraction_differential_at_most_three():
    surf = get_manifold("flared_cylinder")
    r = np.linspace(0, 2, 2001)
    norms = retraction_differential_norm(surf, SmoothingParams(0.5), r)
    assert norms.max() <= 3.0
    assert np.all(norms[r >= 0.25] == 1.0)


def test_registry_rows():
    rows = {e.label: e.as_row() for e in REGISTRY.values()}
    assert rows["x4_example"]["expected_complete"] is False
    assert rows["x4_example"]["expected_esa"] is False
    assert rows["flat_halfline"]["expected_esa"] is True
    assert rows["flat_cylinder"]["kind"] == "surface"
    with pytest.raises(DomainError):
        get_manifold("nope")
