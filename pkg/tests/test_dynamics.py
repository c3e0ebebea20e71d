from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridfleet.dynamics import discretize, make_polygon, step

# --- independent oracles -----------------------------------------------------

AC = np.zeros((4, 4))
AC[0, 2] = 1.0
AC[1, 3] = 1.0
BC = np.zeros((4, 2))
BC[2, 0] = 1.0
BC[3, 1] = 1.0


def zoh_series_oracle(ts: float, terms: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """ZOH matrices via the matrix-exponential power series.

    A = sum_k (Ac*ts)^k / k!,  B = sum_k Ac^k ts^(k+1)/(k+1)! Bc.
    The continuous-time matrix is nilpotent so the series is exact after
    a couple of terms; we keep more anyway.
    """
    A = np.zeros((4, 4))
    B = np.zeros((4, 2))
    acc = np.eye(4)
    fact = 1.0
    for k in range(terms):
        A += acc / fact
        B += acc @ BC * ts / fact / (k + 1)
        acc = acc @ (AC * ts)
        fact *= k + 1
    return A, B


def polygon_edge_oracle(radius: float, K: int, v: np.ndarray) -> bool:
    """Membership in the inscribed K-gon checked edge by edge."""
    apothem = radius * np.cos(np.pi / K)
    for k in range(K):
        ang = 2.0 * np.pi * (k + 0.5) / K
        if v[0] * np.cos(ang) + v[1] * np.sin(ang) > apothem + 1e-12:
            return False
    return True


# --- discretize ---------------------------------------------------------------


def test_discretize_matches_series_oracle():
    for ts in (0.1, 1.0, 1.5, 2.7):
        model = discretize(ts)
        A_ref, B_ref = zoh_series_oracle(ts)
        np.testing.assert_allclose(model.A, A_ref, atol=1e-14)
        np.testing.assert_allclose(model.B, B_ref, atol=1e-14)


def test_discretize_frozen_values_ts_1_5():
    # frozen from zoh_series_oracle(1.5)
    model = discretize(1.5)
    np.testing.assert_allclose(model.A[0], [1.0, 0.0, 1.5, 0.0], atol=0)
    np.testing.assert_allclose(model.B[0], [1.125, 0.0], atol=0)
    np.testing.assert_allclose(model.B[2], [1.5, 0.0], atol=0)


def test_discretize_frozen_values_ts_1_0():
    model = discretize(1.0)
    assert model.B[0, 0] == pytest.approx(0.5, abs=0)
    assert model.B[1, 1] == pytest.approx(0.5, abs=0)


def test_discretize_rejects_nonpositive_ts():
    with pytest.raises(ValueError):
        discretize(0.0)
    with pytest.raises(ValueError):
        discretize(-1.5)


# --- step ---------------------------------------------------------------------


def test_step_hand_values():
    model = discretize(1.5)
    out = step(model, np.array([0.0, 0.0, 1.0, 0.0]), np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [2.625, 0.0, 2.5, 0.0], atol=0)


def test_step_equilibrium_at_rest():
    model = discretize(1.5)
    x = np.array([3.0, -7.0, 0.0, 0.0])
    out = step(model, x, np.zeros(2))
    np.testing.assert_allclose(out, x, atol=0)


def test_step_drift_only():
    model = discretize(1.5)
    out = step(model, np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(2))
    np.testing.assert_allclose(out, [0.0, 1.5, 0.0, 1.0], atol=0)


finite = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    px=finite, py=finite, vx=finite, vy=finite, ax=finite, ay=finite,
    ts=st.floats(min_value=0.01, max_value=5.0),
)
def test_step_matches_closed_form_integration(px, py, vx, vy, ax, ay, ts):
    # integrating s'' = u under constant u over ts:
    #   p+ = p + ts*v + ts^2/2*u,  v+ = v + ts*u
    model = discretize(ts)
    out = step(model, np.array([px, py, vx, vy]), np.array([ax, ay]))
    expect = np.array(
        [
            px + ts * vx + 0.5 * ts * ts * ax,
            py + ts * vy + 0.5 * ts * ts * ay,
            vx + ts * ax,
            vy + ts * ay,
        ]
    )
    np.testing.assert_allclose(out, expect, rtol=1e-12, atol=1e-12)


# --- make_polygon ---------------------------------------------------------------


def test_polygon_oracle_examples_radius3_k4():
    poly = make_polygon(3.0, 4)
    assert poly.contains(np.array([2.0, 0.0]))
    assert polygon_edge_oracle(3.0, 4, np.array([2.0, 0.0]))
    # inside the ball but outside the inscribed square: conservatism
    assert np.linalg.norm([2.0, 2.0]) <= 3.0
    assert not poly.contains(np.array([2.0, 2.0]))
    assert not polygon_edge_oracle(3.0, 4, np.array([2.0, 2.0]))


def test_polygon_contains_origin():
    for K in (3, 4, 16, 33):
        assert make_polygon(3.0, K).contains(np.zeros(2))


def test_polygon_rejects_bad_args():
    with pytest.raises(ValueError):
        make_polygon(3.0, 2)
    with pytest.raises(ValueError):
        make_polygon(0.0, 8)


def test_polygon_offsets_and_unit_normals():
    poly = make_polygon(2.5, 16)
    for n, b in poly.half_planes:
        assert np.linalg.norm(n) == pytest.approx(1.0, abs=1e-12)
        assert b == pytest.approx(2.5 * np.cos(np.pi / 16), abs=1e-12)


def test_polygon_soundness_random_points():
    # every point satisfying the polygon also satisfies the true norm bound
    rng = np.random.default_rng(0)
    for K in (3, 5, 16):
        poly = make_polygon(2.0, K)
        pts = rng.uniform(-2.2, 2.2, size=(10_000, 2))
        kept = [p for p in pts if poly.contains(p)]
        assert kept, "sampling produced no interior points"
        for p in kept:
            assert np.linalg.norm(p) <= 2.0 + 1e-12


def test_polygon_worst_case_gap_shrinks_monotonically():
    # deepest interior boundary point sits at the apothem; its gap to the
    # circle is r*(1-cos(pi/K)) which must vanish monotonically as K grows
    r = 3.0
    gaps = [r * (1.0 - np.cos(np.pi / K)) for K in (3, 4, 8, 16, 32, 64)]
    assert all(g1 > g2 for g1, g2 in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-2


@settings(max_examples=100, deadline=None)
@given(
    angle=st.floats(min_value=0.0, max_value=2 * np.pi),
    frac=st.floats(min_value=0.0, max_value=1.0),
    K=st.integers(min_value=3, max_value=40),
)
def test_polygon_membership_agrees_with_edge_oracle(angle, frac, K):
    r = 2.0
    v = frac * r * np.array([np.cos(angle), np.sin(angle)])
    poly = make_polygon(r, K)
    assert poly.contains(v, tol=1e-12) == polygon_edge_oracle(r, K, v)
