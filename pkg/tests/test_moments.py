import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.linalg import expm

from dyadic_lab import moments as mom
from dyadic_lab.model import Boundary, ModelParams, RangeError, TruncationSpec, stationary_second_moments

LAM2 = ModelParams(2.0, 1.0)
boundaries = st.sampled_from([Boundary.CONSERVATIVE, Boundary.ABSORBING])


def q_of(lam, n, boundary):
    return mom.build_q_matrix(ModelParams(lam), TruncationSpec(n, boundary))


def expm_oracle(q, u0, sigma, t):
    """Forced forward equation via the exponential of an augmented generator."""
    n = q.size
    b = np.zeros((n + 1, n + 1))
    b[:n, :n] = q.dense()
    b[n, 0] = sigma**2
    return (np.append(u0, 1.0) @ expm(b * t))[:n]


def test_q_matrix_examples():
    cons = q_of(2.0, 3, Boundary.CONSERVATIVE)
    np.testing.assert_array_equal(cons.diag, [-4, -20, -16])
    np.testing.assert_array_equal(cons.sub, [4, 16])
    np.testing.assert_array_equal(cons.row_sums(), 0)
    absn = q_of(2.0, 3, Boundary.ABSORBING)
    np.testing.assert_array_equal(absn.diag, [-4, -20, -80])
    np.testing.assert_array_equal(absn.row_sums(), [0, 0, -64])
    assert np.array_equal(absn.dense(), absn.dense().T)


def test_q_matrix_overflow():
    with pytest.raises(RangeError, match="q-matrix"):
        q_of(2.0, 600, Boundary.ABSORBING)


@given(st.floats(1.2, 3.0), st.integers(3, 10), boundaries, st.floats(0, 2), st.floats(0.001, 2.0),
       st.lists(st.floats(0, 1), min_size=10, max_size=10))
def test_forward_solution_matches_dense_exponential(lam, n, boundary, sigma, t, u0):
    q = q_of(lam, n, boundary)
    u0 = np.array(u0[:n])
    got = mom.solve_forward(q, u0, sigma, t).final
    ref = expm_oracle(q, u0, sigma, t)
    # both sides are accurate to roundoff relative to the total mass, so
    # entries far below it are compared in absolute terms only
    scale = max(u0.sum() + sigma**2 * t, 1e-300)
    assert np.all(np.abs(got - ref) <= 1e-12 * scale + 1e-8 * ref)


def test_zero_stays_zero():
    sol = mom.solve_forward(q_of(2.0, 12, Boundary.ABSORBING), np.zeros(12), 0.0, 1.0, 5)
    assert np.all(sol.u == 0)


def test_conservative_mass_law_from_stationary_profile():
    n, t = 40, 0.1
    u0 = stationary_second_moments(LAM2, n)
    sol = mom.solve_forward(q_of(2.0, n, Boundary.CONSERVATIVE), u0, 1.0, t, n_checkpoints=10)
    expected = u0.sum() + sol.times
    np.testing.assert_allclose(sol.u.sum(axis=1), expected, rtol=1e-8)


@given(st.floats(1.2, 3.0), st.integers(3, 30), st.lists(st.floats(0, 1), min_size=30, max_size=30),
       st.floats(0.0, 2.0))
def test_conservative_mass_law(lam, n, u0, sigma):
    u0 = np.array(u0[:n])
    sol = mom.solve_forward(q_of(lam, n, Boundary.CONSERVATIVE), u0, sigma, 0.7, n_checkpoints=7)
    expected = u0.sum() + sigma**2 * sol.times
    assert np.all(np.abs(sol.u.sum(axis=1) - expected) <= 1e-8 * max(expected.max(), 1e-12))


@given(st.floats(1.2, 3.0), st.integers(3, 30), st.lists(st.floats(0, 1), min_size=30, max_size=30))
def test_absorbing_mass_and_h_minus_one_are_nonincreasing(lam, n, u0):
    u0 = np.array(u0[:n])
    p = ModelParams(lam)
    sol = mom.solve_forward(q_of(lam, n, Boundary.ABSORBING), u0, 0.0, 2.0, n_checkpoints=20)
    mass = sol.u.sum(axis=1)
    assert np.all(np.diff(mass) <= 1e-14 * max(mass[0], 1e-300))
    f = np.array([mom.h_minus_one_functional(u, p) for u in sol.u])
    assert np.all(np.diff(f) <= 1e-14 * max(f[0], 1e-300))


@given(st.floats(1.2, 3.0), st.integers(3, 40), boundaries, st.floats(1e-4, 10.0))
def test_propagator_is_nonnegative_without_clamping(lam, n, boundary, t):
    p, g = mom._propagator(q_of(lam, n, boundary), t)
    assert np.all(p >= 0) and np.all(g >= 0)
    rows = p.sum(axis=1)
    assert np.all(rows <= 1 + 1e-13)
    if boundary is Boundary.CONSERVATIVE:
        np.testing.assert_allclose(rows, 1.0, atol=1e-13)


@given(st.integers(1, 12), st.integers(1, 12), st.floats(0.01, 1.0))
def test_transition_function_is_symmetric(i, j, t):
    n = 14
    q = q_of(2.0, n, Boundary.ABSORBING)
    from_i = mom.solve_forward(q, np.eye(n)[i - 1], 0.0, t).final[j - 1]
    from_j = mom.solve_forward(q, np.eye(n)[j - 1], 0.0, t).final[i - 1]
    assert from_i == pytest.approx(from_j, rel=1e-10, abs=1e-300)


def test_stationary_solution_is_stationary():
    q = q_of(2.0, 16, Boundary.ABSORBING)
    s = mom.truncated_stationary(q, 1.0)
    sol = mom.solve_forward(q, s, 1.0, 1.0, n_checkpoints=10)
    assert np.max(np.abs(sol.u / s - 1)) <= 1e-8


def test_self_check_is_tight_for_stiff_problem():
    sol = mom.solve_forward(q_of(2.0, 40, Boundary.ABSORBING), np.eye(40)[0], 1.0, 1.0, 4)
    assert sol.error_estimate <= 1e-8


@given(st.floats(1.2, 3.0), st.integers(3, 60), st.floats(0.1, 3.0))
def test_truncated_stationary_residual_and_positivity(lam, n, sigma):
    q = q_of(lam, n, Boundary.ABSORBING)
    s = mom.truncated_stationary(q, sigma)
    assert np.all(s > 0)
    residual = s @ q.dense() + sigma**2 * np.eye(n)[0]
    # row n of the residual mixes terms of size k_n^2 s_n
    scale = np.abs(q.dense()) @ s + sigma**2
    assert np.all(np.abs(residual) <= 1e-12 * scale)
    assert np.abs(residual).max() <= 1e-10 * sigma**2 * max(1.0, np.abs(q.dense()).max() * s.max())


@given(st.floats(1.2, 3.0), st.integers(3, 60))
def test_truncated_stationary_closed_form(lam, n):
    # s^(N)_n = sigma^2 (lam^-2n - lam^-2(N+1)) / (1 - lam^-2)
    p = ModelParams(lam, 1.0)
    s = mom.truncated_stationary(mom.build_q_matrix(p, TruncationSpec(n, Boundary.ABSORBING)), 1.0)
    idx = np.arange(1, n + 1)
    exact = -np.expm1(-2 * (n + 1 - idx) * math.log(lam)) * lam ** (-2.0 * idx) / (1 - lam**-2)
    np.testing.assert_allclose(s, exact, rtol=1e-12)


def test_truncated_stationary_against_infinite_profile():
    q = q_of(2.0, 8, Boundary.ABSORBING)
    s = mom.truncated_stationary(q, 1.0)
    closed = stationary_second_moments(LAM2, 8)
    rel = np.abs(s - closed) / closed
    assert rel[:4].max() <= 1e-3
    # the relative truncation gap is lambda^-2(N+1-n): a quarter at n = N
    np.testing.assert_allclose(rel, 4.0 ** -(9 - np.arange(1, 9)), rtol=1e-10)
    assert s[0] == pytest.approx(1 / 3, rel=1e-4) and s[1] == pytest.approx(1 / 12, rel=1e-4)


def test_truncated_stationary_scales_with_sigma_squared():
    q = q_of(2.0, 10, Boundary.ABSORBING)
    np.testing.assert_allclose(mom.truncated_stationary(q, 2.0), 4 * mom.truncated_stationary(q, 1.0), rtol=1e-15)
    assert np.all(mom.truncated_stationary(q, 0.0) == 0)


def test_truncated_stationary_refuses_conservative():
    with pytest.raises(ValueError, match="conservative"):
        mom.truncated_stationary(q_of(2.0, 10, Boundary.CONSERVATIVE), 1.0)


def test_h_minus_one_examples():
    assert mom.h_minus_one_functional(np.eye(5)[0], LAM2) == 0.25
    s = stationary_second_moments(LAM2, 60)
    assert mom.h_minus_one_functional(s, LAM2) == pytest.approx(4 / 45, rel=1e-14)
    assert mom.h_minus_one_drift(np.eye(5)[0], LAM2) == -0.75
    assert mom.h_minus_one_drift(np.zeros(5), LAM2) == 0.0


@pytest.mark.parametrize("h", [1e-3, 1e-4])
def test_h_minus_one_drift_matches_forward_difference(h):
    p = ModelParams(2.0)
    q = q_of(2.0, 10, Boundary.ABSORBING)
    u = mom.solve_forward(q, np.linspace(1, 0.1, 10), 0.0, 0.3).final
    ahead = mom.solve_forward(q, u, 0.0, h).final
    slope = (mom.h_minus_one_functional(ahead, p) - mom.h_minus_one_functional(u, p)) / h
    exact = mom.h_minus_one_drift(u, p)
    assert abs(slope - exact) <= 10 * h * abs(exact)


def test_regularity_bound_examples():
    e1 = np.eye(3)[0]
    res = mom.regularity_bound(e1, 0.0, ModelParams(2.0), cutoff=60)
    assert res.value == pytest.approx(4 / 9, rel=1e-13)
    assert not res.diverging
    assert mom.regularity_bound(e1, 1.0, ModelParams(2.0), cutoff=40).diverging
    assert not mom.regularity_bound(e1, 0.99, ModelParams(2.0), cutoff=40).diverging
    with pytest.raises(ValueError):
        mom.regularity_bound(np.ones(5), 0.0, ModelParams(2.0), cutoff=3)


@given(st.floats(-1.0, 0.99), st.floats(1.2, 3.0))
def test_regularity_tail_decays_like_theory(beta, lam):
    # for ubar = e_1 the tail terms are k_j^(2 beta - 2) / (1 - lam^-2)
    res = mom.regularity_bound(np.eye(1)[0], beta, ModelParams(lam), cutoff=30)
    assert res.tail_ratio == pytest.approx(lam ** (2 * beta - 2), rel=1e-12)


def test_moment_vector_clamping():
    np.testing.assert_array_equal(mom.as_moment_vector([1.0, -1e-13]), [1.0, 0.0])
    with pytest.raises(ValueError, match="nonnegative"):
        mom.as_moment_vector([1.0, -1e-3])


def test_implicit_fallback_agrees_with_exponential(monkeypatch):
    q = q_of(1.5, 70, Boundary.ABSORBING)
    u0 = np.eye(70)[0]
    fallback = mom.solve_forward(q, u0, 1.0, 0.5, 2).final
    monkeypatch.setattr(mom, "EXPM_MAX_N", 100)
    exact = mom.solve_forward(q, u0, 1.0, 0.5, 2).final
    mask = exact > 1e-8 * exact.max()
    np.testing.assert_allclose(fallback[mask], exact[mask], rtol=1e-6)


def test_negative_time_rejected():
    with pytest.raises(ValueError):
        mom.solve_forward(q_of(2.0, 5, Boundary.ABSORBING), np.ones(5), 0.0, -1.0)
