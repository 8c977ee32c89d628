import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contractive_sa.core import norm_eval
from contractive_sa.linear_sa import (
    contraction_in_P,
    diagonal_instance,
    discrete_sampler,
    hurwitz_check,
    linear_sa_from_pairs,
    lyapunov_residual,
    remodel,
    scalar_instance,
    solve_lyapunov,
)
from contractive_sa.rl import Policy, garnet_mdp, tdlfa_build, tdlfa_problem

NOISY_A = [[[-1.0, 0.5], [0.0, -2.0]], [[-0.5, -0.5], [0.2, -1.0]], [[-2.0, 0.0], [1.0, -0.5]]]
NOISY_B = [[1.0, 0.0], [0.0, -1.0], [0.5, 0.5]]


def test_hurwitz_examples():
    assert hurwitz_check(-np.eye(3))
    assert not hurwitz_check(np.eye(3))
    assert not hurwitz_check([[0.0, 1.0], [-1.0, 0.0]])
    with pytest.raises(ValueError):
        hurwitz_check(np.ones((2, 3)))


def test_lyapunov_scalar_and_diagonal():
    assert solve_lyapunov([[-1.0]])[0, 0] == pytest.approx(0.5)
    np.testing.assert_allclose(solve_lyapunov(-np.diag([1.0, 2.0])), np.diag([0.5, 0.25]), atol=1e-15)


def test_lyapunov_non_normal_residual():
    A = np.array([[0.0, 1.0], [-1.0, -1.0]])
    P = solve_lyapunov(A)
    assert lyapunov_residual(A, P) <= 1e-12
    assert np.all(np.linalg.eigvalsh(P) > 0)


def test_lyapunov_rejects_unstable_input():
    with pytest.raises(ValueError):
        solve_lyapunov(np.eye(2))


@st.composite
def hurwitz_matrices(draw):
    d = draw(st.integers(1, 6))
    entries = draw(st.lists(st.floats(-2, 2), min_size=d * d, max_size=d * d))
    M = np.array(entries).reshape(d, d)
    shift = max(0.0, float(np.max(np.linalg.eigvals(M).real))) + draw(st.floats(0.1, 2.0))
    return M - shift * np.eye(d)


@settings(max_examples=100, deadline=None)
@given(A=hurwitz_matrices())
def test_lyapunov_solution_is_symmetric_positive_definite(A):
    P = solve_lyapunov(A)
    d = A.shape[0]
    np.testing.assert_array_equal(P, P.T)
    assert np.linalg.eigvalsh(P)[0] > 0
    assert lyapunov_residual(A, P) <= 1e-10 * d * max(1.0, np.linalg.norm(P))


def test_scalar_remodel():
    spec, prob = scalar_instance()
    assert spec.P_bar[0, 0] == pytest.approx(0.5)
    assert spec.beta == pytest.approx(1.0)
    assert spec.x_star[0] == pytest.approx(2.0)
    assert spec.gamma_bar_exact == pytest.approx(0.0, abs=1e-15)
    assert spec.gamma_bar_sq_corrected == pytest.approx(0.0, abs=1e-15)
    assert spec.gamma_bar_uncorrected_bound == pytest.approx(-1.0)
    assert prob.gamma_c == spec.gamma_bar_exact


def test_diagonal_remodel_closed_form():
    spec, _ = diagonal_instance((1.0, 2.0))
    a, p = np.array([1.0, 2.0]), np.array([0.5, 0.25])
    beta = 1.0 / (2.0 * np.max(a**2 * p))
    assert spec.beta == pytest.approx(beta)
    assert spec.gamma_bar_exact == pytest.approx(np.max(np.abs(1 - beta * a)))


@pytest.mark.parametrize(
    "build",
    [
        lambda: scalar_instance(),
        lambda: diagonal_instance((1.0, 2.0, 5.0)),
        lambda: linear_sa_from_pairs(NOISY_A, NOISY_B),
        lambda: tdlfa_problem(tdlfa_build(garnet_mdp(5, 2, 3, 0.9, seed=4), Policy(np.full((5, 2), 0.5)), np.eye(5))),
    ],
    ids=["scalar", "diagonal", "noisy", "td_lfa"],
)
def test_contraction_certificate_and_corrected_bound(build):
    spec, prob = build()
    lmax = np.linalg.eigvalsh(spec.P_bar)[-1]
    assert spec.lyapunov_residual <= 1e-10 * spec.dim
    assert spec.gamma_bar_exact < 1
    assert spec.gamma_bar_exact**2 <= 1 - spec.beta / (2 * lmax) + 1e-12
    rng = np.random.default_rng(0)
    x1 = rng.standard_normal((1000, spec.dim)) * 3
    x2 = rng.standard_normal((1000, spec.dim)) * 3
    lhs = norm_eval(spec.norm, prob.expected(x1) - prob.expected(x2))
    rhs = spec.gamma_bar_exact * norm_eval(spec.norm, x1 - x2)
    assert np.all(lhs <= rhs + 1e-10)
    # noise bound on sampled (A(Y), b(Y)) at random points
    X = rng.standard_normal((1000, spec.dim)) * 5
    Y = prob.draw(rng, 1000)
    dev = norm_eval(spec.norm, prob.apply(X, Y) - prob.expected(X))
    assert np.all(dev <= spec.sigma_hat * (norm_eval(spec.norm, X) + 1))


def test_exact_factor_is_the_operator_norm():
    spec, _ = linear_sa_from_pairs(NOISY_A, NOISY_B)
    M = spec.beta * spec.A_bar + np.eye(2)
    assert contraction_in_P(M, spec.P_bar) == spec.gamma_bar_exact
    # brute-force the operator norm over directions
    theta = np.linspace(0, 2 * np.pi, 20_001)
    X = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    ratios = norm_eval(spec.norm, X @ M.T) / norm_eval(spec.norm, X)
    assert ratios.max() == pytest.approx(spec.gamma_bar_exact, rel=1e-6)


def test_fixed_point_solves_the_mean_linear_system():
    spec, prob = linear_sa_from_pairs(NOISY_A, NOISY_B)
    np.testing.assert_allclose(spec.A_bar @ spec.x_star, spec.b_bar, atol=1e-14)
    np.testing.assert_allclose(prob.expected_op(spec.x_star), spec.x_star, atol=1e-14)


def test_discrete_sampler_expectations():
    sampler, A_bar, b_bar, A_max, b_max = discrete_sampler(NOISY_A, NOISY_B, [0.2, 0.3, 0.5])
    np.testing.assert_allclose(A_bar, 0.2 * np.array(NOISY_A[0]) + 0.3 * np.array(NOISY_A[1]) + 0.5 * np.array(NOISY_A[2]))
    A, b = sampler(np.random.default_rng(0), 200_000)
    np.testing.assert_allclose(A.mean(axis=0), A_bar, atol=0.02)
    assert A_max == pytest.approx(max(np.linalg.norm(np.array(a), 2) for a in NOISY_A))
    with pytest.raises(ValueError):
        discrete_sampler(NOISY_A, NOISY_B, [0.5, 0.5, 0.5])


def test_estimated_expectations_mark_the_instance_approximate():
    sampler, A_bar, b_bar, A_max, b_max = discrete_sampler(NOISY_A, NOISY_B)
    spec, prob = remodel(sampler, 2, A_max=A_max, b_max=b_max, estimate_samples=200_000)
    assert spec.approximate and not prob.exact
    assert np.all(np.abs(spec.A_bar - A_bar) <= 5 * spec.A_bar_se + 1e-12)
    assert np.all(np.abs(spec.b_bar - b_bar) <= 5 * spec.b_bar_se + 1e-12)


def test_remodel_needs_sample_bounds():
    sampler, A_bar, b_bar, _, _ = discrete_sampler(NOISY_A, NOISY_B)
    with pytest.raises(ValueError):
        remodel(sampler, 2, A_bar=A_bar, b_bar=b_bar)
    with pytest.raises(ValueError):
        linear_sa_from_pairs([np.eye(2)], [[0.0, 0.0]])
