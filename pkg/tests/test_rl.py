import json

import numpy as np
import pytest

from contractive_sa.core import NormSpec, norm_eval
from contractive_sa.linear_sa import hurwitz_check
from contractive_sa.rl import (
    ISFactors,
    OffPolicyTD,
    Policy,
    QLearning,
    ReducibleChainError,
    TabularMDP,
    check_coverage,
    constant_reward_mdp,
    estimate_contraction_factor,
    garnet_mdp,
    load_mdp,
    mdp_from_dict,
    policy_q_values,
    policy_values,
    stationary_distribution,
    tdlfa_build,
)


def two_state_mdp(gamma=0.9):
    P = np.array([[[0.5, 0.5], [1.0, 0.0]], [[0.2, 0.8], [0.6, 0.4]]])
    R = np.array([[1.0, 0.0], [0.3, 0.7]])
    return TabularMDP(P, R, gamma)


def offpolicy_instance(n=2, gamma=0.9):
    mdp = two_state_mdp(gamma)
    behavior = Policy.uniform(mdp)
    target = Policy(np.array([[0.8, 0.2], [0.3, 0.7]]))
    factors = ISFactors.ratio(target, behavior, n, c_cap=1.0, rho_cap=1.0)
    return OffPolicyTD(mdp, behavior, target, factors)


# MDPs and stationary laws


def test_two_state_chain_stationary_law():
    mdp = two_state_mdp()
    first_action = Policy(np.array([[1.0, 0.0], [1.0, 0.0]]))
    np.testing.assert_allclose(stationary_distribution(mdp, first_action), [2 / 3, 1 / 3], atol=1e-14)


def test_doubly_stochastic_chain_is_uniform():
    P = np.array([[[0.1, 0.6, 0.3], [0.6, 0.3, 0.1], [0.3, 0.1, 0.6]]])
    mdp = TabularMDP(P, np.zeros((3, 1)), 0.5)
    np.testing.assert_allclose(stationary_distribution(mdp, Policy(np.ones((3, 1)))), np.full(3, 1 / 3), atol=1e-14)


def test_reducible_chains_are_rejected():
    absorbing = TabularMDP(np.array([[[1.0, 0.0], [0.5, 0.5]]]), np.zeros((2, 1)), 0.5)
    with pytest.raises(ReducibleChainError, match="transient"):
        stationary_distribution(absorbing, Policy(np.ones((2, 1))))
    split = TabularMDP(np.array([[[1.0, 0.0], [0.0, 1.0]]]), np.zeros((2, 1)), 0.5)
    with pytest.raises(ReducibleChainError, match="2 recurrent"):
        stationary_distribution(split, Policy(np.ones((2, 1))))


def test_mdp_validation():
    with pytest.raises(ValueError):
        TabularMDP(np.ones((1, 2, 2)), np.zeros((2, 1)), 0.5)
    with pytest.raises(ValueError):
        TabularMDP(np.full((1, 2, 2), 0.5), np.full((2, 1), 2.0), 0.5)
    with pytest.raises(ValueError):
        TabularMDP(np.full((1, 2, 2), 0.5), np.zeros((2, 1)), 1.0)
    with pytest.raises(ValueError):
        Policy(np.array([[0.5, 0.6]]))


def test_mdp_dict_round_trip(tmp_path):
    mdp = garnet_mdp(4, 3, 2, 0.8, seed=11)
    path = tmp_path / "mdp.json"
    path.write_text(json.dumps(mdp.to_dict()))
    back = load_mdp(path)
    np.testing.assert_array_equal(back.P, mdp.P)
    np.testing.assert_array_equal(back.R, mdp.R)
    assert back.gamma == mdp.gamma
    with pytest.raises(ValueError):
        mdp_from_dict({"n_states": 2})
    with pytest.raises(ValueError):
        mdp_from_dict({**mdp.to_dict(), "n_states": 5})


def test_garnet_is_deterministic_per_seed():
    a, b = garnet_mdp(6, 2, 3, 0.9, seed=1), garnet_mdp(6, 2, 3, 0.9, seed=1)
    np.testing.assert_array_equal(a.P, b.P)
    assert not np.array_equal(a.P, garnet_mdp(6, 2, 3, 0.9, seed=2).P)
    assert np.all(np.count_nonzero(a.P, axis=2) <= 3)


def test_policy_values_agree_with_q_values():
    mdp = two_state_mdp()
    pi = Policy(np.array([[0.8, 0.2], [0.3, 0.7]]))
    q = policy_q_values(mdp, pi).reshape(2, 2)
    np.testing.assert_allclose(np.sum(pi.table * q, axis=1), policy_values(mdp, pi), atol=1e-12)


# off-policy TD


def test_offpolicy_affine_map_matches_path_enumeration():
    for n in (1, 2, 3):
        op = offpolicy_instance(n)
        G, g = op.expected_by_enumeration()
        np.testing.assert_allclose(G, op.G, atol=1e-13)
        np.testing.assert_allclose(g, op.g, atol=1e-13)


def test_offpolicy_fixed_point():
    op = offpolicy_instance(2)
    q = op.fixed_point()
    np.testing.assert_allclose(op.expected(q), q, atol=1e-10)
    assert op.gamma_o < 1


def test_offpolicy_on_policy_reduces_to_q_pi():
    mdp = two_state_mdp()
    pi = Policy.uniform(mdp)
    op = OffPolicyTD(mdp, pi, pi, ISFactors.ratio(pi, pi, 3))
    np.testing.assert_allclose(op.fixed_point(), policy_q_values(mdp, pi), atol=1e-9)


def test_offpolicy_sample_mean_matches_expected_operator():
    op = offpolicy_instance(2)
    gen = np.random.default_rng(5)
    Q = np.array([1.0, -2.0, 0.5, 3.0])
    n = 200_000
    out = op.sample(np.tile(Q, (n, 1)), gen)
    mean, se = out.mean(axis=0), out.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - op.expected(Q)) <= 4 * se + 1e-12)


def test_offpolicy_noise_constant_is_certified_and_holds():
    op = offpolicy_instance(2)
    L_o, certified = op.noise_constant()
    assert certified
    gen = np.random.default_rng(6)
    Q = 20 * (2 * gen.random((50_000, op.mdp.n_sa)) - 1)
    dev = np.max(np.abs(op.sample(Q, gen) - op.expected(Q)), axis=1)
    assert np.all(dev <= L_o * (1 + np.max(np.abs(Q), axis=1)) + 1e-12)


def test_importance_factor_validation():
    with pytest.raises(ValueError):
        ISFactors(np.ones((2, 2)), np.full((2, 2), 0.5))
    with pytest.raises(ValueError):
        ISFactors(np.ones((2, 2)), np.ones((2, 2)), n=0)
    mdp = two_state_mdp(gamma=0.9)
    with pytest.raises(ValueError, match="exceeds 1/gamma"):
        ISFactors(np.ones((2, 2)), np.full((2, 2), 1.5)).validate(mdp, Policy.uniform(mdp))


def test_coverage_is_required():
    greedy = Policy(np.array([[1.0, 0.0], [1.0, 0.0]]))
    covering = Policy(np.array([[0.0, 1.0], [0.5, 0.5]]))
    with pytest.raises(ValueError, match="does not cover"):
        check_coverage(greedy, covering)


# contraction estimate


def test_contraction_estimate_on_affine_map():
    b = np.array([1.0, 2.0, 3.0])
    ratio, _ = estimate_contraction_factor(lambda Q: 0.5 * Q + b, NormSpec.max_norm(3), 500, np.random.default_rng(0))
    assert ratio == pytest.approx(0.5, abs=1e-12)


def test_contraction_estimates_stay_below_certified_factors():
    gen = np.random.default_rng(1)
    q = QLearning(two_state_mdp(), Policy.uniform(two_state_mdp()))
    ratio, _ = estimate_contraction_factor(q.expected, NormSpec.max_norm(4), 5000, gen)
    assert ratio <= q.gamma_hat + 1e-9
    op = offpolicy_instance(2)
    ratio, (Q1, Q2) = estimate_contraction_factor(op.expected, NormSpec.max_norm(4), 5000, gen)
    assert ratio <= op.gamma_o + 1e-12 and op.gamma_o < 1
    num = norm_eval(NormSpec.max_norm(4), op.expected(Q1) - op.expected(Q2))
    assert num / norm_eval(NormSpec.max_norm(4), Q1 - Q2) == pytest.approx(ratio)


# TD with linear features


def test_tdlfa_identity_features_recover_state_values():
    mdp = garnet_mdp(5, 2, 3, 0.9, seed=4)
    pi = Policy.uniform(mdp)
    lfa = tdlfa_build(mdp, pi, np.eye(5))
    np.testing.assert_allclose(lfa.theta_star, policy_values(mdp, pi), atol=1e-10)
    assert hurwitz_check(lfa.A_bar)


def test_tdlfa_sample_caps():
    mdp = garnet_mdp(5, 2, 3, 0.9, seed=4)
    rng = np.random.default_rng(3)
    Phi = rng.standard_normal((5, 3))
    with pytest.warns(UserWarning, match="rescaled"):
        lfa = tdlfa_build(mdp, Policy.uniform(mdp), Phi)
    A, b = lfa.sampler(rng, 20_000)
    assert np.max(np.linalg.norm(A, ord=2, axis=(1, 2))) <= 2 + 1e-12
    assert np.max(np.linalg.norm(b, axis=1)) <= 1 + 1e-12
    np.testing.assert_allclose(A.mean(axis=0), lfa.A_bar, atol=0.03)


def test_tdlfa_rejects_dependent_features():
    mdp = garnet_mdp(5, 2, 3, 0.9, seed=4)
    with pytest.raises(ValueError):
        tdlfa_build(mdp, Policy.uniform(mdp), np.ones((5, 2)) / 3)


# Q-learning


def test_constant_reward_q_star():
    q = QLearning(constant_reward_mdp(gamma=0.9), Policy(np.full((2, 2), 0.5)))
    np.testing.assert_allclose(q.q_star(), np.full(4, 10.0), atol=1e-10)
    assert q.D == pytest.approx(np.full(4, 0.25))
    assert q.gamma_hat == pytest.approx(0.975)


def test_q_learning_expected_operator_matches_samples():
    mdp = two_state_mdp()
    q = QLearning(mdp, Policy.uniform(mdp))
    Q = np.array([0.5, 2.0, -1.0, 1.0])
    n = 200_000
    out = q.sample(np.tile(Q, (n, 1)), np.random.default_rng(8))
    mean, se = out.mean(axis=0), out.std(axis=0, ddof=1) / np.sqrt(n)
    assert np.all(np.abs(mean - q.expected(Q)) <= 4 * se)


def test_q_learning_noise_is_bounded():
    mdp = two_state_mdp()
    q = QLearning(mdp, Policy.uniform(mdp))
    gen = np.random.default_rng(9)
    Q = mdp.q_max * (2 * gen.random((20_000, 4)) - 1)
    dev = np.max(np.abs(q.sample(Q, gen) - q.expected(Q)), axis=1)
    assert np.all(dev <= q.sigma_bar)
    assert np.all(dev <= 1 + 2 * np.max(np.abs(Q), axis=1))


def test_q_learning_problem_validation():
    mdp = two_state_mdp()
    q = QLearning(mdp, Policy.uniform(mdp))
    with pytest.raises(ValueError, match="Q0"):
        q.problem(Q0=np.full(4, 11.0))
    with pytest.raises(ValueError):
        q.problem(noise="bogus")
    with pytest.raises(ValueError, match="every state-action"):
        QLearning(mdp, Policy(np.array([[1.0, 0.0], [0.5, 0.5]])))
    assert q.problem(noise="multiplicative").noise.sigma == 2.0


def test_q_learning_default_schedule_and_constant():
    q = QLearning(constant_reward_mdp(gamma=0.9), Policy(np.full((2, 2), 0.5)))
    sched = q.default_schedule()
    assert sched.alpha == pytest.approx(160.0)
    assert sched.h == sched.alpha and sched.alpha0 == pytest.approx(1.0)
    assert q.conditions(sched).passed
    assert q.bound_constant() == pytest.approx(np.log(4) / (0.25**3 * 0.1**5))
