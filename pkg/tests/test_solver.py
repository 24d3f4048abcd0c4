import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condbisim.cmdp import FiniteMDP, generate_env
from condbisim.embed import TableEmbedding
from condbisim.errors import LengthMismatch
from condbisim.solver import (LatentPolicy, PolicyTable, bellman_backup, cross_context_policy_value,
                              discounted_occupancy, policy_evaluation, soft_value_iteration, state_policy,
                              tv_distance, value_iteration)

from conftest import random_mdp


def test_single_state_geometric_series():
    m = FiniteMDP(np.ones((1, 1, 1)), np.ones((1, 1)), 0.9, np.ones(1))
    v, q, pi = value_iteration(m, tol=1e-12)
    assert v[0] == pytest.approx(10.0, abs=1e-9)


def test_zero_rewards():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(4), size=(4, 2))
    m = FiniteMDP(P, np.zeros((4, 2)), 0.9, np.full(4, 0.25))
    v, _, _ = value_iteration(m)
    np.testing.assert_array_equal(v, 0.0)
    ev = policy_evaluation(m, PolicyTable.uniform(4, 2))
    assert ev.j == 0.0
    np.testing.assert_array_equal(ev.adv, 0.0)


def test_value_iteration_residual_and_greedy_value(rng):
    tol = 1e-10
    for _ in range(5):
        m = random_mdp(rng, n=6)
        v, q, pi = value_iteration(m, tol=tol)
        resid = np.abs(bellman_backup(m, v).max(axis=1) - v).max()
        assert resid <= tol
        ev = policy_evaluation(m, pi)
        assert np.abs(ev.v - v).max() <= 2 * tol / (1 - m.gamma)


def test_optimal_dominates_random_policies(rng):
    m = random_mdp(rng, n=5, A=3)
    v, _, _ = value_iteration(m, tol=1e-12)
    for _ in range(50):
        pi = rng.dirichlet(np.ones(3), size=5)
        assert (policy_evaluation(m, pi).v <= v + 1e-9).all()


def test_greedy_ties_lowest_index():
    pi = PolicyTable.greedy(np.array([[1.0, 1.0, 0.0], [0.0, 2.0, 2.0]]))
    np.testing.assert_array_equal(pi.probs, [[1, 0, 0], [0, 1, 0]])
    assert pi.kind == "deterministic"
    assert PolicyTable.uniform(2, 2).kind == "stochastic"


def test_policy_table_validation():
    with pytest.raises(ValueError):
        PolicyTable(np.array([[0.5, 0.6]]))
    with pytest.raises(ValueError):
        PolicyTable(np.array([[1.5, -0.5]]))


def test_soft_single_action_and_symmetry():
    rng = np.random.default_rng(1)
    m = random_mdp(rng, n=4, A=1)
    v, _, _ = value_iteration(m, tol=1e-12)
    vs, _, pi = soft_value_iteration(m, 0.1, tol=1e-12)
    np.testing.assert_allclose(vs, v, atol=1e-9)
    np.testing.assert_array_equal(pi.probs, 1.0)
    P = np.tile(np.eye(2)[:, None, :], (1, 2, 1))
    sym = FiniteMDP(P, np.array([[1.0, 1.0], [0.0, 0.0]]), 0.9, np.array([0.5, 0.5]))
    _, _, pi = soft_value_iteration(sym, 0.1)
    np.testing.assert_allclose(pi.probs, 0.5, atol=1e-12)


def test_soft_fixed_point_and_temperature_limit(rng):
    m = random_mdp(rng, n=6)
    T = 0.1
    v, q, pi = soft_value_iteration(m, T, tol=1e-12)
    # log-sum-exp oracle written out directly
    lse = T * np.log(np.exp(q / T).sum(axis=1))
    np.testing.assert_allclose(v, lse, atol=1e-10)
    e = np.exp((q - q.max(axis=1, keepdims=True)) / T)
    np.testing.assert_allclose(pi.probs, e / e.sum(axis=1, keepdims=True), atol=1e-12)

    vstar, qstar, greedy = value_iteration(m, tol=1e-12)
    prev = None
    for temp in (1.0, 0.1, 0.01, 1e-4):
        vt, _, pt = soft_value_iteration(m, temp, tol=1e-12)
        assert (vt >= vstar - 1e-9).all()
        if prev is not None:
            assert (vt <= prev + 1e-9).all()
        prev = vt
    assert np.abs(prev - vstar).max() <= 1e-2
    np.testing.assert_array_equal(np.argmax(pt.probs, axis=1), np.argmax(greedy.probs, axis=1))
    with pytest.raises(ValueError):
        soft_value_iteration(m, 0.0)


def test_soft_large_rewards_no_overflow():
    m = FiniteMDP(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), 0.99, np.ones(1))
    v, q, pi = soft_value_iteration(m, 1e-3)
    assert np.isfinite(v).all() and np.isfinite(pi.probs).all()


def test_uniform_policy_hand_solve():
    P = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    P = np.repeat(P, 2, axis=1)
    m = FiniteMDP(P, np.array([[1.0, 1.0], [0.0, 0.0]]), 0.5, np.array([0.5, 0.5]))
    ev = policy_evaluation(m, PolicyTable.uniform(2, 2))
    np.testing.assert_allclose(ev.v, [2.0, 0.0], atol=1e-12)
    assert ev.j == pytest.approx(1.0)


def test_policy_evaluation_exact(rng):
    for _ in range(10):
        m = random_mdp(rng, n=5, A=3)
        pi = rng.dirichlet(np.ones(3), size=5)
        ev = policy_evaluation(m, pi, comparison=PolicyTable.uniform(5, 3))
        r_pi = (pi * m.reward).sum(axis=1)
        P_pi = np.einsum("sa,sat->st", pi, m.transition)
        assert np.abs(ev.v - r_pi - m.gamma * P_pi @ ev.v).max() <= 1e-10
        np.testing.assert_allclose((pi * ev.adv).sum(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(ev.adv, ev.q - (pi * ev.q).sum(axis=1, keepdims=True), atol=1e-12)
        assert ev.a_max == pytest.approx(np.abs(ev.adv.mean(axis=1)).max(), abs=1e-12)
    with pytest.raises(LengthMismatch):
        policy_evaluation(m, np.full((4, 3), 1 / 3))


def test_discounted_occupancy_sums_to_one(rng):
    m = random_mdp(rng)
    pi = PolicyTable.uniform(m.n_states, m.n_actions)
    d = discounted_occupancy(m, pi)
    assert d.sum() == pytest.approx(1.0, abs=1e-12)
    # J = <d, r_pi> / (1 - gamma)
    r_pi = (pi.probs * m.reward).sum(axis=1)
    assert d @ r_pi / (1 - m.gamma) == pytest.approx(policy_evaluation(m, pi).j, abs=1e-10)


def test_tv_examples():
    assert tv_distance([0.3, 0.7], [0.3, 0.7]) == 0.0
    assert tv_distance([1, 0], [0, 1]) == 1.0
    assert tv_distance([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.25, abs=1e-15)
    with pytest.raises(LengthMismatch):
        tv_distance([1.0], [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_tv_properties(seed, n):
    rng = np.random.default_rng(seed)
    p, q, r = rng.dirichlet(np.ones(n), size=3)
    assert tv_distance(p, q) == tv_distance(q, p)
    assert 0.0 <= tv_distance(p, q) <= 1.0
    assert tv_distance(p, r) <= tv_distance(p, q) + tv_distance(q, r) + 1e-12


def _forward_j(mdp, pi, horizon):
    """Truncated return by pushing the state distribution forward step by step."""
    w = mdp.initial_dist.copy()
    r_pi = (pi * mdp.reward).sum(axis=1)
    total = 0.0
    for t in range(horizon):
        total += mdp.gamma ** t * w @ r_pi
        w = np.einsum("s,sa,sat->t", w, pi, mdp.transition)
    return total


def test_cross_context_value_matches_forward_rollout():
    cm = generate_env("random_cmdp", {"n_states": 3, "n_contexts": 3}, 5)
    phi = TableEmbedding.random(cm, 3, np.random.default_rng(0), scale=1.0)
    Y = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    pol = LatentPolicy(Y, np.random.default_rng(1).dirichlet(np.ones(2), size=4))
    H = 40
    trunc = cm.base.gamma ** H * cm.base.reward.max() / (1 - cm.base.gamma)
    for tp, te in itertools.product(range(3), repeat=2):
        ev = cross_context_policy_value(cm, phi, pol, tp, te)
        pi = state_policy(cm, phi, pol, tp, te).probs
        assert abs(ev.j - _forward_j(cm.base, pi, H)) <= trunc + 1e-9
        if tp == te:
            assert ev.j == pytest.approx(policy_evaluation(cm.base, pi).j, abs=1e-12)


def test_context_invariant_embedding_equal_values():
    cm = generate_env("random_cmdp", {"n_states": 4, "n_contexts": 3}, 2)
    Ys = np.random.default_rng(3).normal(size=(4, 2))
    phi = TableEmbedding.from_state_embedding(cm, Ys)
    pol = LatentPolicy(Ys, np.random.default_rng(4).dirichlet(np.ones(2), size=4))
    js = [cross_context_policy_value(cm, phi, pol, 0, te).j for te in range(3)]
    np.testing.assert_allclose(js, js[0], atol=1e-12)


def test_latent_policy_nearest_anchor_l1():
    pol = LatentPolicy(np.array([[0.0, 0.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(pol.codes(np.array([[0.4, 0.4], [0.6, 0.5], [0.5, 0.5]])), [0, 1, 0])
