import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condbisim.cmdp import FiniteMDP, build_super_mdp, generate_env
from condbisim.errors import DimensionMismatch, Infeasible, NonConvergence
from condbisim.metric import (GaussianMoments, MetricConfig, PseudoMetric, bisim_metric, bisim_operator,
                              iteration_bound, l1_embedding, lint_metric, pi_bisim_metric, pi_bisim_operator,
                              read_metric_csv, transport, triangle_violation, w2_gaussian, w2_gaussian_batch,
                              wasserstein1, write_metric_csv, zero_classes)
from condbisim.solver import PolicyTable, soft_value_iteration, tv_distance

from conftest import random_mdp, random_pseudometric, two_state_self_loop, w1_dual_lp


def test_w1_examples():
    d = np.array([[0.0, 2.0], [2.0, 0.0]])
    cost, G = wasserstein1([0.3, 0.7], [0.3, 0.7], d)
    assert cost == 0.0
    np.testing.assert_array_equal(G, np.diag([0.3, 0.7]))
    ground = random_pseudometric(np.random.default_rng(0), 4)
    cost, _ = wasserstein1(np.eye(4)[1], np.eye(4)[3], ground)
    assert cost == ground[1, 3]
    cost, G = wasserstein1([0.5, 0.5], [0.0, 1.0], np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert cost == pytest.approx(0.5, abs=1e-15)


def test_w1_errors():
    d = np.zeros((2, 2))
    with pytest.raises(Infeasible):
        wasserstein1([0.5, 0.6], [0.5, 0.5], d)
    with pytest.raises(DimensionMismatch):
        wasserstein1([1.0], [0.5, 0.5], d)


def test_w1_matches_dual_lp_and_coupling_feasible(rng):
    for _ in range(50):
        n = rng.integers(2, 9)
        ground = random_pseudometric(rng, n)
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        cost, G = wasserstein1(p, q, ground)
        assert abs(cost - w1_dual_lp(p, q, ground)) <= 1e-9
        np.testing.assert_allclose(G.sum(axis=1), p, atol=1e-10)
        np.testing.assert_allclose(G.sum(axis=0), q, atol=1e-10)
        assert (G >= 0).all()


def test_transport_duals_certify_optimum(rng):
    C = rng.uniform(size=(4, 5))
    p = rng.dirichlet(np.ones(4))
    q = rng.dirichlet(np.ones(5))
    val, G, u, v = transport(p, q, C, return_duals=True)
    assert (u[:, None] + v[None, :] <= C + 1e-12).all()
    assert abs(val - (p @ u + q @ v)) <= 1e-10


def test_w1_discrete_ground_is_tv(rng):
    for n in (2, 3, 5, 8):
        disc = 1.0 - np.eye(n)
        p, q = rng.dirichlet(np.ones(n), size=2)
        assert abs(wasserstein1(p, q, disc)[0] - tv_distance(p, q)) <= 1e-12


def test_w2_gaussian():
    a = GaussianMoments([0.0, 1.0], [1.0, 2.0])
    assert w2_gaussian(a, a) == 0.0
    assert w2_gaussian(a, GaussianMoments([3.0, 1.0], [1.0, 2.0])) == pytest.approx(3.0)
    assert w2_gaussian(GaussianMoments([0.0], [1.0]), GaussianMoments([0.0], [2.0])) == pytest.approx(1.0)
    with pytest.raises(DimensionMismatch):
        w2_gaussian(a, GaussianMoments([0.0], [1.0]))
    with pytest.raises(ValueError):
        GaussianMoments([0.0], [-1.0])
    b = GaussianMoments([1.0, -1.0], [0.5, 0.5])
    batch = w2_gaussian_batch(a.mean[None], a.std[None], b.mean[None], b.std[None])
    assert batch[0] == pytest.approx(w2_gaussian(a, b), abs=1e-15)


def test_w2_gaussian_1d_matches_quantile_transport():
    # 1-D W2 equals the L2 distance between quantile functions
    from scipy.stats import norm
    u = (np.arange(20000) + 0.5) / 20000
    qa = 0.3 + 1.2 * norm.ppf(u)
    qb = -0.4 + 0.5 * norm.ppf(u)
    approx = np.sqrt(np.mean((qa - qb) ** 2))
    exact = w2_gaussian(GaussianMoments([0.3], [1.2]), GaussianMoments([-0.4], [0.5]))
    assert exact == pytest.approx(approx, abs=1e-3)


@pytest.mark.parametrize("c", [0.1, 0.5, 0.9])
def test_two_state_self_loop_distance_one(c):
    d = bisim_metric(two_state_self_loop(), MetricConfig(c=c, tol=1e-12))
    assert d.d[0, 1] == pytest.approx(1.0, abs=1e-9)


def test_identical_rows_zero_distance(rng):
    m = random_mdp(rng, n=4)
    P = m.transition.copy()
    R = m.reward.copy()
    P[3], R[3] = P[2], R[2]
    d = bisim_metric(m.replace(transition=P, reward=R))
    assert d.d[2, 3] == 0.0


def test_iteration_count_bound(rng):
    for c in (0.3, 0.5, 0.9):
        m = random_mdp(rng, n=5)
        tol = 1e-8
        _, trace = bisim_metric(m, MetricConfig(c=c, tol=tol), return_trace=True)
        assert trace.iterations <= iteration_bound(tol, m.r_max, c)
        assert trace.residual <= tol


def test_returned_metric_is_fixed_point_and_valid(rng):
    for c in (0.3, 0.5, 0.9):
        m = random_mdp(rng, n=5, A=3)
        cfg = MetricConfig(c=c, tol=1e-10)
        d = bisim_metric(m, cfg)
        assert np.abs(bisim_operator(m, d, c) - d.d).max() <= cfg.tol * c / (1 - c) + cfg.tol
        assert lint_metric(d.d, r_max=m.r_max) == []


def test_least_fixed_point_below_other_fixed_point():
    # a 2-state loop where the two ends are genuinely bisimilar: d = 0 is the least fixed point
    P = np.array([[[0.0, 1.0]], [[1.0, 0.0]]])
    m = FiniteMDP(P, np.array([[0.5], [0.5]]), 0.9, np.array([0.5, 0.5]))
    d = bisim_metric(m)
    assert d.d[0, 1] == 0.0
    # a nonzero guess is pulled toward zero by the factor c
    assert bisim_operator(m, np.array([[0.0, 1.0], [1.0, 0.0]]), 0.5)[0, 1] == pytest.approx(0.5)


@pytest.mark.parametrize("c", [0.3, 0.5, 0.9])
def test_contraction(c, rng):
    for _ in range(20):
        m = random_mdp(rng, n=4, A=2)
        d1 = random_pseudometric(rng, 4)
        d2 = random_pseudometric(rng, 4)
        lhs = np.abs(bisim_operator(m, d1, c) - bisim_operator(m, d2, c)).max()
        assert lhs <= c * np.abs(d1 - d2).max() + 1e-12
        pi = rng.dirichlet(np.ones(2), size=4)
        lhs = np.abs(pi_bisim_operator(m, pi, d1, c) - pi_bisim_operator(m, pi, d2, c)).max()
        assert lhs <= c * np.abs(d1 - d2).max() + 1e-12


def test_pi_single_action_equals_bisim(rng):
    m = random_mdp(rng, n=5, A=1)
    a = bisim_metric(m, MetricConfig(tol=1e-12))
    b = pi_bisim_metric(m, np.ones((5, 1)), MetricConfig(tol=1e-12, mode="pi"))
    np.testing.assert_allclose(a.d, b.d, atol=1e-12)


def test_pi_symmetric_states_zero_distance():
    # states 1 and 2 are mirror images under swapping actions; uniform pi makes them identical
    P = np.zeros((3, 2, 3))
    P[0, :, 0] = 1.0
    P[1, 0] = [0.7, 0.3, 0.0]
    P[1, 1] = [0.2, 0.0, 0.8]
    P[2, 0] = [0.2, 0.8, 0.0]
    P[2, 1] = [0.7, 0.0, 0.3]
    R = np.array([[0.0, 0.0], [1.0, 0.3], [0.3, 1.0]])
    m = FiniteMDP(P, R, 0.9, np.ones(3) / 3)
    d = pi_bisim_metric(m, PolicyTable.uniform(3, 2))
    assert d.d[1, 2] <= 1e-9
    assert d.d[0, 1] > 0.1


def test_super_mdp_consistency(env6):
    _, _, pi = soft_value_iteration(env6.base, 0.1)
    base = pi_bisim_metric(env6.base, pi, MetricConfig(tol=1e-10, mode="pi"))
    H, J = build_super_mdp(env6)
    lifted = pi.probs[J.state_of]
    joint = pi_bisim_metric(H, lifted, MetricConfig(tol=1e-10, mode="pi"), index_kind="joint")
    np.testing.assert_allclose(joint.d, base.d[np.ix_(J.state_of, J.state_of)], atol=1e-6)
    assert joint.index_kind == "joint"


def test_zero_classes():
    assert zero_classes(1.0 - np.eye(3)) == [[0], [1], [2]]
    assert zero_classes(np.zeros((3, 3))) == [[0, 1, 2]]
    rng = np.random.default_rng(3)
    m = random_mdp(rng, n=4)
    P = np.concatenate([m.transition, np.zeros((2, 2, 4))], axis=0)
    P = np.concatenate([P, np.zeros((6, 2, 2))], axis=2)
    # states 4 and 5 duplicate states 1 and 3, including their outgoing rows
    P[4], P[5] = P[1], P[3]
    R = np.concatenate([m.reward, m.reward[[1, 3]]])
    dup = FiniteMDP(P, R, 0.9, np.full(6, 1 / 6))
    blocks = zero_classes(bisim_metric(dup), tol=1e-6)
    assert [1, 4] in blocks and [3, 5] in blocks


def test_config_validation():
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            MetricConfig(c=bad)
    assert MetricConfig(c=0.0, allow_zero_c=True).c == 0.0
    with pytest.raises(ValueError):
        MetricConfig(tol=0.0)
    with pytest.raises(ValueError):
        MetricConfig(mode="mean")


def test_non_convergence(rng):
    with pytest.raises(NonConvergence):
        bisim_metric(random_mdp(rng), MetricConfig(c=0.99, tol=1e-12, max_iters=5))


def test_zero_c_is_reward_difference(rng):
    m = random_mdp(rng, n=4)
    d = bisim_metric(m, MetricConfig(c=0.0, allow_zero_c=True))
    expect = np.abs(m.reward[:, None, :] - m.reward[None, :, :]).max(axis=2)
    np.testing.assert_allclose(d.d, expect, atol=1e-15)


def test_lint_and_triangle():
    d = np.array([[0.0, 1.0, 3.0], [1.0, 0.0, 1.0], [3.0, 1.0, 0.0]])
    assert triangle_violation(d) == pytest.approx(1.0)
    assert any("triangle" in p for p in lint_metric(d))
    assert "not symmetric" in lint_metric(np.array([[0.0, 1.0], [2.0, 0.0]]))
    assert any("exceeds" in p for p in lint_metric(np.array([[0.0, 2.0], [2.0, 0.0]]), r_max=1.0))


def test_csv_round_trip(tmp_path, rng):
    d = PseudoMetric(random_pseudometric(rng, 5), "joint")
    write_metric_csv(d, tmp_path / "d.csv")
    back = read_metric_csv(tmp_path / "d.csv")
    assert back.index_kind == "joint"
    assert back.d.tobytes() == d.d.tobytes()
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "joint,0,1,2,3,4"


def test_l1_embedding_exact_for_line_metric():
    x = np.array([0.0, 0.3, 1.1, 2.0])
    d = np.abs(x[:, None] - x[None, :])
    Y, misfit = l1_embedding(d)
    assert misfit <= 1e-9
    np.testing.assert_allclose(np.abs(Y[:, None] - Y[None]).sum(axis=2), d, atol=1e-9)


def test_l1_embedding_reports_misfit_for_non_l1_metric():
    # K_{2,3} shortest-path metric is not isometrically L1-embeddable
    d = np.full((5, 5), 2.0)
    d[:2, 2:] = d[2:, :2] = 1.0
    np.fill_diagonal(d, 0.0)
    _, misfit = l1_embedding(d)
    assert misfit > 1e-3
    with pytest.raises(ValueError):
        l1_embedding(np.zeros((11, 11)))


def test_bisim_metric_of_random_cmdp_is_l1_embeddable():
    cm = generate_env("random_cmdp", {}, 0)
    _, _, pi = soft_value_iteration(cm.base, 0.1)
    d = pi_bisim_metric(cm.base, pi)
    _, misfit = l1_embedding(d)
    assert misfit <= 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.integers(1, 3), st.sampled_from([0.3, 0.5, 0.9]))
def test_metric_invariants_hold(seed, n, A, c):
    m = random_mdp(np.random.default_rng(seed), n=n, A=A)
    d = bisim_metric(m, MetricConfig(c=c, tol=1e-9))
    assert lint_metric(d.d, r_max=m.r_max) == []
    assert d.sup <= m.r_max + 1e-9


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(1, 8))
def test_w1_duality_property(seed, n, k):
    rng = np.random.default_rng(seed)
    n = max(n, k)
    ground = random_pseudometric(rng, n)
    p = np.zeros(n)
    q = np.zeros(n)
    p[rng.choice(n, size=k, replace=False)] = rng.dirichlet(np.ones(k))
    q[rng.choice(n, size=k, replace=False)] = rng.dirichlet(np.ones(k))
    cost, _ = wasserstein1(p, q, ground)
    assert abs(cost - w1_dual_lp(p, q, ground)) <= 1e-9
