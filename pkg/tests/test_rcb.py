import csv

import numpy as np
import pytest

from condbisim.cmdp import generate_env
from condbisim.embed import MLPEmbedding, RepLossConfig, TableEmbedding
from condbisim.rcb import (CURVE_FIELDS, PRESETS, RCBConfig, ReplayBuffer, SoftQCodebook, evaluate_across_contexts,
                           preset_loss, product_mdp, run_rcb, write_curve_csv)
from condbisim.solver import LatentPolicy, policy_evaluation


@pytest.fixture(scope="module")
def grid():
    return generate_env("scrambled_grid", {"side": 3, "n_contexts": 3, "noise_dims": 1}, 0)


def _small_cfg(**kw):
    base = dict(total_steps=400, batch_size=16, initial_steps=200, eval_period=100, n_codes=4,
                codebook_period=100, codebook_sample=64, widths=(8,), out_dim=3, gamma=0.9)
    base.update(kw)
    return RCBConfig(**base)


def test_presets_zero_the_right_weights():
    rep = RepLossConfig()
    assert set(PRESETS) == {"full", "no-base", "no-cc", "no-icc", "no-cc-no-icc"}
    dbc = preset_loss(rep, "no-cc-no-icc")
    assert (dbc.lambda_base, dbc.lambda_icc, dbc.lambda_cc) == (0.24, 0.0, 0.0)
    assert preset_loss(rep, "no-base").lambda_base == 0.0
    assert preset_loss(rep, "no-cc").lambda_cc == 0.0
    assert preset_loss(rep, "no-icc").lambda_icc == 0.0
    assert preset_loss(rep, "full") == rep
    with pytest.raises(ValueError):
        preset_loss(rep, "none")


def test_config_validation():
    with pytest.raises(ValueError):
        RCBConfig(preset="bogus")
    with pytest.raises(ValueError):
        RCBConfig(alt_schedule="never")
    with pytest.raises(ValueError):
        RCBConfig(batch_size=1)
    with pytest.raises(ValueError):
        RCBConfig(gamma=1.0)
    assert RCBConfig().to_dict()["widths"] == [64, 64]
    assert RCBConfig().batch_size == 512 and RCBConfig().initial_steps == 1000


def _row(i):
    return dict(s=i, a=0, r=0.5, s_next=i + 1, ctx=0, alt=1, noise=0, noise_next=0)


def test_replay_fifo_eviction():
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.add(**_row(i))
    assert len(buf) == 3
    assert buf.data["s"][buf.indices()].tolist() == [2, 3, 4]
    with pytest.raises(ValueError):
        ReplayBuffer(0)


def test_replay_sampling_without_replacement(rng):
    buf = ReplayBuffer(50)
    for i in range(20):
        buf.add(**_row(i))
    rows = buf.sample(10, rng)
    assert len(set(rows["s"].tolist())) == 10
    np.testing.assert_array_equal(rows["s_next"], rows["s"] + 1)
    assert sorted(buf.sample(100, rng)["s"].tolist()) == list(range(20))


def test_product_mdp_without_noise_is_base(env6):
    assert product_mdp(env6) is env6.base


def test_exact_evaluation_matches_monte_carlo(grid, rng):
    phi = MLPEmbedding.for_env(grid, (8,), 2, rng)
    pol = LatentPolicy(rng.normal(size=(5, 2)), rng.dirichlet(np.ones(grid.base.n_actions), size=5))
    exact = evaluate_across_contexts(grid, phi, pol)
    mc = evaluate_across_contexts(grid, phi, pol, episodes_per_context=400, seed=1, horizon=120)
    for e, m, se in zip(exact["returns"], mc["returns"], mc["stderr"]):
        assert abs(e - m) <= 4 * se + grid.base.gamma ** 120 / (1 - grid.base.gamma)
    assert exact["stderr"] == [0.0] * 3
    assert exact["mean"] == pytest.approx(np.mean(exact["returns"]))


def test_evaluation_unseen_contexts_and_invariance(env6, rng):
    Ys = rng.normal(size=(env6.n_states, 2))
    phi = TableEmbedding.from_state_embedding(env6, Ys)
    pol = LatentPolicy(Ys, rng.dirichlet(np.ones(2), size=env6.n_states))
    out = evaluate_across_contexts(env6, phi, pol)
    np.testing.assert_allclose(out["returns"], out["returns"][0], atol=1e-12)
    pi = pol.action_probs(Ys)
    assert out["returns"][0] == pytest.approx(policy_evaluation(env6.base, pi).j, abs=1e-12)
    mlp = MLPEmbedding.for_env(env6, (8,), 2, rng)
    far = evaluate_across_contexts(env6, mlp, pol, contexts=[-2.0, 2.0])
    assert far["contexts"] == [-2.0, 2.0]


def test_codebook_soft_td_update():
    cb = SoftQCodebook(2, 2, 1, temperature=0.1, gamma=0.9)
    cb.refit(np.array([[0.0], [0.1], [5.0], [5.1]]), seed=0)
    assert len(cb.centroids) == 2
    y = np.array([[0.0], [0.0]])
    cb.update(y, np.array([1, 1]), np.array([1.0, 0.0]), np.array([[5.0], [5.0]]), lr=1.0)
    c = cb.codes(y)[0]
    # two TD targets (1 and 0) from q = 0 averaged: 0.5 + gamma * soft value of zeros
    assert cb.q[c, 1] == pytest.approx(0.5 + 0.9 * 0.1 * np.log(2))
    assert cb.q[c, 0] == 0.0


def test_zero_steps_returns_untrained_agent(grid):
    res = run_rcb(grid, _small_cfg(total_steps=0), seed=0)
    assert res.curve == []
    np.testing.assert_allclose(res.policy.probs, 1.0 / grid.base.n_actions)


def test_run_deterministic_and_complete(grid):
    a = run_rcb(grid, _small_cfg(), seed=3)
    b = run_rcb(grid, _small_cfg(), seed=3)
    np.testing.assert_equal(a.curve, b.curve)
    assert [row["step"] for row in a.curve] == [100, 200, 300, 400]
    for row in a.curve:
        assert set(CURVE_FIELDS) <= set(row)
        assert np.isfinite(row["eval_mean"])
    assert np.isfinite(a.curve[-1]["loss"]) and np.isfinite(a.curve[-1]["delta"])


def test_presets_share_prefix_until_first_update(grid):
    runs = [run_rcb(grid, _small_cfg(preset=p), seed=1).curve for p in ("full", "no-cc-no-icc")]
    # the first update happens on step initial_steps, after the first two evaluations
    np.testing.assert_equal(runs[0][0], runs[1][0])
    assert runs[0][1]["eval_mean"] == runs[1][1]["eval_mean"]
    assert runs[0][-1]["eval_mean"] != runs[1][-1]["eval_mean"]


def test_episode_alt_schedule_and_held_out_contexts(grid):
    cfg = _small_cfg(alt_schedule="episode", train_contexts=[0.0, 0.5], eval_contexts=[-1.0, 1.0])
    res = run_rcb(grid, cfg, seed=0)
    assert res.eval_contexts == [-1.0, 1.0]
    assert {"return_ctx0", "return_ctx1"} <= set(res.curve[-1])
    assert "return_ctx2" not in res.curve[-1]


def test_curve_csv(tmp_path, grid):
    res = run_rcb(grid, _small_cfg(total_steps=200), seed=0)
    write_curve_csv(res.curve, tmp_path / "c.csv")
    rows = list(csv.reader(open(tmp_path / "c.csv")))
    assert rows[0] == [*CURVE_FIELDS, "return_ctx0", "return_ctx1", "return_ctx2"]
    assert len(rows) == 1 + len(res.curve)
