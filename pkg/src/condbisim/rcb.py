"""Toy-scale agent loop: collect, re-render, train encoder, dynamics and a max-ent policy.

The policy is tabular soft Q-learning over a nearest-centroid codebook of the
embedding space.  Randomness is split into independent streams (environment,
actions, training batches, initialization) so presets that differ only in loss
weights see the same data until the first encoder update.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import logsumexp
from sklearn.cluster import KMeans

from .cmdp import ContextualMDP, FiniteMDP, extend_contexts, require_block_structure
from .embed import (MLPEmbedding, RepLossConfig, TransitionBatch, anneal_weight, apply_gradient,
                    compute_delta, compute_targets, encode, fit_latent_dynamics, init_dynamics,
                    rep_loss_and_grad, true_metric, TrainConfig)
from .errors import DivergenceGuard
from .solver import LatentPolicy, policy_evaluation, softmax

PRESETS = {
    "full": (True, True, True),
    "no-base": (False, True, True),
    "no-cc": (True, True, False),
    "no-icc": (True, False, True),
    "no-cc-no-icc": (True, False, False),
}


def preset_loss(rep: RepLossConfig, preset: str) -> RepLossConfig:
    """Loss config with the weights switched off by an ablation preset."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    keep_base, keep_icc, keep_cc = PRESETS[preset]
    return replace(rep, lambda_base=rep.lambda_base if keep_base else 0.0,
                   lambda_icc=rep.lambda_icc if keep_icc else 0.0,
                   lambda_cc=rep.lambda_cc if keep_cc else 0.0)


@dataclass
class RCBConfig:
    total_steps: int = 20_000
    batch_size: int = 512
    initial_steps: int = 1000
    gamma: float = 0.99
    temperature: float = 0.1
    rep: RepLossConfig = field(default_factory=RepLossConfig)
    preset: str = "full"
    eval_contexts: list | None = None  # context values; None means the training contexts
    train_contexts: list | None = None  # restrict training to these values (rest held out)
    episode_len: int = 50
    buffer_capacity: int = 100_000
    widths: tuple = (64, 64)
    out_dim: int = 8
    init_scale: float = 1.0
    encoder_lr: float = 0.01
    q_lr: float = 0.5
    dyn_lr: float = 0.05
    dyn_arch: str = "linear"
    n_codes: int = 32
    codebook_period: int = 250
    codebook_sample: int = 1024
    eval_period: int = 1000
    anneal: bool = True
    alt_schedule: str = "step"  # "step": fresh alternate context per training step; "episode": drawn at episode start
    bisim_c: float = 0.5  # transition weight of the reference metric used for the logged delta

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.alt_schedule not in ("step", "episode"):
            raise ValueError("alt_schedule must be 'step' or 'episode'")
        if self.total_steps < 0 or self.batch_size < 2 or self.initial_steps < 0:
            raise ValueError("invalid step counts")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


TOY_ENV = ("scrambled_grid", {"side": 4, "n_contexts": 5, "noise_dims": 2}, 3)
TOY_OOD_SPLIT = ([-0.5, 0.0, 0.5], [-1.0, 1.0])  # inner contexts for training, outer ones held out


def toy_config(preset: str = "full", ood: bool = False, **overrides) -> RCBConfig:
    """Desk-scale settings for the preset comparison on the 4x4 scrambled grid."""
    kw = dict(total_steps=6000, batch_size=64, initial_steps=500, gamma=0.9, eval_period=1000, n_codes=16,
              rep=RepLossConfig(gamma_t=0.9), preset=preset)
    if ood:
        kw["train_contexts"], kw["eval_contexts"] = map(list, TOY_OOD_SPLIT)
    kw.update(overrides)
    return RCBConfig(**kw)


class ReplayBuffer:
    """FIFO ring of transitions that keeps latent state and distractor ids for re-rendering."""

    FIELDS = ("s", "a", "r", "s_next", "ctx", "alt", "noise", "noise_next")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.data = {k: np.zeros(capacity, dtype=float if k == "r" else int) for k in self.FIELDS}
        self.size = 0
        self.pos = 0

    def __len__(self) -> int:
        return self.size

    def add(self, **row) -> None:
        for k in self.FIELDS:
            self.data[k][self.pos] = row[k]
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def indices(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (self.pos + np.arange(self.capacity)) % self.capacity

    def sample(self, n: int, rng: np.random.Generator) -> dict:
        """``n`` distinct rows uniformly (all rows when fewer are stored)."""
        idx = rng.choice(self.size, size=min(n, self.size), replace=False)
        return {k: v[idx] for k, v in self.data.items()}


def _batch(cmdp: ContextualMDP, rows: dict, alt: np.ndarray, perm: np.ndarray) -> TransitionBatch:
    noise = rows["noise"] if cmdp.noise is not None else None
    noise_next = rows["noise_next"] if cmdp.noise is not None else None
    return TransitionBatch(cmdp, rows["s"], rows["a"], rows["r"], rows["s_next"], rows["ctx"], alt, perm,
                           noise, noise_next)


# --------------------------------------------------------------------------
# exact evaluation


def product_mdp(cmdp: ContextualMDP) -> FiniteMDP:
    """Latent MDP times the distractor chain, indexed ``s * n_joint + n``."""
    base = cmdp.base
    if cmdp.noise is None:
        return base
    N = cmdp.noise.joint_transition()
    J = len(N)
    P = np.einsum("sat,nm->snatm", base.transition, N).reshape(base.n_states * J, base.n_actions, -1)
    R = np.repeat(base.reward, J, axis=0)
    rho = np.kron(base.initial_dist, cmdp.noise.initial())
    return FiniteMDP(P, R, base.gamma, rho, base.r_max)


def product_policy(cmdp: ContextualMDP, phi, policy: LatentPolicy, theta: int) -> np.ndarray:
    S = cmdp.n_states
    if cmdp.noise is None:
        return policy.action_probs(encode(phi, cmdp, np.arange(S), theta, theta))
    J = cmdp.noise.n_joint
    states = np.repeat(np.arange(S), J)
    noise = np.tile(np.arange(J), S)
    return policy.action_probs(encode(phi, cmdp, states, theta, theta, noise_state=noise))


def _mc_return(cmdp: ContextualMDP, phi, policy: LatentPolicy, theta: int, episodes: int, horizon: int,
               rng: np.random.Generator) -> tuple[float, float]:
    base = cmdp.base
    returns = np.zeros(episodes)
    for e in range(episodes):
        s = rng.choice(base.n_states, p=base.initial_dist)
        n = cmdp.noise.sample_initial(rng) if cmdp.noise is not None else None
        disc = 1.0
        for _ in range(horizon):
            probs = policy.action_probs(encode(phi, cmdp, [s], theta, theta, noise_state=n))[0]
            a = rng.choice(base.n_actions, p=probs / probs.sum())
            returns[e] += disc * base.reward[s, a]
            disc *= base.gamma
            s = rng.choice(base.n_states, p=base.transition[s, a])
            if n is not None:
                n = cmdp.noise.step(n, rng)
    se = float(returns.std(ddof=1) / math.sqrt(episodes)) if episodes > 1 else float("nan")
    return float(returns.mean()), se


def evaluate_across_contexts(cmdp: ContextualMDP, phi, policy: LatentPolicy, contexts=None,
                             episodes_per_context: int = 0, seed: int = 0, horizon: int = 200) -> dict:
    """Return of the policy under each listed context value and their mean.

    With ``episodes_per_context == 0`` the returns are exact (linear solve on the
    latent-times-distractor MDP); otherwise Monte Carlo estimates with standard
    errors over truncated episodes.
    """
    env = cmdp if contexts is None else extend_contexts(cmdp, contexts)
    require_block_structure(env)
    values = [v.tolist() if len(v) > 1 else float(v[0]) for v in env.contexts.values]
    per, se = [], []
    if episodes_per_context == 0:
        prod = product_mdp(env)
        for t in range(env.n_contexts):
            probs = product_policy(env, phi, policy, t)
            per.append(policy_evaluation(prod, probs / probs.sum(axis=1, keepdims=True)).j)
            se.append(0.0)
    else:
        ss = np.random.SeedSequence(seed)
        for t, child in enumerate(ss.spawn(env.n_contexts)):
            m, e = _mc_return(env, phi, policy, t, episodes_per_context, horizon, np.random.default_rng(child))
            per.append(m)
            se.append(e)
    if not np.isfinite(per).all():
        raise DivergenceGuard("evaluation return is not finite")
    return {"contexts": values, "returns": per, "stderr": se, "mean": float(np.mean(per))}


# --------------------------------------------------------------------------
# training loop


class SoftQCodebook:
    """Tabular soft Q over the codes of a nearest-centroid codebook."""

    def __init__(self, n_codes: int, n_actions: int, out_dim: int, temperature: float, gamma: float):
        self.centroids = np.zeros((1, out_dim))
        self.q = np.zeros((1, n_actions))
        self.n_codes = n_codes
        self.temperature = temperature
        self.gamma = gamma
        self.fitted = False

    def policy(self) -> LatentPolicy:
        return LatentPolicy(self.centroids, softmax(self.q, self.temperature))

    def refit(self, Y: np.ndarray, seed: int) -> None:
        k = min(self.n_codes, len(np.unique(Y.round(12), axis=0)))
        if self.fitted and len(self.centroids) == k:
            km = KMeans(k, init=self.centroids, n_init=1, random_state=seed).fit(Y)
        else:
            km = KMeans(k, n_init=4, random_state=seed).fit(Y)
            self.q = np.zeros((k, self.q.shape[1])) if not self.fitted else \
                self.q[self._codes_of(km.cluster_centers_)]
        self.centroids = km.cluster_centers_
        self.fitted = True

    def _codes_of(self, Y):
        return np.argmin(np.abs(Y[:, None, :] - self.centroids[None]).sum(axis=2), axis=1)

    def codes(self, Y: np.ndarray) -> np.ndarray:
        return self._codes_of(np.atleast_2d(Y))

    def update(self, y, a, r, y_next, lr: float) -> None:
        c, c_next = self.codes(y), self.codes(y_next)
        v_next = self.temperature * logsumexp(self.q[c_next] / self.temperature, axis=1)
        td = r + self.gamma * v_next - self.q[c, a]
        total = np.zeros_like(self.q)
        count = np.zeros_like(self.q)
        np.add.at(total, (c, a), td)
        np.add.at(count, (c, a), 1.0)
        seen = count > 0
        self.q[seen] += lr * total[seen] / count[seen]


CURVE_FIELDS = ("step", "train_return", "eval_mean", "loss", "loss_base", "loss_icc", "loss_cc", "delta")


@dataclass
class RCBResult:
    phi: object
    policy: LatentPolicy
    dynamics: object
    curve: list
    eval_contexts: list


def _streams(seed: int):
    env_ss, act_ss, train_ss, init_ss = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(env_ss), np.random.default_rng(act_ss),
            np.random.default_rng(train_ss), np.random.default_rng(init_ss))


def run_rcb(cmdp: ContextualMDP, cfg: RCBConfig, seed: int = 0) -> RCBResult:
    """Interleaved collection and training; the curve holds exact evaluation returns."""
    require_block_structure(cmdp)
    env = cmdp if cfg.train_contexts is None else extend_contexts(cmdp, cfg.train_contexts)
    eval_values = cfg.eval_contexts if cfg.eval_contexts is not None else \
        [v.tolist() if len(v) > 1 else float(v[0]) for v in env.contexts.values]
    rep = preset_loss(cfg.rep, cfg.preset)
    env_rng, act_rng, train_rng, init_rng = _streams(seed)
    base = env.base
    phi = MLPEmbedding.for_env(env, cfg.widths, cfg.out_dim, init_rng, scale=cfg.init_scale)
    dyn_cfg = TrainConfig(out_dim=cfg.out_dim, dyn_arch=cfg.dyn_arch)
    dynamics = init_dynamics(env, dyn_cfg, init_rng)
    snapshot = phi.copy()
    agent = SoftQCodebook(cfg.n_codes, base.n_actions, cfg.out_dim, cfg.temperature, cfg.gamma)
    metric = true_metric(env, cfg.bisim_c, cfg.temperature)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    curve: list[dict] = []
    episode_returns: list[float] = []
    ep_ret, ep_disc, ep_t = 0.0, 1.0, cfg.episode_len
    s = n = ctx = alt_ep = 0
    last_terms = {"base": float("nan"), "icc": float("nan"), "cc": float("nan")}
    last_loss = float("nan")
    for t in range(cfg.total_steps):
        if ep_t >= cfg.episode_len:
            if t > 0:
                episode_returns.append(ep_ret)
            ctx = int(env_rng.choice(env.n_contexts, p=env.contexts.probs))
            alt_ep = int(env_rng.choice(env.n_contexts, p=env.contexts.probs))
            s = int(env_rng.choice(base.n_states, p=base.initial_dist))
            n = env.noise.sample_initial(env_rng) if env.noise is not None else 0
            ep_ret, ep_disc, ep_t = 0.0, 1.0, 0
        if t < cfg.initial_steps or not agent.fitted:
            a = int(act_rng.integers(base.n_actions))
        else:
            y = encode(phi, env, [s], ctx, ctx, noise_state=[n] if env.noise is not None else None)
            probs = agent.policy().action_probs(y)[0]
            a = int(act_rng.choice(base.n_actions, p=probs / probs.sum()))
        s_next = int(env_rng.choice(base.n_states, p=base.transition[s, a]))
        n_next = env.noise.step(n, env_rng) if env.noise is not None else 0
        r = float(base.reward[s, a])
        buffer.add(s=s, a=a, r=r, s_next=s_next, ctx=ctx, alt=alt_ep, noise=n, noise_next=n_next)
        ep_ret += ep_disc * r
        ep_disc *= base.gamma
        ep_t += 1
        s, n = s_next, n_next

        if t + 1 >= cfg.initial_steps:
            k = t + 1 - cfg.initial_steps
            if k % cfg.codebook_period == 0:
                agent.refit(_codebook_points(env, phi, buffer, cfg.codebook_sample, train_rng),
                            int(train_rng.integers(2**31)))
            rows = buffer.sample(cfg.batch_size, train_rng)
            B = len(rows["s"])
            alt = train_rng.choice(env.n_contexts, size=B, p=env.contexts.probs) \
                if cfg.alt_schedule == "step" else rows["alt"]
            batch = _batch(env, rows, alt, train_rng.permutation(B))
            y, y_next = _encode_pair(phi, batch)
            agent.update(y, batch.a, batch.r, y_next, cfg.q_lr)
            targets = compute_targets(batch, snapshot, dynamics, rep, metric)
            weight = anneal_weight(k, cfg.total_steps - cfg.initial_steps) if cfg.anneal else 1.0
            last_loss, grads = rep_loss_and_grad(batch, phi, targets, rep, frozen=snapshot, terms=last_terms)
            apply_gradient(phi, grads, cfg.encoder_lr * weight)
            if rep.target_mode != "oracle":
                dynamics = fit_latent_dynamics(dynamics, snapshot, batch, cfg.dyn_lr)
            if (k + 1) % rep.snapshot_period == 0:
                snapshot = phi.copy()

        if (t + 1) % cfg.eval_period == 0:
            ev = evaluate_across_contexts(env, phi, agent.policy(), eval_values)
            recent = episode_returns[-20:]
            row = {"step": t + 1, "train_return": float(np.mean(recent)) if recent else float("nan"),
                   "eval_mean": ev["mean"], "loss": last_loss, "loss_base": last_terms["base"],
                   "loss_icc": last_terms["icc"], "loss_cc": last_terms["cc"],
                   "delta": compute_delta(phi, env, metric)}
            row.update({f"return_ctx{i}": v for i, v in enumerate(ev["returns"])})
            curve.append(row)
    return RCBResult(phi, agent.policy(), dynamics, curve, eval_values)


def _encode_pair(phi, batch: TransitionBatch):
    cm = batch.cmdp
    y = encode(phi, cm, batch.s, batch.ctx, batch.ctx, noise_state=batch.noise)
    y_next = encode(phi, cm, batch.s_next, batch.ctx, batch.ctx, noise_state=batch.noise_next)
    return y, y_next


def _codebook_points(env, phi, buffer: ReplayBuffer, n: int, rng) -> np.ndarray:
    rows = buffer.sample(n, rng)
    noise = rows["noise"] if env.noise is not None else None
    return encode(phi, env, rows["s"], rows["ctx"], rows["ctx"], noise_state=noise)


def write_curve_csv(curve: list[dict], path) -> None:
    extra = sorted({k for row in curve for k in row if k not in CURVE_FIELDS},
                   key=lambda k: int(k.removeprefix("return_ctx")))
    fields = [*CURVE_FIELDS, *extra]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for row in curve:
            w.writerow([row[k] if isinstance(row[k], int) else format(float(row[k]), ".17g") for k in fields])
