"""Context-conditional embeddings and the pairwise representation loss.

Embeddings map an (observation, context) tuple to R^m and measure distances in
L1.  Two architectures are provided: a dense table keyed by (observation id,
context id) for tabular environments, and a tanh perceptron over the raw
observation vector concatenated with the context value.

Stopped gradients are realized with a frozen parameter snapshot: in every
pairwise distance one operand comes from the live parameters and the other from
the snapshot, alternating sides from pair to pair.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from .cmdp import ContextualMDP, canonical_json
from .errors import ModeMismatch, NaNGuard
from .metric import MetricConfig, PseudoMetric, pi_bisim_metric, transport, w2_gaussian_batch
from .solver import soft_value_iteration

SIGMA_FLOOR = 1e-4
CHECKPOINT_FORMAT = "condbisim-ckpt/1"


# --------------------------------------------------------------------------
# embeddings


class TableEmbedding:
    """One free vector per (observation id, context id)."""

    arch = "table"

    def __init__(self, table: np.ndarray):
        self.params = {"table": np.array(table, dtype=float)}

    @classmethod
    def random(cls, cmdp: ContextualMDP, out_dim: int, rng: np.random.Generator, scale: float = 0.1):
        return cls(rng.normal(0.0, scale, size=(cmdp.n_obs, cmdp.n_contexts, out_dim)))

    @classmethod
    def from_state_embedding(cls, cmdp: ContextualMDP, Y: np.ndarray):
        """Context-invariant embedding that sends every rendering of state s to ``Y[s]``."""
        Y = np.asarray(Y, dtype=float)
        owner = cmdp.obs_state()
        return cls(np.repeat(Y[owner][:, None, :], cmdp.n_contexts, axis=1))

    @property
    def out_dim(self) -> int:
        return self.params["table"].shape[2]

    def inputs(self, cmdp, states, obs_ctx, ctx, obs_map=None, noise_state=None):
        if obs_map is not None:
            raise KeyError("a table embedding has no entries for re-rendered observations")
        states, obs_ctx, ctx = np.broadcast_arrays(np.asarray(states), np.asarray(obs_ctx), np.asarray(ctx))
        return np.stack([cmdp.obs_ids[obs_ctx, states], ctx], axis=-1)

    def forward(self, x):
        x = np.asarray(x, dtype=int)
        return self.params["table"][x[:, 0], x[:, 1]], x

    def backward(self, cache, dY):
        g = np.zeros_like(self.params["table"])
        np.add.at(g, (cache[:, 0], cache[:, 1]), dY)
        return {"table": g}

    def copy(self):
        out = TableEmbedding.__new__(TableEmbedding)
        out.params = {k: v.copy() for k, v in self.params.items()}
        return out

    def config(self) -> dict:
        return {"arch": self.arch}


class MLPEmbedding:
    """``phi(z, theta)``: tanh hidden layers over ``[z, theta]``, linear output."""

    arch = "mlp"

    def __init__(self, weights, biases, use_context: bool = True, use_noise: bool = True):
        self.params = {}
        for k, (W, b) in enumerate(zip(weights, biases)):
            self.params[f"W{k}"] = np.array(W, dtype=float)
            self.params[f"b{k}"] = np.array(b, dtype=float)
        self.n_layers = len(weights)
        self.use_context = use_context
        self.use_noise = use_noise

    @classmethod
    def random(cls, in_dim: int, ctx_dim: int, widths, out_dim: int, rng: np.random.Generator,
               scale: float = 1.0, use_context: bool = True, use_noise: bool = True):
        sizes = [in_dim + ctx_dim, *widths, out_dim]
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            Ws.append(rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(Ws, bs, use_context, use_noise)

    @classmethod
    def for_env(cls, cmdp: ContextualMDP, widths, out_dim: int, rng: np.random.Generator, **kw):
        use_noise = kw.pop("use_noise", True)
        in_dim = cmdp.obs_dim + (cmdp.noise_dims if use_noise else 0)
        return cls.random(in_dim, cmdp.contexts.values.shape[1], widths, out_dim, rng,
                          use_noise=use_noise, **kw)

    @property
    def out_dim(self) -> int:
        return self.params[f"W{self.n_layers - 1}"].shape[1]

    def inputs(self, cmdp, states, obs_ctx, ctx, obs_map=None, noise_state=None):
        F = cmdp.obs_map if obs_map is None else obs_map
        states, obs_ctx, ctx = np.broadcast_arrays(np.asarray(states), np.asarray(obs_ctx), np.asarray(ctx))
        z = F[obs_ctx, states]
        if cmdp.noise is not None and self.use_noise:
            ns = np.zeros(len(states), dtype=int) if noise_state is None else \
                np.broadcast_to(np.asarray(noise_state), states.shape)
            noise = np.stack([cmdp.noise.values(int(n)) for n in ns]) if len(ns) else \
                np.zeros((0, cmdp.noise_dims))
            z = np.concatenate([z, noise], axis=1)
        theta = cmdp.contexts.values[ctx]
        if not self.use_context:
            theta = np.zeros_like(theta)
        return np.concatenate([z, theta], axis=1)

    def forward(self, x):
        h = np.asarray(x, dtype=float)
        acts = [h]
        for k in range(self.n_layers):
            h = h @ self.params[f"W{k}"] + self.params[f"b{k}"]
            if k < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts, dY):
        grads = {}
        delta = dY
        for k in range(self.n_layers - 1, -1, -1):
            grads[f"W{k}"] = acts[k].T @ delta
            grads[f"b{k}"] = delta.sum(axis=0)
            if k > 0:
                delta = (delta @ self.params[f"W{k}"].T) * (1.0 - acts[k] ** 2)
        return grads

    def copy(self):
        out = MLPEmbedding.__new__(MLPEmbedding)
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.n_layers = self.n_layers
        out.use_context = self.use_context
        out.use_noise = self.use_noise
        return out

    def config(self) -> dict:
        return {"arch": self.arch, "use_context": self.use_context, "use_noise": self.use_noise}


def apply_gradient(model, grads: dict, lr: float) -> None:
    for k, g in grads.items():
        model.params[k] -= lr * g


def flat_params(model) -> np.ndarray:
    return np.concatenate([model.params[k].ravel() for k in sorted(model.params)])


def set_flat_params(model, vec: np.ndarray) -> None:
    pos = 0
    for k in sorted(model.params):
        size = model.params[k].size
        model.params[k] = vec[pos:pos + size].reshape(model.params[k].shape).copy()
        pos += size


def flat_grads(model, grads: dict) -> np.ndarray:
    return np.concatenate([grads.get(k, np.zeros_like(model.params[k])).ravel()
                           for k in sorted(model.params)])


def encode(phi, cmdp: ContextualMDP, states, obs_ctx, ctx, obs_map=None, noise_state=None) -> np.ndarray:
    """``phi(f_{obs_ctx}(s), ctx)`` for an array of latent states."""
    states = np.atleast_1d(np.asarray(states, dtype=int))
    y, _ = phi.forward(phi.inputs(cmdp, states, obs_ctx, ctx, obs_map, noise_state))
    return y


def embed_all(phi, cmdp: ContextualMDP, obs_map=None, noise_state=None) -> np.ndarray:
    """Embeddings of every matched tuple, shape (n_contexts, n_states, m)."""
    S = np.arange(cmdp.n_states)
    return np.stack([encode(phi, cmdp, S, t, t, obs_map, noise_state) for t in range(cmdp.n_contexts)])


def compute_delta(phi, cmdp: ContextualMDP, d_S) -> float:
    """``max |  |phi(f_i(s), i) - phi(f_j(s'), j)|_1 - d_S(s, s') |`` over states and contexts."""
    d = d_S.d if isinstance(d_S, PseudoMetric) else np.asarray(d_S, dtype=float)
    Y = embed_all(phi, cmdp)
    K, S, m = Y.shape
    flat = Y.reshape(K * S, m)
    D = np.abs(flat[:, None, :] - flat[None, :, :]).sum(axis=2)
    states = np.tile(np.arange(S), K)
    return float(np.abs(D - d[np.ix_(states, states)]).max())


def icc_residual(phi, cmdp: ContextualMDP) -> float:
    """Largest L1 gap between two renderings of the same state."""
    Y = embed_all(phi, cmdp)  # (K, S, m)
    gaps = np.abs(Y[:, None] - Y[None, :]).sum(axis=3)
    return float(gaps.max())


# --------------------------------------------------------------------------
# representation loss


@dataclass
class RepLossConfig:
    lambda_base: float = 0.24
    lambda_icc: float = 0.32
    lambda_cc: float = 0.24
    gamma_t: float = 0.99
    target_mode: str = "model-w2"  # "oracle" | "model-w2" | "model-w1"
    snapshot_period: int = 1
    w1_nodes: int = 5

    def __post_init__(self):
        lams = (self.lambda_base, self.lambda_icc, self.lambda_cc)
        if min(lams) < 0 or max(lams) <= 0:
            raise ValueError("loss weights must be nonnegative with at least one positive")
        if not 0.0 <= self.gamma_t < 1.0:
            raise ValueError("gamma_t must lie in [0, 1)")
        if self.target_mode not in ("oracle", "model-w2", "model-w1"):
            raise ModeMismatch(f"unknown target mode {self.target_mode!r}")
        if self.snapshot_period < 1:
            raise ValueError("snapshot_period must be at least 1")


@dataclass
class TransitionBatch:
    """Sampled transitions plus the alternate context each one is re-rendered under."""

    cmdp: ContextualMDP
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    ctx: np.ndarray
    alt_ctx: np.ndarray
    perm: np.ndarray
    noise: np.ndarray | None = None
    noise_next: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.s)

    def view(self, rows: np.ndarray, side: str, which: int):
        """(states, render context, noise) of the ``side`` member of each pair under context ``which``."""
        idx = rows if side == "i" else self.perm[rows]
        ctx = self.ctx[rows] if which == 1 else self.alt_ctx[rows]
        noise = None if self.noise is None else self.noise[idx]
        return self.s[idx], ctx, noise


_SETS = (("i", 1), ("i", 2), ("j", 1), ("j", 2))


def _render(phi, batch: TransitionBatch):
    rows = np.arange(len(batch))
    out = {}
    for key in _SETS:
        s, ctx, noise = batch.view(rows, *key)
        out[key] = phi.inputs(batch.cmdp, s, ctx, ctx, noise_state=noise)
    return out


def rep_loss_and_grad(batch: TransitionBatch, phi, targets, cfg: RepLossConfig, frozen=None,
                      terms: dict | None = None):
    """Three-term pairwise loss and its gradient w.r.t. the live parameters of ``phi``.

    ``frozen`` supplies the stopped-gradient operands (defaults to ``phi``
    itself, which gives the loss value with the gradient of the live side only).
    """
    frozen = phi if frozen is None else frozen
    T = np.asarray(targets, dtype=float)
    B = len(batch)
    inputs = _render(phi, batch)
    live, caches, fro = {}, {}, {}
    for key in _SETS:
        live[key], caches[key] = phi.forward(inputs[key])
        fro[key] = frozen.forward(inputs[key])[0] if frozen is not phi else live[key]
    left_live = (np.arange(B) % 2 == 0)[:, None]
    dY = {key: np.zeros_like(live[key]) for key in _SETS}
    spec = (
        ("base", cfg.lambda_base, ("i", 1), ("j", 1), True),
        ("base", cfg.lambda_base, ("i", 2), ("j", 2), True),
        ("icc", cfg.lambda_icc, ("i", 1), ("i", 2), False),
        ("icc", cfg.lambda_icc, ("j", 1), ("j", 2), False),
        ("cc", cfg.lambda_cc, ("i", 1), ("j", 2), True),
        ("cc", cfg.lambda_cc, ("i", 2), ("j", 1), True),
    )
    sums = {"base": 0.0, "icc": 0.0, "cc": 0.0}
    total = 0.0
    for name, lam, ka, kb, with_target in spec:
        diff = np.where(left_live, live[ka] - fro[kb], fro[ka] - live[kb])
        dist = np.abs(diff).sum(axis=1)
        res = dist - T if with_target else dist
        sums[name] += float(np.sum(res * res) / B)
        if lam == 0:
            continue
        total += lam * float(np.sum(res * res) / B)
        g = (2.0 * lam / B) * res[:, None] * np.sign(diff)
        dY[ka] += np.where(left_live, g, 0.0)
        dY[kb] -= np.where(left_live, 0.0, g)
    if not np.isfinite(total):
        raise NaNGuard("representation loss is not finite")
    grads = None
    for key in _SETS:
        g = phi.backward(caches[key], dY[key])
        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
    if terms is not None:
        terms.update(sums)
    return total, grads


# --------------------------------------------------------------------------
# latent dynamics


class LatentDynamics:
    """Diagonal-Gaussian next-embedding model per (latent input, action).

    ``table`` keys on the discrete embedding input; ``linear`` is affine in the
    embedding, one map per action.  Standard deviations are floored at 1e-4.
    """

    def __init__(self, arch: str, params: dict, sigma_floor: float = SIGMA_FLOOR):
        if arch not in ("table", "linear"):
            raise ValueError(f"unknown dynamics arch {arch!r}")
        self.arch = arch
        self.params = {k: np.array(v, dtype=float) for k, v in params.items()}
        self.sigma_floor = sigma_floor

    @classmethod
    def table(cls, n_keys: int, n_actions: int, dim: int, init_log_sigma: float = 0.0):
        return cls("table", {"mu": np.zeros((n_keys, n_actions, dim)),
                             "log_sigma": np.full((n_keys, n_actions, dim), init_log_sigma)})

    @classmethod
    def linear(cls, n_actions: int, dim: int, rng: np.random.Generator, scale: float = 0.1,
               init_log_sigma: float = 0.0):
        eye = np.repeat(np.eye(dim)[None], n_actions, axis=0)
        return cls("linear", {
            "W": eye + rng.normal(0.0, scale / np.sqrt(dim), size=(n_actions, dim, dim)),
            "b": np.zeros((n_actions, dim)),
            "Ws": np.zeros((n_actions, dim, dim)),
            "bs": np.full((n_actions, dim), init_log_sigma),
        })

    def copy(self):
        return LatentDynamics(self.arch, {k: v.copy() for k, v in self.params.items()}, self.sigma_floor)

    def _raw(self, y, a, keys):
        a = np.asarray(a, dtype=int)
        if self.arch == "table":
            keys = np.asarray(keys, dtype=int)
            return self.params["mu"][keys, a], self.params["log_sigma"][keys, a]
        mu = np.einsum("bi,bij->bj", y, self.params["W"][a]) + self.params["b"][a]
        ls = np.einsum("bi,bij->bj", y, self.params["Ws"][a]) + self.params["bs"][a]
        return mu, ls

    def predict(self, y, a, keys=None):
        mu, ls = self._raw(y, a, keys)
        return mu, np.maximum(np.exp(ls), self.sigma_floor)

    def loss_and_grad(self, y, a, y_next, keys=None):
        """Mean of squared mean error plus Gaussian NLL for the spread (mean held fixed in the NLL)."""
        y = np.asarray(y, dtype=float)
        y_next = np.asarray(y_next, dtype=float)
        B = len(y_next)
        mu, ls = self._raw(y, a, keys)
        raw_sigma = np.exp(ls)
        sigma = np.maximum(raw_sigma, self.sigma_floor)
        err = y_next - mu
        mse = np.sum(err * err) / B
        nll = np.sum(np.log(sigma) + err * err / (2.0 * sigma * sigma)) / B
        loss = float(mse + nll)
        if not np.isfinite(loss):
            raise NaNGuard("dynamics loss is not finite")
        d_mu = -2.0 * err / B
        d_ls = np.where(raw_sigma > self.sigma_floor, 1.0 - err * err / (sigma * sigma), 0.0) / B
        a = np.asarray(a, dtype=int)
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        if self.arch == "table":
            keys = np.asarray(keys, dtype=int)
            np.add.at(grads["mu"], (keys, a), d_mu)
            np.add.at(grads["log_sigma"], (keys, a), d_ls)
        else:
            np.add.at(grads["W"], a, np.einsum("bi,bj->bij", y, d_mu))
            np.add.at(grads["b"], a, d_mu)
            np.add.at(grads["Ws"], a, np.einsum("bi,bj->bij", y, d_ls))
            np.add.at(grads["bs"], a, d_ls)
        return loss, grads

    def config(self) -> dict:
        return {"arch": self.arch, "sigma_floor": self.sigma_floor}


def dynamics_keys(cmdp: ContextualMDP, states, ctx) -> np.ndarray:
    """Table-dynamics key of each matched (observation, context) input."""
    return cmdp.obs_ids[np.asarray(ctx), np.asarray(states)] * cmdp.n_contexts + np.asarray(ctx)


def _dynamics_io(phi, batch: TransitionBatch, rows=None):
    rows = np.arange(len(batch)) if rows is None else rows
    cm = batch.cmdp
    ctx = batch.ctx[rows]
    noise = None if batch.noise is None else batch.noise[rows]
    noise_next = None if batch.noise_next is None else batch.noise_next[rows]
    y = encode(phi, cm, batch.s[rows], ctx, ctx, noise_state=noise)
    y_next = encode(phi, cm, batch.s_next[rows], ctx, ctx, noise_state=noise_next)
    return y, y_next, dynamics_keys(cm, batch.s[rows], ctx)


def fit_latent_dynamics(dynamics: LatentDynamics, phi, batch: TransitionBatch, lr: float) -> LatentDynamics:
    """One gradient step of the dynamics model toward the (frozen) next embeddings."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    out = dynamics.copy()
    if lr == 0:
        return out
    y, y_next, keys = _dynamics_io(phi, batch)
    _, grads = dynamics.loss_and_grad(y, batch.a, y_next, keys)
    apply_gradient(out, grads, lr)
    return out


def _gaussian_nodes(k: int) -> np.ndarray:
    return norm.ppf((np.arange(k) + 0.5) / k)


def compute_targets(batch: TransitionBatch, phi_frozen, dynamics: LatentDynamics | None,
                    cfg: RepLossConfig, metric: PseudoMetric | None = None) -> np.ndarray:
    """Target distances ``T_ij`` for every pair in the batch."""
    rows = np.arange(len(batch))
    j = batch.perm
    if cfg.target_mode == "oracle":
        if metric is None:
            raise ModeMismatch("oracle targets need a ground-truth metric")
        return metric.d[batch.s[rows], batch.s[j]].copy()
    if dynamics is None:
        raise ModeMismatch(f"{cfg.target_mode} targets need a latent dynamics model")
    cm = batch.cmdp
    t1 = batch.ctx[rows]
    ni = None if batch.noise is None else batch.noise[rows]
    nj = None if batch.noise is None else batch.noise[j]
    y_i = encode(phi_frozen, cm, batch.s[rows], t1, t1, noise_state=ni)
    y_j = encode(phi_frozen, cm, batch.s[j], t1, t1, noise_state=nj)
    mu_i, sd_i = dynamics.predict(y_i, batch.a[rows], dynamics_keys(cm, batch.s[rows], t1))
    mu_j, sd_j = dynamics.predict(y_j, batch.a[j], dynamics_keys(cm, batch.s[j], t1))
    if cfg.target_mode == "model-w2":
        dist = w2_gaussian_batch(mu_i, sd_i, mu_j, sd_j)
    else:
        nodes = _gaussian_nodes(cfg.w1_nodes)
        k = len(nodes)
        w = np.full(k, 1.0 / k)
        dist = np.empty(len(batch))
        for b in rows:
            xi = mu_i[b] + nodes[:, None] * sd_i[b]
            xj = mu_j[b] + nodes[:, None] * sd_j[b]
            cost = np.abs(xi[:, None, :] - xj[None, :, :]).sum(axis=2)
            dist[b] = transport(w, w, cost)[0]
    return np.abs(batch.r[rows] - batch.r[j]) + cfg.gamma_t * dist


# --------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    rep: RepLossConfig = field(default_factory=RepLossConfig)
    arch: str = "table"
    out_dim: int = 8
    widths: tuple = (32, 32)
    init_scale: float = 0.1
    lr: float = 0.05
    dyn_lr: float = 0.1
    dyn_arch: str = "table"
    steps: int = 2000
    batch_size: int = 64
    epoch_len: int = 100
    c: float = 0.5
    temperature: float = 0.1
    anneal: bool = True

    def to_dict(self) -> dict:
        out = asdict(self)
        out["widths"] = list(self.widths)
        return out


def anneal_weight(step: int, total: int) -> float:
    """Representation-loss weight ``1.8 - 0.8 * 2 ** (step / total)`` (1 at the start, 0.2 at the end)."""
    if total <= 0:
        return 1.0
    return 1.8 - 0.8 * 2.0 ** (step / total)


def true_metric(cmdp: ContextualMDP, c: float, temperature: float = 0.1, tol: float = 1e-9) -> PseudoMetric:
    """On-policy bisimulation metric of the max-entropy optimal policy on the latent states."""
    _, _, pi = soft_value_iteration(cmdp.base, temperature)
    return pi_bisim_metric(cmdp.base, pi, MetricConfig(c=c, tol=tol, mode="pi"))


def init_embedding(cmdp: ContextualMDP, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.arch == "table":
        return TableEmbedding.random(cmdp, cfg.out_dim, rng, cfg.init_scale)
    if cfg.arch == "mlp":
        return MLPEmbedding.for_env(cmdp, cfg.widths, cfg.out_dim, rng, scale=cfg.init_scale)
    raise ValueError(f"unknown embedding arch {cfg.arch!r}")


def init_dynamics(cmdp: ContextualMDP, cfg: TrainConfig, rng: np.random.Generator) -> LatentDynamics:
    if cfg.dyn_arch == "table":
        return LatentDynamics.table(cmdp.n_obs * cmdp.n_contexts, cmdp.base.n_actions, cfg.out_dim)
    return LatentDynamics.linear(cmdp.base.n_actions, cfg.out_dim, rng)


def sample_transitions(cmdp: ContextualMDP, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
    """Simulator batch with uniform states, actions and context pairs (exploring starts)."""
    base = cmdp.base
    s = rng.integers(base.n_states, size=batch_size)
    a = rng.integers(base.n_actions, size=batch_size)
    cum = np.cumsum(base.transition[s, a], axis=1)
    u = rng.random(batch_size)[:, None]
    s_next = np.minimum((u > cum).sum(axis=1), base.n_states - 1)
    ctx = rng.choice(cmdp.n_contexts, size=batch_size, p=cmdp.contexts.probs)
    alt = rng.choice(cmdp.n_contexts, size=batch_size, p=cmdp.contexts.probs)
    noise = noise_next = None
    if cmdp.noise is not None:
        noise = rng.integers(cmdp.noise.n_joint, size=batch_size)
        noise_next = np.array([cmdp.noise.step(int(n), rng) for n in noise])
    perm = rng.permutation(batch_size)
    return TransitionBatch(cmdp, s, a, base.reward[s, a], s_next, ctx, alt, perm, noise, noise_next)


class EmbeddingTrainer:
    """Sample, compute targets, take a loss step, fit dynamics; history kept per epoch."""

    def __init__(self, cmdp: ContextualMDP, cfg: TrainConfig, seed: int = 0):
        self.cmdp = cmdp
        self.cfg = cfg
        ss = np.random.SeedSequence(seed)
        init_ss, data_ss, probe_ss = ss.spawn(3)
        init_rng = np.random.default_rng(init_ss)
        self.rng = np.random.default_rng(data_ss)
        self.phi = init_embedding(cmdp, cfg, init_rng)
        self.dynamics = init_dynamics(cmdp, cfg, init_rng)
        self.snapshot = self.phi.copy()
        self.metric = true_metric(cmdp, cfg.c, cfg.temperature)
        self.probe = sample_transitions(cmdp, cfg.batch_size, np.random.default_rng(probe_ss))
        self.step_count = 0
        self.history: list[dict] = []

    def targets(self, batch: TransitionBatch) -> np.ndarray:
        return compute_targets(batch, self.snapshot, self.dynamics, self.cfg.rep, self.metric)

    def record(self) -> dict:
        terms: dict = {}
        loss, _ = rep_loss_and_grad(self.probe, self.phi, self.targets(self.probe), self.cfg.rep,
                                    frozen=self.snapshot, terms=terms)
        row = {"epoch": len(self.history), "step": self.step_count, "loss": loss,
               "loss_base": terms["base"], "loss_icc": terms["icc"], "loss_cc": terms["cc"],
               "delta": compute_delta(self.phi, self.cmdp, self.metric),
               "icc_residual": icc_residual(self.phi, self.cmdp)}
        self.history.append(row)
        return row

    def step(self) -> float:
        cfg = self.cfg
        batch = sample_transitions(self.cmdp, cfg.batch_size, self.rng)
        weight = anneal_weight(self.step_count, cfg.steps) if cfg.anneal else 1.0
        loss, grads = rep_loss_and_grad(batch, self.phi, self.targets(batch), cfg.rep, frozen=self.snapshot)
        apply_gradient(self.phi, grads, cfg.lr * weight)
        if cfg.rep.target_mode != "oracle":
            self.dynamics = fit_latent_dynamics(self.dynamics, self.snapshot, batch, cfg.dyn_lr)
        self.step_count += 1
        if self.step_count % cfg.rep.snapshot_period == 0:
            self.snapshot = self.phi.copy()
        return loss

    def run(self, steps: int | None = None):
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            if self.step_count % self.cfg.epoch_len == 0:
                self.record()
            self.step()
        self.record()
        return self.phi, self.dynamics, self.history


def train_embedding(cmdp: ContextualMDP, cfg: TrainConfig, seed: int = 0):
    return EmbeddingTrainer(cmdp, cfg, seed).run()


# --------------------------------------------------------------------------
# persistence


def config_hash(cfg) -> str:
    data = cfg.to_dict() if hasattr(cfg, "to_dict") else asdict(cfg)
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()


def _model_doc(model) -> dict:
    doc = dict(model.config())
    doc["params"] = {k: v.tolist() for k, v in sorted(model.params.items())}
    return doc


def save_checkpoint(path, phi, dynamics: LatentDynamics | None, cfg=None) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "embedding": _model_doc(phi),
           "dynamics": None if dynamics is None else _model_doc(dynamics),
           "config_hash": None if cfg is None else config_hash(cfg)}
    with open(path, "w") as fh:
        fh.write(canonical_json(doc))
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    e = doc["embedding"]
    params = {k: np.array(v) for k, v in e["params"].items()}
    if e["arch"] == "table":
        phi = TableEmbedding(params["table"])
    else:
        n = len([k for k in params if k.startswith("W")])
        phi = MLPEmbedding([params[f"W{k}"] for k in range(n)], [params[f"b{k}"] for k in range(n)],
                           e["use_context"], e.get("use_noise", True))
    dyn = None
    if doc["dynamics"] is not None:
        d = doc["dynamics"]
        dyn = LatentDynamics(d["arch"], d["params"], d["sigma_floor"])
    return phi, dyn, doc["config_hash"]


HISTORY_FIELDS = ("epoch", "step", "loss", "loss_base", "loss_icc", "loss_cc", "delta", "icc_residual")


def write_history_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row[k] if isinstance(row[k], int) else format(row[k], ".17g") for k in HISTORY_FIELDS])
