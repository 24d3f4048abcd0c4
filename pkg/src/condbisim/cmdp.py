"""Finite MDPs, contextual MDPs with per-context observation maps, and generators.

A contextual MDP here shares one latent MDP across all contexts; a context only
changes how latent states are rendered into observation vectors.  Observation
ids enumerate distinct observation vectors in first-appearance order
(context-major), which is what table embeddings and joint indices key on.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (
    BlockStructureError,
    MapDomainError,
    ParamRange,
    SchemaError,
    StochasticityError,
    UnknownContext,
    UnknownKind,
)

ENV_FORMAT = "condbisim-env/1"
PROB_TOL = 1e-12
NORMALIZE_TOL = 1e-9


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class FiniteMDP:
    """Dense tabular MDP ``<S, U, P, r, gamma, rho>``.

    ``transition`` has shape (S, A, S); ``reward`` has shape (S, A).
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        P = _frozen(self.transition)
        r = _frozen(self.reward)
        rho = _frozen(self.initial_dist)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise SchemaError(f"transition must have shape (S, A, S), got {P.shape}")
        if r.shape != P.shape[:2]:
            raise SchemaError(f"reward shape {r.shape} does not match transition {P.shape}")
        if rho.shape != (P.shape[0],):
            raise SchemaError("initial_dist length must equal n_states")
        if not 0.0 <= float(self.gamma) < 1.0:
            raise ParamRange(f"gamma must lie in [0, 1), got {self.gamma}")
        if (P < 0).any():
            raise StochasticityError("negative transition probability")
        if np.abs(P.sum(axis=2) - 1.0).max() > PROB_TOL:
            raise StochasticityError("transition rows do not sum to 1")
        if (rho < 0).any() or abs(rho.sum() - 1.0) > PROB_TOL:
            raise StochasticityError("initial_dist is not a distribution")
        if (r < 0).any() or (r > self.r_max).any():
            raise SchemaError("rewards must lie in [0, r_max]")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "initial_dist", rho)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", float(self.r_max))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def replace(self, **changes) -> "FiniteMDP":
        kw = dict(transition=self.transition, reward=self.reward, gamma=self.gamma,
                  initial_dist=self.initial_dist, r_max=self.r_max)
        kw.update(changes)
        return FiniteMDP(**kw)


_CONTEXT_METRICS = ("euclidean", "l1", "linf")


@dataclass(frozen=True, eq=False)
class ContextSpace:
    """Finite ordered context list with a distribution and a distance."""

    values: np.ndarray
    probs: np.ndarray
    metric: str = "euclidean"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        v.setflags(write=False)
        p = _frozen(self.probs)
        if v.ndim != 2 or len(v) == 0:
            raise SchemaError("context values must be a non-empty list of scalars or vectors")
        if p.shape != (len(v),):
            raise SchemaError("context probs must match the number of contexts")
        if (p < 0).any() or abs(p.sum() - 1.0) > PROB_TOL:
            raise StochasticityError("context distribution does not sum to 1")
        if self.metric not in _CONTEXT_METRICS:
            raise SchemaError(f"unknown context metric {self.metric!r}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "probs", p)

    def __len__(self) -> int:
        return len(self.values)

    def distance_values(self, a, b) -> float:
        diff = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
        if self.metric == "euclidean":
            return float(np.sqrt(np.sum(diff * diff)))
        if self.metric == "l1":
            return float(np.abs(diff).sum())
        return float(np.abs(diff).max())

    def distance(self, i: int, j: int) -> float:
        return self.distance_values(self.values[i], self.values[j])

    def distance_matrix(self) -> np.ndarray:
        n = len(self)
        return np.array([[self.distance(i, j) for j in range(n)] for i in range(n)])

    def index_of(self, value) -> int:
        value = np.atleast_1d(np.asarray(value, dtype=float))
        for k, v in enumerate(self.values):
            if v.shape == value.shape and np.array_equal(v, value):
                return k
        raise UnknownContext(f"context value {value.tolist()} not in context list")


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Distractor dimensions: ``n_dims`` independent Markov chains over shared ``levels``."""

    levels: np.ndarray
    transition: np.ndarray  # (n_dims, k, k)

    def __post_init__(self):
        lv = _frozen(self.levels)
        T = _frozen(self.transition)
        if T.ndim != 3 or T.shape[1:] != (len(lv), len(lv)):
            raise SchemaError("noise transition must have shape (n_dims, k, k)")
        if (T < 0).any() or np.abs(T.sum(axis=2) - 1).max() > PROB_TOL:
            raise StochasticityError("noise transition rows must be distributions")
        if (lv < 0).any() or (lv > 1).any():
            raise SchemaError("noise levels must lie in [0, 1]")
        object.__setattr__(self, "levels", lv)
        object.__setattr__(self, "transition", T)

    @property
    def n_dims(self) -> int:
        return self.transition.shape[0]

    @property
    def n_joint(self) -> int:
        return len(self.levels) ** self.n_dims

    def digits(self, joint: int) -> np.ndarray:
        k = len(self.levels)
        out = np.empty(self.n_dims, dtype=int)
        for d in range(self.n_dims - 1, -1, -1):
            out[d] = joint % k
            joint //= k
        return out

    def joint_of(self, digits) -> int:
        k = len(self.levels)
        j = 0
        for x in digits:
            j = j * k + int(x)
        return j

    def values(self, joint: int) -> np.ndarray:
        return self.levels[self.digits(joint)]

    def joint_transition(self) -> np.ndarray:
        M = np.ones((1, 1))
        for d in range(self.n_dims):
            M = np.kron(M, self.transition[d])
        return M

    def initial(self) -> np.ndarray:
        return np.full(self.n_joint, 1.0 / self.n_joint)

    def sample_initial(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_joint))

    def step(self, joint: int, rng: np.random.Generator) -> int:
        digits = self.digits(joint)
        nxt = [int(rng.choice(len(self.levels), p=self.transition[d, x])) for d, x in enumerate(digits)]
        return self.joint_of(nxt)


@dataclass(frozen=True, eq=False)
class ContextualMDP:
    """Latent MDP plus contexts and observation maps ``obs_map[theta][s] -> [0,1]^l``."""

    base: FiniteMDP
    contexts: ContextSpace
    obs_map: np.ndarray
    noise: NoiseSpec | None = None
    obs_rule: dict | None = None
    source: dict | None = None
    obs_ids: np.ndarray = field(init=False, repr=False)
    observations: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        F = _frozen(self.obs_map)
        if F.ndim != 3 or F.shape[:2] != (len(self.contexts), self.base.n_states):
            raise SchemaError(
                f"obs_map must have shape (n_contexts, n_states, l), got {F.shape}")
        if (F < 0).any() or (F > 1).any() or not np.isfinite(F).all():
            raise SchemaError("observation entries must lie in [0, 1]")
        object.__setattr__(self, "obs_map", F)
        seen: dict[bytes, int] = {}
        ids = np.empty(F.shape[:2], dtype=int)
        rows = []
        for t in range(F.shape[0]):
            for s in range(F.shape[1]):
                key = F[t, s].tobytes()
                if key not in seen:
                    seen[key] = len(rows)
                    rows.append(F[t, s])
                ids[t, s] = seen[key]
        ids.setflags(write=False)
        object.__setattr__(self, "obs_ids", ids)
        object.__setattr__(self, "observations", _frozen(np.array(rows)))

    @property
    def n_contexts(self) -> int:
        return len(self.contexts)

    @property
    def n_states(self) -> int:
        return self.base.n_states

    @property
    def obs_dim(self) -> int:
        return self.obs_map.shape[2]

    @property
    def n_obs(self) -> int:
        return len(self.observations)

    @property
    def noise_dims(self) -> int:
        return 0 if self.noise is None else self.noise.n_dims

    def obs_state(self) -> np.ndarray:
        """Latent state of every observation id (first rendering wins when not block-structured)."""
        out = np.full(self.n_obs, -1, dtype=int)
        for t in range(self.n_contexts):
            for s in range(self.n_states):
                if out[self.obs_ids[t, s]] < 0:
                    out[self.obs_ids[t, s]] = s
        return out

    def replace(self, **changes) -> "ContextualMDP":
        kw = dict(base=self.base, contexts=self.contexts, obs_map=self.obs_map,
                  noise=self.noise, obs_rule=self.obs_rule, source=self.source)
        kw.update(changes)
        return ContextualMDP(**kw)


@dataclass(frozen=True, eq=False)
class JointIndex:
    """Joint observation-context tuples ``h = (obs id, context id)``, context-major."""

    pairs: np.ndarray  # (H, 2)
    state_of: np.ndarray
    n_states: int
    n_contexts: int

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def ctx_of(self) -> np.ndarray:
        return self.pairs[:, 1]

    def index(self, ctx: int, s: int) -> int:
        return ctx * self.n_states + s


@dataclass
class BlockReport:
    holds: bool
    violations: list


@dataclass
class HomomorphismReport:
    holds: bool
    reward_violation: float
    transition_violation: float
    tol: float


# --------------------------------------------------------------------------
# observation and checks


def observe(cmdp: ContextualMDP, s: int, theta: int, rng: np.random.Generator | None = None,
            noise_state: int | None = None) -> np.ndarray:
    """Observation of latent state ``s`` under context ``theta``.

    When distractors are configured the noise coordinates are appended; pass
    either the current joint ``noise_state`` or an ``rng`` to draw one from the
    distractor chain's initial distribution.
    """
    if not 0 <= s < cmdp.n_states:
        raise IndexError(f"state {s} out of range")
    if not 0 <= theta < cmdp.n_contexts:
        raise IndexError(f"context {theta} out of range")
    core = cmdp.obs_map[theta, s]
    if cmdp.noise is None:
        return core.copy()
    if noise_state is None:
        if rng is None:
            raise ValueError("an rng is required to observe an environment with distractors")
        noise_state = cmdp.noise.sample_initial(rng)
    return np.concatenate([core, cmdp.noise.values(noise_state)])


def check_block_structure(cmdp: ContextualMDP) -> BlockReport:
    """Check that no observation vector is shared by two different latent states.

    Distractor dimensions are not part of ``obs_map`` and so never enter this check.
    """
    owners: dict[int, list[tuple[int, int]]] = {}
    for t in range(cmdp.n_contexts):
        for s in range(cmdp.n_states):
            owners.setdefault(int(cmdp.obs_ids[t, s]), []).append((t, s))
    violations = []
    for members in owners.values():
        for a in range(len(members)):
            for b in range(a + 1, len(members)):
                (t1, s1), (t2, s2) = members[a], members[b]
                if s1 != s2:
                    violations.append((t1, s1, t2, s2))
    return BlockReport(holds=not violations, violations=violations)


def require_block_structure(cmdp: ContextualMDP) -> None:
    rep = check_block_structure(cmdp)
    if not rep.holds:
        raise BlockStructureError(f"observation map not invertible: {rep.violations[:3]}")


def verify_homomorphism(m: FiniteMDP, m_theta: FiniteMDP, state_map, action_map,
                        tol: float = 1e-9) -> HomomorphismReport:
    """Check that ``(state_map, action_map)`` is an MDP homomorphism from ``m`` onto ``m_theta``.

    ``action_map[s, a]`` is the image of action ``a`` at state ``s``.  Transition
    probabilities of ``m`` are aggregated over preimage blocks of ``state_map``.
    """
    f = np.asarray(state_map, dtype=int)
    g = np.asarray(action_map, dtype=int)
    S2, A2 = m_theta.n_states, m_theta.n_actions
    if f.shape != (m.n_states,) or f.min() < 0 or f.max() >= S2:
        raise MapDomainError("state_map must send every state of m into m_theta")
    if len(np.unique(f)) != S2:
        raise MapDomainError("state_map is not surjective")
    if g.shape != (m.n_states, m.n_actions) or g.min() < 0 or g.max() >= A2:
        raise MapDomainError("action_map must have shape (S, A) with images in m_theta's actions")
    for s in range(m.n_states):
        if len(np.unique(g[s])) != A2:
            raise MapDomainError(f"action_map at state {s} is not surjective")
    r_img = m_theta.reward[f[:, None], g]
    reward_violation = float(np.abs(r_img - m.reward).max())
    blocks = np.zeros((m.n_states, S2))
    blocks[np.arange(m.n_states), f] = 1.0
    aggregated = m.transition @ blocks  # (S, A, S2)
    P_img = m_theta.transition[f[:, None], g]  # (S, A, S2)
    transition_violation = float(np.abs(P_img - aggregated).max())
    holds = reward_violation <= tol and transition_violation <= tol
    return HomomorphismReport(holds, reward_violation, transition_violation, tol)


def build_super_mdp(cmdp: ContextualMDP) -> tuple[FiniteMDP, JointIndex]:
    """MDP over joint tuples ``(f_theta(s), theta)`` with the context fixed within an episode."""
    require_block_structure(cmdp)
    S, A, K = cmdp.n_states, cmdp.base.n_actions, cmdp.n_contexts
    H = S * K
    P = np.zeros((H, A, H))
    r = np.zeros((H, A))
    rho = np.zeros(H)
    for t in range(K):
        sl = slice(t * S, (t + 1) * S)
        P[sl, :, sl] = cmdp.base.transition
        r[sl] = cmdp.base.reward
        rho[sl] = cmdp.base.initial_dist * cmdp.contexts.probs[t]
    pairs = np.array([(cmdp.obs_ids[t, s], t) for t in range(K) for s in range(S)], dtype=int)
    state_of = np.tile(np.arange(S), K)
    rho = rho / rho.sum()
    mdp = FiniteMDP(P, r, cmdp.base.gamma, rho, cmdp.base.r_max)
    pairs.setflags(write=False)
    state_of.setflags(write=False)
    return mdp, JointIndex(pairs, state_of, S, K)


def restrict_context(cmdp: ContextualMDP, theta: int) -> tuple[FiniteMDP, np.ndarray]:
    """The richly observed MDP of one context, with states ordered by observation id.

    Returns the MDP and, for each of its states, the latent state it renders
    (the inverse observation map), which is the state map onto the base MDP.
    """
    require_block_structure(cmdp)
    ids = cmdp.obs_ids[theta]
    order = np.argsort(ids, kind="stable")  # position k holds latent state order[k]
    P = cmdp.base.transition[order][:, :, order]
    r = cmdp.base.reward[order]
    rho = cmdp.base.initial_dist[order]
    return FiniteMDP(P, r, cmdp.base.gamma, rho, cmdp.base.r_max), order


# --------------------------------------------------------------------------
# observation rules (parametric maps that extend to unseen contexts)


def _affine_onehot(theta: np.ndarray, positions: np.ndarray, dim: int) -> np.ndarray:
    """``b(theta) + a(theta) * e_pos`` with a = 0.6 + 0.3 theta, b = 0.05 (1 - theta)."""
    th = float(theta[0])
    a = 0.6 + 0.3 * th
    b = 0.05 * (1.0 - th)
    out = np.full((len(positions), dim), b)
    out[np.arange(len(positions)), positions] += a
    return np.clip(out, 0.0, 1.0)


def render_observations(rule: dict, theta_values) -> np.ndarray:
    """Render ``(n_contexts, n_states, l)`` observations for arbitrary context values."""
    vals = np.array(theta_values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    kind = rule["kind"]
    if kind == "affine_onehot":
        pos = np.asarray(rule["positions"], dtype=int)
        return np.stack([_affine_onehot(v, pos, int(rule["dim"])) for v in vals])
    if kind == "linear_drift":
        B = np.asarray(rule["offset"], dtype=float)
        V = np.asarray(rule["drift"], dtype=float)
        return np.stack([np.clip(B + float(v[0]) * V, 0.0, 1.0) for v in vals])
    raise UnknownKind(f"unknown observation rule {kind!r}")


def extend_contexts(cmdp: ContextualMDP, values, probs=None) -> ContextualMDP:
    """Same latent MDP rendered under a new context list.

    Values already present reuse their stored observations; new values need a
    parametric observation rule.
    """
    vals = np.array(values, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    maps = []
    for v in vals:
        try:
            maps.append(cmdp.obs_map[cmdp.contexts.index_of(v)])
        except UnknownContext:
            if cmdp.obs_rule is None:
                raise UnknownContext(
                    f"context {v.tolist()} has no observation map and the environment has no rule")
            maps.append(render_observations(cmdp.obs_rule, v[None])[0])
    if probs is None:
        probs = np.full(len(vals), 1.0 / len(vals))
    ctx = ContextSpace(vals, probs, cmdp.contexts.metric)
    return cmdp.replace(contexts=ctx, obs_map=np.stack(maps))


# --------------------------------------------------------------------------
# generators


def _context_values(params: dict, n_contexts: int) -> np.ndarray:
    vals = params.get("context_values")
    if vals is not None:
        vals = np.array(vals, dtype=float)
        if len(vals) != n_contexts:
            raise ParamRange("context_values length must equal n_contexts")
        return vals
    if n_contexts == 1:
        return np.zeros(1)
    return np.linspace(-1.0, 1.0, n_contexts)


def _noise_spec(rng: np.random.Generator, dims: int, levels: int, stickiness: float) -> NoiseSpec | None:
    if dims == 0:
        return None
    T = np.empty((dims, levels, levels))
    for d in range(dims):
        rows = rng.dirichlet(np.ones(levels), size=levels)
        T[d] = stickiness * np.eye(levels) + (1.0 - stickiness) * rows
        T[d] /= T[d].sum(axis=1, keepdims=True)
    return NoiseSpec(np.linspace(0.0, 1.0, levels), T)


def _check_range(name, value, lo, hi):
    if not lo <= value <= hi:
        raise ParamRange(f"{name}={value} outside [{lo}, {hi}]")


def _gen_scrambled_grid(params: dict, rng: np.random.Generator) -> ContextualMDP:
    side = int(params.get("side", 4))
    n_ctx = int(params.get("n_contexts", 3))
    noise_dims = int(params.get("noise_dims", 0))
    levels = int(params.get("noise_levels", 3))
    gamma = float(params.get("gamma", 0.9))
    slip = float(params.get("slip", 0.0))
    _check_range("side", side, 2, 12)
    _check_range("n_contexts", n_ctx, 1, 64)
    _check_range("noise_dims", noise_dims, 0, 6)
    _check_range("noise_levels", levels, 2, 6)
    _check_range("slip", slip, 0.0, 1.0)
    n = side * side
    goal = n - 1
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    P = np.zeros((n, 4, n))
    for s in range(n):
        row, col = divmod(s, side)
        targets = []
        for dr, dc in moves:
            rr, cc = row + dr, col + dc
            targets.append(rr * side + cc if 0 <= rr < side and 0 <= cc < side else s)
        for a in range(4):
            if s == goal:
                P[s, a, s] = 1.0
                continue
            P[s, a, targets[a]] += 1.0 - slip
            for b in range(4):
                P[s, a, targets[b]] += slip / 4
    r = np.zeros((n, 4))
    r[goal] = 1.0
    rho = np.full(n, 1.0 / (n - 1))
    rho[goal] = 0.0
    scramble = rng.permutation(n)
    rule = {"kind": "affine_onehot", "positions": scramble.tolist(), "dim": n}
    vals = _context_values(params, n_ctx)
    noise = _noise_spec(rng, noise_dims, levels, float(params.get("noise_stickiness", 0.7)))
    base = FiniteMDP(P, r, gamma, rho, 1.0)
    ctx = ContextSpace(vals, np.full(n_ctx, 1.0 / n_ctx))
    return ContextualMDP(base, ctx, render_observations(rule, vals), noise, rule)


def _gen_distractor_chain(params: dict, rng: np.random.Generator) -> ContextualMDP:
    n = int(params.get("n_states", 4))
    n_ctx = int(params.get("n_contexts", 2))
    noise_dims = int(params.get("noise_dims", 2))
    levels = int(params.get("noise_levels", 3))
    gamma = float(params.get("gamma", 0.9))
    _check_range("n_states", n, 2, 64)
    _check_range("n_contexts", n_ctx, 1, 64)
    _check_range("noise_dims", noise_dims, 0, 6)
    _check_range("noise_levels", levels, 2, 6)
    P = np.zeros((n, 2, n))
    for s in range(n):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, min(s + 1, n - 1)] = 1.0
    r = np.repeat((np.arange(n) / (n - 1))[:, None], 2, axis=1)
    rho = np.full(n, 1.0 / n)
    rule = {"kind": "affine_onehot", "positions": list(range(n)), "dim": n}
    vals = _context_values(params, n_ctx)
    noise = _noise_spec(rng, noise_dims, levels, float(params.get("noise_stickiness", 0.7)))
    base = FiniteMDP(P, r, gamma, rho, 1.0)
    ctx = ContextSpace(vals, np.full(n_ctx, 1.0 / n_ctx))
    return ContextualMDP(base, ctx, render_observations(rule, vals), noise, rule)


def _gen_random_cmdp(params: dict, rng: np.random.Generator) -> ContextualMDP:
    n = int(params.get("n_states", 6))
    A = int(params.get("n_actions", 2))
    n_ctx = int(params.get("n_contexts", 3))
    gamma = float(params.get("gamma", 0.9))
    l = int(params.get("obs_dim", n))
    branching = params.get("branching")
    _check_range("n_states", n, 1, 64)
    _check_range("n_actions", A, 1, 16)
    _check_range("n_contexts", n_ctx, 1, 64)
    _check_range("obs_dim", l, 1, 256)
    if branching is None:
        P = rng.dirichlet(np.ones(n), size=(n, A))
    else:
        branching = int(branching)
        _check_range("branching", branching, 1, n)
        P = np.zeros((n, A, n))
        for s in range(n):
            for a in range(A):
                support = rng.choice(n, size=branching, replace=False)
                P[s, a, support] = rng.dirichlet(np.ones(branching))
    P /= P.sum(axis=2, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(n, A))
    rho = rng.dirichlet(np.ones(n))
    vals = _context_values(params, n_ctx)
    for _ in range(100):
        rule = {"kind": "linear_drift",
                "offset": rng.uniform(0.25, 0.75, size=(n, l)).tolist(),
                "drift": rng.uniform(-0.25, 0.25, size=(n, l)).tolist()}
        F = render_observations(rule, vals)
        ctx = ContextSpace(vals, np.full(n_ctx, 1.0 / n_ctx))
        cmdp = ContextualMDP(FiniteMDP(P, r, gamma, rho, 1.0), ctx, F, None, rule)
        if check_block_structure(cmdp).holds:
            return cmdp
    raise ParamRange("could not draw an injective observation map")  # pragma: no cover


GENERATORS = {
    "scrambled_grid": _gen_scrambled_grid,
    "distractor_chain": _gen_distractor_chain,
    "random_cmdp": _gen_random_cmdp,
}


def generate_env(kind: str, params: dict | None = None, seed: int = 0) -> ContextualMDP:
    """Build one of the block-structured generator environments, deterministically from ``seed``."""
    if kind not in GENERATORS:
        raise UnknownKind(f"unknown environment kind {kind!r}; expected one of {sorted(GENERATORS)}")
    params = dict(params or {})
    rng = np.random.default_rng(seed)
    cmdp = GENERATORS[kind](params, rng)
    source = {"kind": kind, "params": params, "seed": int(seed)}
    return cmdp.replace(source=source)


# --------------------------------------------------------------------------
# serialization


def canonical_json(obj: Any) -> str:
    """Stable JSON text: sorted keys, no whitespace, shortest round-trip floats."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def to_spec(cmdp: ContextualMDP) -> dict:
    """Explicit-table environment document."""
    b = cmdp.base
    noise = None
    if cmdp.noise is not None:
        noise = {"levels": cmdp.noise.levels.tolist(), "transition": cmdp.noise.transition.tolist()}
    return {
        "format": ENV_FORMAT,
        "transition": b.transition.tolist(),
        "reward": b.reward.tolist(),
        "gamma": b.gamma,
        "initial_dist": b.initial_dist.tolist(),
        "r_max": b.r_max,
        "contexts": {"values": cmdp.contexts.values.tolist(),
                     "probs": cmdp.contexts.probs.tolist(),
                     "metric": cmdp.contexts.metric},
        "obs_map": cmdp.obs_map.tolist(),
        "noise": noise,
        "obs_rule": cmdp.obs_rule,
        "source": cmdp.source,
    }


def env_hash(cmdp: ContextualMDP) -> str:
    return hashlib.sha256(canonical_json(to_spec(cmdp)).encode()).hexdigest()


def _normalize_rows(a: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise StochasticityError(f"{name} contains non-finite values")
    if (a < 0).any():
        raise StochasticityError(f"{name} has a negative probability")
    sums = a.sum(axis=-1, keepdims=True)
    if np.abs(sums - 1.0).max() > NORMALIZE_TOL:
        raise StochasticityError(f"{name} rows are not normalizable within {NORMALIZE_TOL}")
    # rows already stochastic up to rounding are kept bit-for-bit, so hashes survive a save/load
    return np.where(np.abs(sums - 1.0) <= 1e-12, a, a / sums)


def _as_array(spec: dict, key: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(spec[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"field {key!r} is not a numeric table") from exc
    if arr.ndim != ndim:
        raise SchemaError(f"field {key!r} must be {ndim}-dimensional")
    return arr


def build_cmdp(spec: dict) -> ContextualMDP:
    """Environment from a generator document ``{kind, params, seed}`` or explicit tables."""
    if not isinstance(spec, dict):
        raise SchemaError("environment spec must be a JSON object")
    if "kind" in spec and "transition" not in spec:
        unknown = set(spec) - {"kind", "params", "seed"}
        if unknown:
            raise SchemaError(f"unknown generator fields {sorted(unknown)}")
        return generate_env(spec["kind"], spec.get("params") or {}, int(spec.get("seed", 0)))
    allowed = {"format", "transition", "reward", "gamma", "initial_dist", "r_max", "contexts",
               "obs_map", "noise", "obs_rule", "source"}
    unknown = set(spec) - allowed
    if unknown:
        raise SchemaError(f"unknown environment fields {sorted(unknown)}")
    for key in ("transition", "reward"):
        if key not in spec:
            raise SchemaError(f"missing field {key!r}")
    if spec.get("format", ENV_FORMAT) != ENV_FORMAT:
        raise SchemaError(f"unsupported format {spec['format']!r}")
    P = _as_array(spec, "transition", 3)
    if P.shape[0] < 1 or P.shape[1] < 1 or P.shape[0] != P.shape[2]:
        raise SchemaError("transition must have shape (S, A, S) with positive counts")
    P = _normalize_rows(P, "transition")
    r = _as_array(spec, "reward", 2)
    S = P.shape[0]
    rho = _normalize_rows(_as_array(spec, "initial_dist", 1), "initial_dist") if "initial_dist" in spec \
        else np.full(S, 1.0 / S)
    r_max = float(spec.get("r_max", max(1.0, float(r.max()))))
    base = FiniteMDP(P, r, float(spec.get("gamma", 0.9)), rho, r_max)
    ctx_spec = spec.get("contexts") or {"values": [[0.0]], "probs": [1.0]}
    ctx = ContextSpace(np.array(ctx_spec["values"], dtype=float),
                       _normalize_rows(np.array(ctx_spec["probs"], dtype=float), "context probs"),
                       ctx_spec.get("metric", "euclidean"))
    if "obs_map" in spec:
        F = _as_array(spec, "obs_map", 3)
    else:
        F = np.repeat(np.eye(S)[None], len(ctx), axis=0)
    noise = None
    if spec.get("noise"):
        noise = NoiseSpec(np.array(spec["noise"]["levels"], dtype=float),
                          _normalize_rows(np.array(spec["noise"]["transition"], dtype=float), "noise"))
    return ContextualMDP(base, ctx, F, noise, spec.get("obs_rule"), spec.get("source"))


def save_env(cmdp: ContextualMDP, path) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(to_spec(cmdp)))
        fh.write("\n")


def load_env(path) -> ContextualMDP:
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
    return build_cmdp(spec)
