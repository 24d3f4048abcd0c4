"""Exact planning and policy evaluation on finite MDPs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .cmdp import ContextualMDP, FiniteMDP, require_block_structure
from .errors import LengthMismatch, NonConvergence, SingularSystem

ROW_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """State-indexed action distributions ``probs[s, a]``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError("policy table must be 2-D (states x actions)")
        if (p < 0).any() or np.abs(p.sum(axis=1) - 1).max() > ROW_TOL:
            raise ValueError("policy rows must be distributions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def kind(self) -> str:
        return "deterministic" if np.isin(self.probs, (0.0, 1.0)).all() else "stochastic"

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "PolicyTable":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def greedy(cls, q: np.ndarray) -> "PolicyTable":
        # argmax returns the first maximizer, i.e. ties go to the lowest action index
        p = np.zeros_like(q, dtype=float)
        p[np.arange(len(q)), np.argmax(q, axis=1)] = 1.0
        return cls(p)


@dataclass(frozen=True, eq=False)
class PolicyEvaluation:
    v: np.ndarray
    q: np.ndarray
    adv: np.ndarray
    j: float
    a_max: float | None = None


def bellman_backup(mdp: FiniteMDP, v: np.ndarray) -> np.ndarray:
    return mdp.reward + mdp.gamma * mdp.transition @ v


def value_iteration(mdp: FiniteMDP, tol: float = 1e-10, max_iters: int = 1_000_000):
    """Optimal values by value iteration; returns ``(V*, Q*, greedy policy)``.

    Iterates until successive iterates differ by at most ``tol`` in sup norm, so
    the Bellman residual of the returned V is at most ``gamma * tol``.
    """
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = bellman_backup(mdp, v)
        v_new = q.max(axis=1)
        if np.abs(v_new - v).max() <= tol:
            q = bellman_backup(mdp, v_new)
            return v_new, q, PolicyTable.greedy(q)
        v = v_new
    raise NonConvergence("value iteration did not converge")


def soft_value_iteration(mdp: FiniteMDP, temperature: float = 0.1, tol: float = 1e-10,
                         max_iters: int = 1_000_000):
    """Maximum-entropy optimal values and the (unique) softmax-optimal policy.

    Soft backup ``V(s) = T log sum_a exp(Q(s, a) / T)``; the policy is
    ``pi(a|s) ∝ exp(Q(s, a) / T)``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    v = np.zeros(mdp.n_states)
    for _ in range(max_iters):
        q = bellman_backup(mdp, v)
        v_new = temperature * logsumexp(q / temperature, axis=1)
        if np.abs(v_new - v).max() <= tol:
            q = bellman_backup(mdp, v_new)
            v_new = temperature * logsumexp(q / temperature, axis=1)
            return v_new, q, PolicyTable(softmax(q, temperature))
        v = v_new
    raise NonConvergence("soft value iteration did not converge")


def softmax(q: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = q / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p / p.sum(axis=-1, keepdims=True)


def policy_matrices(mdp: FiniteMDP, policy) -> tuple[np.ndarray, np.ndarray]:
    """Policy-averaged reward vector and transition matrix."""
    pi = _probs(policy)
    r_pi = np.einsum("sa,sa->s", pi, mdp.reward)
    P_pi = np.einsum("sa,sat->st", pi, mdp.transition)
    return r_pi, P_pi


def _probs(policy) -> np.ndarray:
    return policy.probs if isinstance(policy, PolicyTable) else np.asarray(policy, dtype=float)


def policy_evaluation(mdp: FiniteMDP, policy, comparison=None) -> PolicyEvaluation:
    """Exact V, Q, advantage and J of ``policy`` by a direct linear solve.

    With ``comparison`` given, ``a_max = max_s |E_{a ~ comparison}[A(s, a)]|``.
    """
    pi = _probs(policy)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise LengthMismatch("policy shape does not match the MDP")
    r_pi, P_pi = policy_matrices(mdp, pi)
    M = np.eye(mdp.n_states) - mdp.gamma * P_pi
    try:
        v = np.linalg.solve(M, r_pi)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - gamma < 1 makes M invertible
        raise SingularSystem(str(exc)) from exc
    q = bellman_backup(mdp, v)
    adv = q - np.einsum("sa,sa->s", pi, q)[:, None]
    j = float(mdp.initial_dist @ v)
    a_max = None
    if comparison is not None:
        a_max = float(np.abs(np.einsum("sa,sa->s", _probs(comparison), adv)).max())
    return PolicyEvaluation(v, q, adv, j, a_max)


def discounted_occupancy(mdp: FiniteMDP, policy) -> np.ndarray:
    """Normalized discounted state visitation ``(1 - gamma) rho^T (I - gamma P_pi)^-1``."""
    _, P_pi = policy_matrices(mdp, policy)
    M = np.eye(mdp.n_states) - mdp.gamma * P_pi
    d = (1.0 - mdp.gamma) * np.linalg.solve(M.T, mdp.initial_dist)
    return d


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise LengthMismatch(f"distributions have different supports: {p.shape} vs {q.shape}")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


# --------------------------------------------------------------------------
# policies over embedding space


@dataclass(frozen=True, eq=False)
class LatentPolicy:
    """Policy on embedding space: action distribution of the nearest anchor (L1, lowest index on ties)."""

    anchors: np.ndarray  # (K, m)
    probs: np.ndarray  # (K, A)

    def __post_init__(self):
        a = np.array(self.anchors, dtype=float)
        p = np.array(self.probs, dtype=float)
        if a.ndim != 2 or p.ndim != 2 or len(a) != len(p):
            raise ValueError("anchors and probs must be (K, m) and (K, A)")
        object.__setattr__(self, "anchors", a)
        object.__setattr__(self, "probs", p)

    @classmethod
    def from_q(cls, anchors, q, temperature: float) -> "LatentPolicy":
        return cls(anchors, softmax(np.asarray(q, dtype=float), temperature))

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def codes(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        dist = np.abs(y[:, None, :] - self.anchors[None, :, :]).sum(axis=2)
        return np.argmin(dist, axis=1)

    def action_probs(self, y: np.ndarray) -> np.ndarray:
        return self.probs[self.codes(y)]


def lifted_policy(cmdp: ContextualMDP, phi, state_probs: np.ndarray,
                  obs_map: np.ndarray | None = None) -> LatentPolicy:
    """Latent policy that reproduces ``state_probs`` at every embedded (observation, context) tuple."""
    from .embed import embed_all  # local import: embed depends on this module

    Y = embed_all(phi, cmdp, obs_map=obs_map)  # (K, S, m)
    K, S, m = Y.shape
    return LatentPolicy(Y.reshape(K * S, m), np.tile(np.asarray(state_probs), (K, 1)))


def state_policy(cmdp: ContextualMDP, phi, policy: LatentPolicy, theta_policy: int, theta_env: int,
                 obs_map: np.ndarray | None = None, noise_state: int | None = None) -> PolicyTable:
    """``pi(a | phi(f_{theta_env}(s), theta_policy))`` as a table over latent states."""
    from .embed import encode

    states = np.arange(cmdp.n_states)
    y = encode(phi, cmdp, states, obs_ctx=theta_env, ctx=theta_policy, obs_map=obs_map,
               noise_state=noise_state)
    p = policy.action_probs(y)
    return PolicyTable(p / p.sum(axis=1, keepdims=True))


def cross_context_policy_value(cmdp: ContextualMDP, phi, policy: LatentPolicy, theta_policy: int,
                               theta_env: int, comparison=None) -> PolicyEvaluation:
    """Exact evaluation on the base MDP of the context-``theta_policy`` policy fed context-``theta_env`` observations."""
    require_block_structure(cmdp)
    pi = state_policy(cmdp, phi, policy, theta_policy, theta_env)
    return policy_evaluation(cmdp.base, pi, comparison)
