"""Epsilon-ball aggregation of joint (observation, context) tuples and the value-loss check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cmdp import ContextualMDP, FiniteMDP, JointIndex, build_super_mdp, env_hash, require_block_structure
from .embed import compute_delta, embed_all, true_metric
from .report import BoundReport
from .solver import value_iteration


@dataclass(frozen=True, eq=False)
class AggregatedMDP:
    clusters: tuple
    phi_hat: np.ndarray  # joint index -> cluster id
    mdp_hat: FiniteMDP
    epsilon: float
    weighting: str = "uniform"

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def diameters(self, embeddings: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_clusters)
        for k, members in enumerate(self.clusters):
            Y = embeddings[list(members)]
            out[k] = np.abs(Y[:, None] - Y[None]).sum(axis=2).max()
        return out


def joint_embeddings(phi, cmdp: ContextualMDP, joint: JointIndex) -> np.ndarray:
    """Embedding of each joint tuple h, in joint-index order."""
    Y = embed_all(phi, cmdp)
    return Y[joint.ctx_of, joint.state_of]


def greedy_cover(Y: np.ndarray, eps: float) -> list[list[int]]:
    """First uncovered point seeds a ball of radius ``eps`` (L1) over the remaining uncovered points."""
    n = len(Y)
    covered = np.zeros(n, dtype=bool)
    clusters = []
    for h in range(n):
        if covered[h]:
            continue
        near = (np.abs(Y - Y[h]).sum(axis=1) <= eps) & ~covered
        members = np.flatnonzero(near).tolist()
        covered[members] = True
        clusters.append(members)
    return clusters


def aggregate_tables(mdp: FiniteMDP, clusters) -> tuple[FiniteMDP, np.ndarray]:
    """Uniformly weighted cluster MDP with transitions re-targeted to clusters."""
    n = mdp.n_states
    label = np.empty(n, dtype=int)
    for k, members in enumerate(clusters):
        label[members] = k
    K = len(clusters)
    onto = np.zeros((n, K))
    onto[np.arange(n), label] = 1.0
    R = np.stack([mdp.reward[m].mean(axis=0) for m in clusters])
    P = np.stack([(mdp.transition[m] @ onto).mean(axis=0) for m in clusters])
    rho = mdp.initial_dist @ onto
    return FiniteMDP(P, R, mdp.gamma, rho, mdp.r_max), label


def epsilon_aggregate(phi, super_mdp: FiniteMDP, joint: JointIndex, eps: float,
                      cmdp: ContextualMDP | None = None) -> AggregatedMDP:
    """Aggregate super-MDP tuples whose embeddings lie within ``eps`` of a cluster seed.

    ``phi`` is either an embedding (then ``cmdp`` renders the tuples) or a
    precomputed ``(H, m)`` array of joint embeddings.
    """
    if eps < 0:
        raise ValueError("epsilon must be nonnegative")
    Y = np.asarray(phi, dtype=float) if cmdp is None else joint_embeddings(phi, cmdp, joint)
    clusters = greedy_cover(Y, eps)
    mdp_hat, label = aggregate_tables(super_mdp, clusters)
    return AggregatedMDP(tuple(tuple(c) for c in clusters), label, mdp_hat, float(eps))


def aggregation_rhs(eps: float, delta: float, gamma: float, c: float) -> float:
    return 2.0 * (eps + delta) / ((1.0 - gamma) * (1.0 - c))


def verify_aggregation_bound(cmdp: ContextualMDP, phi, eps: float, c: float = 0.5,
                             metric_tol: float = 1e-9, temperature: float = 0.1,
                             seed: int | None = None) -> BoundReport:
    """Largest optimal-value gap between the super-MDP and its epsilon-aggregation, against its bound."""
    if not 0.0 < c < 1.0:
        raise ValueError("c must lie in (0, 1)")
    require_block_structure(cmdp)
    d_S = true_metric(cmdp, c, temperature, tol=metric_tol)
    delta = compute_delta(phi, cmdp, d_S)
    super_mdp, joint = build_super_mdp(cmdp)
    agg = epsilon_aggregate(phi, super_mdp, joint, eps, cmdp)
    v, _, _ = value_iteration(super_mdp)
    v_hat, _, _ = value_iteration(agg.mdp_hat)
    lhs = float(np.abs(v - v_hat[agg.phi_hat]).max())
    gamma = cmdp.base.gamma
    rhs = aggregation_rhs(eps, delta, gamma, c)
    return BoundReport.build("2", lhs, rhs, {"epsilon": eps, "delta": delta, "gamma": gamma, "c": c},
                             seed=seed, env_hash=env_hash(cmdp),
                             extra={"n_clusters": agg.n_clusters, "weighting": agg.weighting})
