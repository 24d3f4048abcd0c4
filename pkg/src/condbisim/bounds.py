"""Exact Lipschitz constants and empirical checks of the transfer and fidelity bounds.

Everything is evaluated exactly on finite objects: Lipschitz constants are
maxima of ratios over finite grids, values come from direct linear solves and
occupancies from ``(1 - gamma) rho^T (I - gamma P_pi)^-1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .cmdp import ContextualMDP, FiniteMDP, env_hash, generate_env, require_block_structure
from .embed import MLPEmbedding, TableEmbedding, encode, true_metric
from .errors import DegenerateGrid, ShapeMismatch
from .metric import l1_embedding
from .report import BoundReport
from .solver import (LatentPolicy, PolicyTable, discounted_occupancy, lifted_policy, policy_evaluation,
                     soft_value_iteration, state_policy)

ZERO_TOL = 1e-12


# --------------------------------------------------------------------------
# Lipschitz constants


def _pairwise_l1(X: np.ndarray) -> np.ndarray:
    return np.abs(X[:, None, :] - X[None, :, :]).sum(axis=2)


def _tv_table(P: np.ndarray) -> np.ndarray:
    return 0.5 * _pairwise_l1(P)


def max_ratio(num: np.ndarray, den: np.ndarray) -> tuple[float, tuple | None]:
    """Largest ``num / den`` over entries with ``den > 0``, and the argmax index."""
    mask = den > ZERO_TOL
    if not mask.any():
        return 0.0, None
    ratio = np.where(mask, num / np.where(mask, den, 1.0), -np.inf)
    idx = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    return float(max(ratio[idx], 0.0)), tuple(int(i) for i in idx)


def policy_lipschitz(policy: LatentPolicy, points: np.ndarray) -> tuple[float, tuple | None]:
    """Exact Lipschitz constant of ``y -> policy(y)`` (TV over L1) on a finite point set."""
    points = np.asarray(points, dtype=float)
    return max_ratio(_tv_table(policy.action_probs(points)), _pairwise_l1(points))


@dataclass
class LipschitzReport:
    L_f_theta: float
    L_phi_z: float
    L_phi_theta: float
    L_pi_y: float
    composed: float
    direct: float
    argmax: dict

    @property
    def product(self) -> float:
        return self.L_f_theta * self.L_phi_z * self.L_pi_y


def _grid(cmdp: ContextualMDP, phi):
    """Every observation on the grid and its embedding under every context input."""
    obs = cmdp.observations  # (n_obs, l)
    owner = cmdp.obs_state()
    first_ctx = np.array([np.argwhere(cmdp.obs_ids == k)[0][0] for k in range(cmdp.n_obs)])
    emb = np.stack([encode(phi, cmdp, owner, first_ctx, np.full(cmdp.n_obs, t))
                    for t in range(cmdp.n_contexts)])  # (K, n_obs, m)
    return obs, emb


def estimate_lipschitz(cmdp: ContextualMDP, phi, policy: LatentPolicy) -> LipschitzReport:
    """Exact sups of the Lipschitz ratios of ``f``, ``phi`` and ``pi`` over the finite grids.

    ``f`` is measured in L1 per state across contexts, ``phi`` in L1 over pairs
    of grid observations at a fixed context input (and across context inputs at
    a fixed observation), ``pi`` in TV over pairs of grid embeddings.  The
    direct constant is that of ``theta -> pi(phi(f_theta(s), theta_c))``.
    """
    K, S = cmdp.n_contexts, cmdp.n_states
    if K < 2 or cmdp.n_obs < 2:
        raise DegenerateGrid("need at least two contexts and two observations")
    d_theta = cmdp.contexts.distance_matrix()
    F = cmdp.obs_map
    argmax = {}

    # f: |f_t(s) - f_u(s)| / d(t, u), maximized over s, t, u
    f_num = np.abs(F[:, None] - F[None, :]).sum(axis=3)  # (K, K, S)
    L_f, am = max_ratio(f_num, np.repeat(d_theta[:, :, None], S, axis=2))
    argmax["f_theta"] = am

    obs, emb = _grid(cmdp, phi)
    dz = _pairwise_l1(obs)
    L_z, L_z_arg = 0.0, None
    L_t, L_t_arg = 0.0, None
    for t in range(K):
        val, am = max_ratio(_pairwise_l1(emb[t]), dz)
        if val > L_z or L_z_arg is None:
            L_z, L_z_arg = val, (t, *am) if am else None
    # phi w.r.t. its context input at fixed observation
    d_emb_ctx = np.abs(emb[:, None] - emb[None, :]).sum(axis=3)  # (K, K, n_obs)
    L_t, L_t_arg = max_ratio(d_emb_ctx, np.repeat(d_theta[:, :, None], cmdp.n_obs, axis=2))
    argmax["phi_z"] = L_z_arg
    argmax["phi_theta"] = L_t_arg

    points = emb.reshape(-1, emb.shape[2])
    L_y, am = policy_lipschitz(policy, points)
    argmax["pi_y"] = am

    # direct constant of the composed map theta -> pi(phi(f_theta(s), theta_c))
    direct = 0.0
    for tc in range(K):
        probs = np.stack([policy.action_probs(encode(phi, cmdp, np.arange(S), t, tc)) for t in range(K)])
        tv = 0.5 * np.abs(probs[:, None] - probs[None, :]).sum(axis=3)  # (K, K, S)
        val, _ = max_ratio(tv, np.repeat(d_theta[:, :, None], S, axis=2))
        direct = max(direct, val)
    return LipschitzReport(L_f, L_z, L_t, L_y, L_f * L_z * L_y, direct, argmax)


# --------------------------------------------------------------------------
# generalization to an unseen context


def advantage_terms(mdp: FiniteMDP, pi: PolicyTable, pi_other: PolicyTable):
    """``E_{s ~ d^pi, a ~ pi_other}[A^pi(s, a)]`` and ``A_max = max_s |E_{a ~ pi_other} A^pi(s, a)|``."""
    ev = policy_evaluation(mdp, pi, comparison=pi_other)
    occ = discounted_occupancy(mdp, pi)
    per_state = np.einsum("sa,sa->s", pi_other.probs, ev.adv)
    return float(occ @ per_state), float(ev.a_max), ev


def generalization_rhs(gamma: float, exp_adv: float, a_max: float, K: float) -> float:
    return (exp_adv + 2.0 * gamma * a_max * K / (1.0 - gamma)) / (1.0 - gamma)


def check_generalization_bound(cmdp: ContextualMDP, phi, policy: LatentPolicy, theta_i: int, theta_j: int,
                               lipschitz: LipschitzReport | None = None, seed: int | None = None) -> BoundReport:
    """Return gap between running the context-``theta_i`` policy on ``theta_i`` versus ``theta_j`` observations."""
    require_block_structure(cmdp)
    lip = lipschitz or estimate_lipschitz(cmdp, phi, policy)
    base = cmdp.base
    gamma = base.gamma
    pi_i = state_policy(cmdp, phi, policy, theta_i, theta_i)
    pi_ij = state_policy(cmdp, phi, policy, theta_i, theta_j)
    exp_adv, a_max, ev_i = advantage_terms(base, pi_i, pi_ij)
    j_ij = policy_evaluation(base, pi_ij).j
    signed = ev_i.j - j_ij
    d_theta = cmdp.contexts.distance(theta_i, theta_j)
    K = lip.L_f_theta * lip.L_phi_z * lip.L_pi_y * d_theta
    rhs = generalization_rhs(gamma, exp_adv, a_max, K)
    consts = {"gamma": gamma, "L_f_theta": lip.L_f_theta, "L_phi_z": lip.L_phi_z, "L_pi_y": lip.L_pi_y,
              "d_theta": d_theta, "exp_adv": exp_adv, "a_max": a_max}
    return BoundReport.build("3", abs(signed), rhs, consts, seed=seed, env_hash=env_hash(cmdp),
                             extra={"theta_i": theta_i, "theta_j": theta_j, "signed_lhs": signed,
                                    "ambiguous": bool(rhs < 0)})


# --------------------------------------------------------------------------
# simulator fidelity


@dataclass(frozen=True)
class PerturbationSpec:
    eps_R: float = 0.0
    eps_P: float = 0.0
    eps_f: float = 0.0
    seed: int = 0
    mix: str = "dirichlet"  # or "disjoint": mixing row supported off supp(P)

    def __post_init__(self):
        if min(self.eps_R, self.eps_P, self.eps_f) < 0:
            raise ValueError("perturbation budgets must be nonnegative")
        if self.eps_P > 1:
            raise ValueError("eps_P is a TV budget and cannot exceed 1")
        if self.mix not in ("dirichlet", "disjoint"):
            raise ValueError(f"unknown mixing row kind {self.mix!r}")


def _mixing_row(p: np.ndarray, mix: str, rng: np.random.Generator) -> np.ndarray:
    n = len(p)
    if mix == "dirichlet":
        return rng.dirichlet(np.ones(n))
    off = np.flatnonzero(p <= 0)
    q = np.zeros(n)
    if len(off):
        q[off] = rng.dirichlet(np.ones(len(off)))
    else:
        q[int(np.argmin(p))] = 1.0
    return q


def perturb_simulator(mdp: FiniteMDP, spec: PerturbationSpec) -> FiniteMDP:
    """Seeded approximate simulator within the reward and transition budgets of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    S, A = mdp.n_states, mdp.n_actions
    r = mdp.reward.copy()
    if spec.eps_R > 0:
        r = np.clip(r + rng.uniform(-spec.eps_R, spec.eps_R, size=r.shape), 0.0, mdp.r_max)
    P = mdp.transition.copy()
    if spec.eps_P > 0:
        for s in range(S):
            for a in range(A):
                q = _mixing_row(P[s, a], spec.mix, rng)
                tv = 0.5 * np.abs(q - P[s, a]).sum()
                if tv <= 0:
                    continue
                alpha = min(1.0, spec.eps_P / tv)
                row = (1.0 - alpha) * P[s, a] + alpha * q
                P[s, a] = row / row.sum()
    return mdp.replace(transition=P, reward=r)


def measure_budgets(mdp: FiniteMDP, mdp_hat: FiniteMDP) -> tuple[float, float]:
    """Achieved ``(eps_R, eps_P)``: sup reward gap and largest per-(s, a) TV gap."""
    if mdp.transition.shape != mdp_hat.transition.shape:
        raise ShapeMismatch("simulators have different state/action spaces")
    eps_R = float(np.abs(mdp.reward - mdp_hat.reward).max())
    eps_P = float(min(1.0, 0.5 * np.abs(mdp.transition - mdp_hat.transition).sum(axis=2).max()))
    return eps_R, eps_P


def fidelity_rhs(eps_R: float, eps_P: float, gamma: float, r_max: float) -> float:
    return eps_R / (1.0 - gamma) + gamma * eps_P * r_max / (1.0 - gamma) ** 2


def check_fidelity_bound(mdp: FiniteMDP, mdp_hat: FiniteMDP, policy, seed: int | None = None,
                         env: str | None = None) -> BoundReport:
    """Return gap of one policy between a simulator and its approximation."""
    eps_R, eps_P = measure_budgets(mdp, mdp_hat)
    j = policy_evaluation(mdp, policy).j
    j_hat = policy_evaluation(mdp_hat, policy).j
    rhs = fidelity_rhs(eps_R, eps_P, mdp.gamma, mdp.r_max)
    consts = {"eps_R": eps_R, "eps_P": eps_P, "gamma": mdp.gamma, "R_max": mdp.r_max}
    return BoundReport.build("4", abs(j - j_hat), rhs, consts, seed=seed, env_hash=env,
                             extra={"signed_lhs": j - j_hat})


def embedding_gap(phi, real: ContextualMDP, sim: ContextualMDP) -> float:
    """``max_{s, theta} |phi(f_hat_theta(s), theta) - phi(f_theta(s), theta)|_1``."""
    S = np.arange(real.n_states)
    gap = 0.0
    for t in range(real.n_contexts):
        y = encode(phi, real, S, t, t)
        y_hat = encode(phi, real, S, t, t, obs_map=sim.obs_map)
        gap = max(gap, float(np.abs(y - y_hat).sum(axis=1).max()))
    return gap


def perturb_observations(cmdp: ContextualMDP, phi, eps_f: float, rng: np.random.Generator,
                         bisect_iters: int = 50) -> ContextualMDP:
    """Shift the observation map along a random direction, as far as keeps the embedding gap within ``eps_f``."""
    F = cmdp.obs_map
    direction = rng.normal(size=F.shape)
    direction /= np.abs(direction).max()

    def shifted(t):
        return cmdp.replace(obs_map=np.clip(F + t * direction, 0.0, 1.0), obs_rule=None)

    if eps_f <= 0:
        return cmdp.replace(obs_rule=None)
    lo, hi = 0.0, 1.0
    if embedding_gap(phi, cmdp, shifted(hi)) <= eps_f:
        return shifted(hi)
    for _ in range(bisect_iters):
        mid = 0.5 * (lo + hi)
        if embedding_gap(phi, cmdp, shifted(mid)) <= eps_f:
            lo = mid
        else:
            hi = mid
    return shifted(lo)


def check_complete_fidelity_bound(real: ContextualMDP, sim: ContextualMDP, phi, policy: LatentPolicy,
                                  theta: int, seed: int | None = None) -> BoundReport:
    """Gap between deploying the sim-trained policy through real observations and its sim value.

    The policy acts on ``phi(f_hat_theta(s), theta)`` in the simulator and on
    ``phi(f_theta(s), theta)`` in the real environment.
    """
    require_block_structure(real)
    require_block_structure(sim)
    gamma = real.base.gamma
    pi_sim = state_policy(sim, phi, policy, theta, theta)
    pi_dep = state_policy(real, phi, policy, theta, theta)
    eps_R, eps_P = measure_budgets(real.base, sim.base)
    eps_f = embedding_gap(phi, real, sim)
    S = np.arange(real.n_states)
    points = np.concatenate([np.concatenate([encode(phi, real, S, t, t), encode(phi, sim, S, t, t)])
                             for t in range(real.n_contexts)])
    L_y, _ = policy_lipschitz(policy, points)
    exp_adv, a_max, ev_sim = advantage_terms(sim.base, pi_sim, pi_dep)
    j_dep = policy_evaluation(real.base, pi_dep).j
    signed = j_dep - ev_sim.j
    rhs = fidelity_rhs(eps_R, eps_P, gamma, real.base.r_max) + \
        generalization_rhs(gamma, exp_adv, a_max, L_y * eps_f)
    consts = {"eps_R": eps_R, "eps_P": eps_P, "eps_f": eps_f, "gamma": gamma, "R_max": real.base.r_max,
              "L_pi_y": L_y, "exp_adv": exp_adv, "a_max": a_max}
    return BoundReport.build("5", abs(signed), rhs, consts, seed=seed, env_hash=env_hash(real),
                             extra={"theta": theta, "signed_lhs": signed})


# --------------------------------------------------------------------------
# randomized suites


@dataclass(frozen=True)
class SuiteConfig:
    env_kind: str = "random_cmdp"
    env_params: dict = field(default_factory=dict)
    temperature: float = 0.1
    widths: tuple = (16,)
    out_dim: int = 4
    phi_scale: float = 1.0
    c: float | None = None  # transition weight of the metric; None means c = gamma
    max_budget: float = 0.1

    def params(self) -> dict:
        return dict(self.env_params)

    def to_dict(self) -> dict:
        return {**asdict(self), "widths": list(self.widths)}


def trial_rng(master: int, k: int) -> np.random.Generator:
    """Per-trial stream ``SeedSequence(master, spawn_key=(k,))``: independent of the number of trials."""
    return np.random.default_rng(np.random.SeedSequence(master, spawn_key=(k,)))


def _trial_env(cfg: SuiteConfig, rng: np.random.Generator, env: ContextualMDP | None):
    if env is not None:
        return env
    return generate_env(cfg.env_kind, cfg.params(), int(rng.integers(2**31)))


def _random_phi(cmdp: ContextualMDP, cfg: SuiteConfig, rng: np.random.Generator) -> MLPEmbedding:
    return MLPEmbedding.for_env(cmdp, cfg.widths, cfg.out_dim, rng, scale=cfg.phi_scale)


def near_isometric_embedding(cmdp: ContextualMDP, c: float, temperature: float, noise: float,
                             rng: np.random.Generator) -> TableEmbedding:
    Y, _ = l1_embedding(true_metric(cmdp, c, temperature))
    phi = TableEmbedding.from_state_embedding(cmdp, Y)
    if noise > 0:
        phi.params["table"] = phi.params["table"] + rng.uniform(-noise, noise, phi.params["table"].shape)
    return phi


def merl_policy(cmdp: ContextualMDP, phi, temperature: float) -> LatentPolicy:
    _, _, pi = soft_value_iteration(cmdp.base, temperature)
    return lifted_policy(cmdp, phi, pi.probs)


def trial_thm2(k: int, master: int, cfg: SuiteConfig, env=None) -> list[BoundReport]:
    from .abstraction import verify_aggregation_bound

    rng = trial_rng(master, k)
    cmdp = _trial_env(cfg, rng, env)
    c = cmdp.base.gamma if cfg.c is None else cfg.c
    if k % 2 == 0:
        phi = _random_phi(cmdp, cfg, rng)
        eps = float(rng.uniform(0.0, 1.0))
    else:
        # near-isometric: exact L1 embedding of the metric plus small per-tuple noise
        phi = near_isometric_embedding(cmdp, c, cfg.temperature, float(rng.uniform(0.0, 0.02)), rng)
        eps = float(rng.uniform(0.0, 0.3))
    rep = verify_aggregation_bound(cmdp, phi, eps, c, temperature=cfg.temperature, seed=master)
    rep.extra["trial"] = k
    return [rep]


def trial_thm3(k: int, master: int, cfg: SuiteConfig, env=None) -> list[BoundReport]:
    rng = trial_rng(master, k)
    cmdp = _trial_env(cfg, rng, env)
    phi = _random_phi(cmdp, cfg, rng)
    policy = merl_policy(cmdp, phi, cfg.temperature)
    lip = estimate_lipschitz(cmdp, phi, policy)
    out = []
    for i in range(cmdp.n_contexts):
        for j in range(cmdp.n_contexts):
            if i != j:
                rep = check_generalization_bound(cmdp, phi, policy, i, j, lip, seed=master)
                rep.extra["trial"] = k
                out.append(rep)
    return out


def trial_thm4(k: int, master: int, cfg: SuiteConfig, env=None) -> list[BoundReport]:
    rng = trial_rng(master, k)
    cmdp = _trial_env(cfg, rng, env)
    base = cmdp.base
    spec = PerturbationSpec(float(rng.uniform(0, cfg.max_budget)), float(rng.uniform(0, cfg.max_budget)),
                            seed=int(rng.integers(2**31)))
    sim = perturb_simulator(base, spec)
    policy = PolicyTable(rng.dirichlet(np.ones(base.n_actions), size=base.n_states))
    rep = check_fidelity_bound(base, sim, policy, seed=master, env=env_hash(cmdp))
    rep.extra["trial"] = k
    return [rep]


def make_simulator(real: ContextualMDP, phi, rng: np.random.Generator, max_budget: float,
                   eps_f: float | None = None) -> ContextualMDP:
    spec = PerturbationSpec(float(rng.uniform(0, max_budget)), float(rng.uniform(0, max_budget)),
                            seed=int(rng.integers(2**31)))
    sim_base = perturb_simulator(real.base, spec)
    eps_f = float(rng.uniform(0, max_budget)) if eps_f is None else eps_f
    return perturb_observations(real, phi, eps_f, rng).replace(base=sim_base)


def trial_thm5(k: int, master: int, cfg: SuiteConfig, env=None) -> list[BoundReport]:
    rng = trial_rng(master, k)
    real = _trial_env(cfg, rng, env)
    phi = _random_phi(real, cfg, rng)
    sim = make_simulator(real, phi, rng, cfg.max_budget)
    policy = merl_policy(sim, phi, cfg.temperature)
    out = []
    for t in range(real.n_contexts):
        rep = check_complete_fidelity_bound(real, sim, phi, policy, t, seed=master)
        rep.extra["trial"] = k
        out.append(rep)
    return out


TRIALS = {"2": trial_thm2, "3": trial_thm3, "4": trial_thm4, "5": trial_thm5}


def run_suite(theorem: str, n_trials: int, seed: int, cfg: SuiteConfig | None = None,
              env: ContextualMDP | None = None, workers: int = 1) -> list[BoundReport]:
    """All reports of ``n_trials`` randomized trials, in trial order."""
    cfg = cfg or SuiteConfig()
    fn = TRIALS[theorem]
    if workers > 1 and n_trials > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, range(n_trials), [seed] * n_trials, [cfg] * n_trials,
                                   [env] * n_trials))
    else:
        chunks = [fn(k, seed, cfg, env) for k in range(n_trials)]
    return [rep for chunk in chunks for rep in chunk]
