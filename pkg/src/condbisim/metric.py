"""Exact Wasserstein distances and bisimulation pseudometrics.

The transport problems are solved exactly with a network simplex (POT's
``emd``); the fixed-point iteration starts from the zero metric so it lands on
the least fixed point.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .cmdp import FiniteMDP
from .errors import DimensionMismatch, Infeasible, NonConvergence
from .solver import PolicyTable, policy_matrices

for _backend in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")
import ot  # noqa: E402

MASS_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PseudoMetric:
    d: np.ndarray
    index_kind: str = "states"
    labels: tuple | None = None

    def __post_init__(self):
        d = np.array(self.d, dtype=float)
        if d.ndim != 2 or d.shape[0] != d.shape[1]:
            raise ValueError("distance table must be square")
        d.setflags(write=False)
        object.__setattr__(self, "d", d)
        if self.labels is None:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(len(d))))

    def __len__(self) -> int:
        return len(self.d)

    @property
    def sup(self) -> float:
        return float(self.d.max()) if self.d.size else 0.0


def lint_metric(d, r_max: float | None = None, tol: float = 1e-6) -> list[str]:
    """Human-readable list of violated pseudometric invariants (empty when valid)."""
    d = np.asarray(d, dtype=float)
    problems = []
    if np.abs(np.diag(d)).max(initial=0.0) > 0:
        problems.append("nonzero diagonal")
    if not np.array_equal(d, d.T):
        problems.append("not symmetric")
    if (d < 0).any():
        problems.append("negative entries")
    excess = triangle_violation(d)
    if excess > tol:
        problems.append(f"triangle inequality violated by {excess:.3g}")
    if r_max is not None and d.max(initial=0.0) > r_max + tol:
        problems.append(f"sup {d.max():.6g} exceeds r_max {r_max}")
    return problems


def triangle_violation(d: np.ndarray) -> float:
    """``max_{i,j,k} d[i,k] - d[i,j] - d[j,k]`` clipped at zero."""
    d = np.asarray(d, dtype=float)
    if len(d) < 3:
        return 0.0
    via = d[:, :, None] + d[None, :, :]  # via[i, j, k] = d[i,j] + d[j,k]
    return float(max(0.0, (d[:, None, :] - via).max()))


@dataclass(frozen=True)
class MetricConfig:
    c: float = 0.5
    tol: float = 1e-9
    max_iters: int = 100_000
    mode: str = "max"  # "max" over actions, or "pi" policy expectation
    allow_zero_c: bool = False

    def __post_init__(self):
        lo_ok = self.c > 0 or (self.allow_zero_c and self.c == 0)
        if not (lo_ok and self.c < 1):
            raise ValueError(f"c must lie in (0, 1), got {self.c}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.mode not in ("max", "pi"):
            raise ValueError(f"unknown metric mode {self.mode!r}")


@dataclass(frozen=True)
class GaussianMoments:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=float))
        sd = np.atleast_1d(np.asarray(self.std, dtype=float))
        if mu.shape != sd.shape:
            raise DimensionMismatch("mean and std must have the same shape")
        if (sd < 0).any():
            raise ValueError("standard deviations must be nonnegative")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "std", sd)


# --------------------------------------------------------------------------
# transport


def _check_dist(p: np.ndarray, name: str) -> np.ndarray:
    if (p < -MASS_TOL).any() or abs(p.sum() - 1.0) > MASS_TOL or not np.isfinite(p).all():
        raise Infeasible(f"{name} is not a normalized distribution")
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def transport(p, q, cost: np.ndarray, return_duals: bool = False):
    """Exact optimal transport between ``p`` (rows) and ``q`` (columns) under ``cost``.

    Returns ``(cost, coupling)`` and, with ``return_duals``, the Kantorovich
    potentials ``(u, v)`` with ``u_i + v_j <= cost_ij``.
    """
    p = _check_dist(np.asarray(p, dtype=float), "p")
    q = _check_dist(np.asarray(q, dtype=float), "q")
    cost = np.ascontiguousarray(cost, dtype=float)
    if cost.shape != (len(p), len(q)):
        raise DimensionMismatch("cost matrix shape does not match the marginals")
    G, log = ot.emd(p, q, cost, numItermax=1_000_000, log=True)
    if log["result_code"] != 1:
        raise NonConvergence(f"network simplex failed: {log['warning']}")
    value = float(np.sum(G * cost))
    if return_duals:
        return value, G, log["u"], log["v"]
    return value, G


def wasserstein1(p, q, ground) -> tuple[float, np.ndarray]:
    """W1 between two distributions on the index set of ``ground`` (a PseudoMetric or table).

    Only the supports enter the transport problem; the returned coupling is the
    full ``(n, n)`` table.
    """
    d = ground.d if isinstance(ground, PseudoMetric) else np.asarray(ground, dtype=float)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (len(d),) or q.shape != (len(d),):
        raise DimensionMismatch("distributions must live on the ground metric's index set")
    p = _check_dist(p, "p")
    q = _check_dist(q, "q")
    coupling = np.zeros((len(d), len(d)))
    if np.array_equal(p, q):
        np.fill_diagonal(coupling, p)
        return 0.0, coupling
    ip = np.flatnonzero(p)
    iq = np.flatnonzero(q)
    value, G = transport(p[ip], q[iq], d[np.ix_(ip, iq)])
    coupling[np.ix_(ip, iq)] = G
    return value, coupling


def _w1_value(p: np.ndarray, q: np.ndarray, d: np.ndarray) -> float:
    # fast path for the metric iteration: inputs are already stochastic rows
    if np.array_equal(p, q):
        return 0.0
    ip = np.flatnonzero(p)
    iq = np.flatnonzero(q)
    if len(ip) == 1 and len(iq) == 1:
        return float(d[ip[0], iq[0]])
    pp = p[ip] / p[ip].sum()
    qq = q[iq] / q[iq].sum()
    G = ot.emd(pp, qq, np.ascontiguousarray(d[np.ix_(ip, iq)]), numItermax=1_000_000)
    return float(np.sum(G * d[np.ix_(ip, iq)]))


def w2_gaussian(a: GaussianMoments, b: GaussianMoments) -> float:
    """Closed-form W2 between diagonal Gaussians."""
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch("Gaussians have different dimensions")
    sq = np.sum((a.mean - b.mean) ** 2) + np.sum((a.std - b.std) ** 2)
    return float(math.sqrt(max(sq, 0.0)))


def w2_gaussian_batch(mu_a, sd_a, mu_b, sd_b) -> np.ndarray:
    sq = np.sum((mu_a - mu_b) ** 2, axis=-1) + np.sum((sd_a - sd_b) ** 2, axis=-1)
    return np.sqrt(np.maximum(sq, 0.0))


# --------------------------------------------------------------------------
# bisimulation operators


def _operator(rewards: np.ndarray, transitions: np.ndarray, d: np.ndarray, c: float) -> np.ndarray:
    """``F(d)[i,j] = max_a (1-c)|r_i^a - r_j^a| + c W1(P_i^a, P_j^a; d)``.

    ``rewards`` is (n, A) and ``transitions`` is (n, A, n); the policy mode just
    passes a single averaged action.
    """
    n, A = rewards.shape
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            best = 0.0
            for a in range(A):
                val = (1.0 - c) * abs(rewards[i, a] - rewards[j, a])
                if c > 0:
                    val += c * _w1_value(transitions[i, a], transitions[j, a], d)
                best = max(best, val)
            out[i, j] = out[j, i] = best
    return out


def _policy_tables(mdp: FiniteMDP, policy) -> tuple[np.ndarray, np.ndarray]:
    r_pi, P_pi = policy_matrices(mdp, policy)
    return r_pi[:, None], P_pi[:, None, :]


def bisim_operator(mdp: FiniteMDP, d, c: float) -> np.ndarray:
    d = d.d if isinstance(d, PseudoMetric) else np.asarray(d, dtype=float)
    return _operator(mdp.reward, mdp.transition, d, c)


def pi_bisim_operator(mdp: FiniteMDP, policy, d, c: float) -> np.ndarray:
    d = d.d if isinstance(d, PseudoMetric) else np.asarray(d, dtype=float)
    r, P = _policy_tables(mdp, policy)
    return _operator(r, P, d, c)


@dataclass
class FixedPointTrace:
    iterations: int
    residual: float


def _fixed_point(rewards, transitions, cfg: MetricConfig, index_kind: str):
    n = rewards.shape[0]
    d = np.zeros((n, n))
    for k in range(1, cfg.max_iters + 1):
        d_new = _operator(rewards, transitions, d, cfg.c)
        residual = float(np.abs(d_new - d).max(initial=0.0))
        d = d_new
        if residual <= cfg.tol:
            return PseudoMetric(d, index_kind), FixedPointTrace(k, residual)
    raise NonConvergence(f"metric iteration did not reach tol {cfg.tol} in {cfg.max_iters} sweeps")


def bisim_metric(mdp: FiniteMDP, cfg: MetricConfig | None = None, index_kind: str = "states",
                 return_trace: bool = False):
    """Bisimulation metric with the max over actions, by fixed-point iteration from zero."""
    cfg = cfg or MetricConfig()
    metric, trace = _fixed_point(mdp.reward, mdp.transition, cfg, index_kind)
    return (metric, trace) if return_trace else metric


def pi_bisim_metric(mdp: FiniteMDP, policy, cfg: MetricConfig | None = None,
                    index_kind: str = "states", return_trace: bool = False):
    """On-policy bisimulation metric for a fixed policy."""
    cfg = cfg or MetricConfig(mode="pi")
    if not isinstance(policy, PolicyTable):
        policy = PolicyTable(policy)
    r, P = _policy_tables(mdp, policy)
    metric, trace = _fixed_point(r, P, cfg, index_kind)
    return (metric, trace) if return_trace else metric


def iteration_bound(tol: float, r_max: float, c: float) -> int:
    """Sweeps needed from the zero metric for the residual to fall below ``tol``."""
    if r_max <= tol:
        return 1
    return math.ceil(math.log(tol / r_max) / math.log(c)) + 1


def zero_classes(metric, tol: float = 1e-9) -> list[list[int]]:
    """Connected components of the graph joining indices at distance ``<= tol``, ordered by smallest member."""
    d = metric.d if isinstance(metric, PseudoMetric) else np.asarray(metric, dtype=float)
    n_comp, labels = connected_components(d <= tol, directed=False)
    blocks: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        blocks.setdefault(int(lab), []).append(i)
    return sorted(blocks.values(), key=lambda b: b[0])


def l1_embedding(metric, max_points: int = 10) -> tuple[np.ndarray, float]:
    """Points in R^m whose L1 distances best fit ``metric``, via the cut-cone LP.

    Every L1-embeddable metric is a nonnegative combination of cut metrics
    ``|1[i in S] - 1[j in S]|``; the LP minimizes the total absolute misfit, so
    the returned misfit is 0 exactly when the metric is L1-embeddable.  One
    coordinate per cut with positive weight.
    """
    d = metric.d if isinstance(metric, PseudoMetric) else np.asarray(metric, dtype=float)
    n = len(d)
    if n > max_points:
        raise ValueError(f"cut enumeration is exponential; {n} points exceeds max_points={max_points}")
    if n < 2:
        return np.zeros((n, 1)), 0.0
    cuts = [set(S) for r in range(1, n) for S in itertools.combinations(range(1, n), r)]
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    A = np.array([[float((i in S) != (j in S)) for S in cuts] for i, j in pairs])
    b = np.array([d[i, j] for i, j in pairs])
    k, m = len(cuts), len(pairs)
    res = linprog(np.r_[np.zeros(k), np.ones(2 * m)], A_eq=np.hstack([A, np.eye(m), -np.eye(m)]),
                  b_eq=b, bounds=(0, None), method="highs")
    if res.status != 0:  # pragma: no cover - the LP is always feasible and bounded
        raise Infeasible(res.message)
    lam = res.x[:k]
    used = [c for c in range(k) if lam[c] > 1e-12] or [0]
    Y = np.array([[lam[c] * (s in cuts[c]) for c in used] for s in range(n)])
    return Y, float(res.fun)


# --------------------------------------------------------------------------
# CSV exchange


def write_metric_csv(metric: PseudoMetric, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([metric.index_kind, *metric.labels])
        for label, row in zip(metric.labels, metric.d):
            w.writerow([label, *(format(float(x), ".17g") for x in row)])


def read_metric_csv(path) -> PseudoMetric:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    labels = tuple(header[1:])
    d = np.array([[float(x) for x in row[1:]] for row in body])
    return PseudoMetric(d, header[0], labels)
