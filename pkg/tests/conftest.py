import numpy as np
import pytest
from scipy.optimize import linprog

from condbisim.cmdp import ContextSpace, ContextualMDP, FiniteMDP, generate_env


def two_state_self_loop(gamma=0.9):
    P = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    return FiniteMDP(P, np.array([[1.0], [0.0]]), gamma, np.array([0.5, 0.5]))


def random_mdp(rng, n=5, A=2, gamma=0.9):
    P = rng.dirichlet(np.ones(n), size=(n, A))
    return FiniteMDP(P, rng.uniform(0, 1, size=(n, A)), gamma, rng.dirichlet(np.ones(n)))


def w1_dual_lp(p, q, cost):
    """max p.u + q.v  s.t. u_i + v_j <= cost_ij, solved with HiGHS (independent of the network simplex)."""
    n, m = cost.shape
    A = np.zeros((n * m, n + m))
    for i in range(n):
        for j in range(m):
            A[i * m + j, i] = 1.0
            A[i * m + j, n + j] = 1.0
    res = linprog(-np.r_[p, q], A_ub=A, b_ub=cost.ravel(), bounds=(None, None), method="highs")
    assert res.status == 0
    return -res.fun


def random_pseudometric(rng, n, scale=1.0):
    # shortest-path closure of random positive weights is a pseudometric
    W = rng.uniform(0, scale, size=(n, n))
    W = (W + W.T) / 2
    np.fill_diagonal(W, 0.0)
    for k in range(n):
        W = np.minimum(W, W[:, [k]] + W[[k], :])
    return W


def central_fd(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-8))


def identity_cmdp(mdp, n_contexts=2):
    vals = np.linspace(0.0, 1.0, n_contexts)
    F = np.stack([np.eye(mdp.n_states) * (0.5 + 0.5 * v) for v in vals])
    return ContextualMDP(mdp, ContextSpace(vals, np.full(n_contexts, 1 / n_contexts)), F)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_env():
    return generate_env("random_cmdp", {"n_states": 4, "n_contexts": 2}, 0)


@pytest.fixture(scope="session")
def env6():
    return generate_env("random_cmdp", {"n_states": 6, "n_contexts": 3}, 1)


def rep_fd_error(phi, batch, T, cfg, n_points, rng, scale):
    """Worst relative error between analytic and central-difference gradients of the rep loss."""
    from condbisim.embed import flat_grads, flat_params, rep_loss_and_grad, set_flat_params

    frozen = phi.copy()
    errs = []
    for _ in range(n_points):
        x = rng.normal(0.0, scale, size=flat_params(phi).shape)
        set_flat_params(phi, x)

        def f(v):
            set_flat_params(phi, v)
            return rep_loss_and_grad(batch, phi, T, cfg, frozen=frozen)[0]

        _, g = rep_loss_and_grad(batch, phi, T, cfg, frozen=frozen)
        analytic = flat_grads(phi, g)
        numeric = central_fd(f, x)
        set_flat_params(phi, x)
        errs.append(rel_err(analytic, numeric))
    return max(errs)


def _mse_only_fd(dyn, x, pos, size, y, a, y_next, keys, h=1e-5):
    from condbisim.embed import set_flat_params

    out = np.zeros(size)
    for i in range(size):
        vals = []
        for sgn in (1, -1):
            v = x.copy()
            v[pos + i] += sgn * h
            set_flat_params(dyn, v)
            mu, _ = dyn._raw(y, a, keys)
            vals.append(np.sum((y_next - mu) ** 2) / len(y))
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


def dynamics_fd_error(dyn, n_actions, dim, rng, n_points, batch=10):
    """Same check for the latent dynamics loss on a random batch of latent transitions."""
    from condbisim.embed import flat_grads, flat_params, set_flat_params

    n_keys, A, m = 4, n_actions, dim
    y = rng.normal(size=(batch, m))
    y_next = rng.normal(size=(batch, m))
    a = rng.integers(A, size=batch)
    keys = rng.integers(n_keys, size=batch)
    errs = []
    for _ in range(n_points):
        x = rng.normal(0.0, 0.5, size=flat_params(dyn).shape)
        set_flat_params(dyn, x)

        def f(v):
            set_flat_params(dyn, v)
            return dyn.loss_and_grad(y, a, y_next, keys)[0]

        # the NLL holds the mean fixed, so the mean is differentiated only through the squared error
        _, g = dyn.loss_and_grad(y, a, y_next, keys)
        analytic = flat_grads(dyn, g)
        set_flat_params(dyn, x)
        numeric = central_fd(f, x)
        pos = 0
        for k in sorted(dyn.params):
            size = dyn.params[k].size
            if k in {"mu", "W", "b"}:
                numeric[pos:pos + size] = _mse_only_fd(dyn, x, pos, size, y, a, y_next, keys)
            pos += size
        set_flat_params(dyn, x)
        errs.append(rel_err(analytic, numeric))
    return max(errs)
