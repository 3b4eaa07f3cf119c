"""Exact linear-algebra machinery for tabular problems.

Value functions come from direct linear solves of the fixed-point
conditions; visitation weights come from the transposed systems. Analytic
objective gradients are assembled from those tables, and centered
finite-difference probes of the objective serve as the reference that
every analytic derivative in the package is checked against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CapabilityError,
    ErgodicityError,
    InvalidStructureError,
    ProbeError,
    ReachabilityError,
)
from .model import (
    Average,
    EpisodicDiscounted,
    FirstExit,
    Problem,
    TabularInitial,
    TimeVarying,
    check_params,
)

_RESIDUAL_TOL = 1e-10


def _require_tabular(problem: Problem):
    if not problem.chain.tabular:
        raise CapabilityError("exact solvers require a tabular chain")


def _nonterminal_mask(chain) -> np.ndarray:
    mask = np.ones(chain.n_states, dtype=bool)
    for s in chain.terminal:
        mask[s] = False
    return mask


def _check_terminal_costs(L: np.ndarray, chain):
    for s in chain.terminal:
        if abs(L[s]) > 1e-12:
            raise InvalidStructureError(
                f"terminal state {s} must have zero cost, found {L[s]}"
            )


def _spectral_radius_below_one(M: np.ndarray) -> bool:
    if M.size == 0:
        return True
    return np.max(np.abs(np.linalg.eigvals(M))) < 1.0 - 1e-12


# ---------------------------------------------------------------------------
# Value solvers
# ---------------------------------------------------------------------------


@dataclass
class ValueTable:
    """Per-state values with the max residual of the defining equations."""

    values: np.ndarray
    residual: float


@dataclass
class AverageCost:
    """Long-run average cost and differential values normalized to E_d[V] = 0."""

    j: float
    values: np.ndarray
    residual: float


def solve_value_episodic(problem: Problem, theta) -> ValueTable:
    """Solve V = L + gamma P V for discounted or first-exit problems."""
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    if not isinstance(problem.setting, (EpisodicDiscounted, FirstExit)):
        raise InvalidStructureError("episodic solver needs a discounted or first-exit setting")
    gamma = problem.gamma
    chain, cost = problem.chain, problem.cost
    n = chain.n_states
    P = chain.transition_matrix(theta)
    L = cost.value_table(n, theta)
    if not np.all(np.isfinite(L)):
        raise InvalidStructureError("cost table contains non-finite entries")
    if isinstance(problem.setting, FirstExit):
        _check_terminal_costs(L, chain)
        live = _nonterminal_mask(chain)
        Pnn = P[np.ix_(live, live)]
        if not _spectral_radius_below_one(Pnn):
            raise ReachabilityError(
                "terminal set is not reached with probability 1 from every state"
            )
        V = np.zeros(n)
        V[live] = np.linalg.solve(np.eye(Pnn.shape[0]) - Pnn, L[live])
    else:
        V = np.linalg.solve(np.eye(n) - gamma * P, L)
    residual = float(np.max(np.abs(V - (L + gamma * P @ V))))
    if residual > _RESIDUAL_TOL * max(1.0, np.max(np.abs(V))):
        raise InvalidStructureError(f"value solve residual {residual} too large")
    return ValueTable(values=V, residual=residual)


def stationary_density(problem: Problem, theta) -> np.ndarray:
    """Stationary distribution of the chain; errors if not ergodic."""
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    P = problem.chain.transition_matrix(theta)
    return stationary_from_matrix(P)


def stationary_from_matrix(P: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix, with ergodicity checks."""
    n = P.shape[0]
    vals, vecs = np.linalg.eig(P.T)
    close = np.abs(vals - 1.0) < 1e-8
    if close.sum() == 0:
        raise ErgodicityError("no stationary distribution found")
    if close.sum() > 1:
        raise ErgodicityError("chain is reducible: stationary distribution is not unique")
    on_circle = (np.abs(np.abs(vals) - 1.0) < 1e-10) & ~close
    if on_circle.any():
        raise ErgodicityError("chain is periodic")
    d = np.real(vecs[:, np.nonzero(close)[0][0]])
    d = np.abs(d)
    d = d / d.sum()
    if np.min(d) <= 1e-12:
        raise ErgodicityError("stationary distribution is not fully supported")
    resid = float(np.max(np.abs(P.T @ d - d)))
    if resid > 1e-9:
        raise ErgodicityError(f"stationary solve residual {resid} too large")
    return d


def solve_value_average(problem: Problem, theta) -> AverageCost:
    """Average cost J and differential values via the fundamental matrix.

    V = (I - P + 1 d')^{-1} (L - J 1) automatically satisfies the gauge
    E_d[V] = 0 because d'(I - P + 1 d') = d'.
    """
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    if not isinstance(problem.setting, Average):
        raise InvalidStructureError("average solver needs an average setting")
    chain, cost = problem.chain, problem.cost
    n = chain.n_states
    P = chain.transition_matrix(theta)
    d = stationary_from_matrix(P)
    L = cost.value_table(n, theta)
    j = float(d @ L)
    V = np.linalg.solve(np.eye(n) - P + np.outer(np.ones(n), d), L - j)
    residual = float(np.max(np.abs(V + j - (L + P @ V))))
    gauge = abs(float(d @ V))
    if residual > _RESIDUAL_TOL * max(1.0, np.max(np.abs(V))) or gauge > 1e-9:
        raise InvalidStructureError(f"average solve residual {residual}, gauge {gauge}")
    return AverageCost(j=j, values=V, residual=residual)


def solve_value_timevarying(problem: Problem, theta) -> np.ndarray:
    """Backward recursion V_t = L_t + P_t V_{t+1}; returns (T+1, n_states)."""
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    if not isinstance(problem.setting, TimeVarying):
        raise InvalidStructureError("time-varying solver needs a time-varying setting")
    chain, cost = problem.chain, problem.cost
    T = problem.setting.horizon
    n = chain.n_states
    V = np.zeros((T + 1, n))
    V[T] = cost.value_table(n, theta, T)
    for t in range(T - 1, -1, -1):
        P = chain.transition_matrix(theta, t)
        V[t] = cost.value_table(n, theta, t) + P @ V[t + 1]
    return V


# ---------------------------------------------------------------------------
# Visitation weights
# ---------------------------------------------------------------------------


def discounted_occupancy(problem: Problem, theta) -> np.ndarray:
    """Discounted visitation weights rho = sum_t gamma^t Pr(x_t = .).

    The sum starts at t = 0 so the start law itself is counted. Terminal
    states are counted once on entry: their rows are removed from the
    propagation so absorbed mass stops circulating. Satisfies
    rho = p0 + gamma P~' rho with P~ the propagation matrix.
    """
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    if not isinstance(problem.setting, (EpisodicDiscounted, FirstExit)):
        raise InvalidStructureError("occupancy is defined for discounted or first-exit settings")
    if not isinstance(problem.init, TabularInitial):
        raise InvalidStructureError("occupancy needs a tabular start law")
    gamma = problem.gamma
    chain = problem.chain
    n = chain.n_states
    P = chain.transition_matrix(theta)
    for s in chain.terminal:
        P[s, :] = 0.0
    if isinstance(problem.setting, FirstExit):
        live = _nonterminal_mask(chain)
        if not _spectral_radius_below_one(P[np.ix_(live, live)]):
            raise ReachabilityError("occupancy diverges: terminal set not always reached")
    p0 = problem.init.weights
    rho = np.linalg.solve(np.eye(n) - gamma * P.T, p0)
    resid = float(np.max(np.abs(rho - (p0 + gamma * P.T @ rho))))
    if resid > _RESIDUAL_TOL * max(1.0, np.max(np.abs(rho))):
        raise InvalidStructureError(f"occupancy residual {resid} too large")
    return rho


# ---------------------------------------------------------------------------
# Objective and analytic gradient
# ---------------------------------------------------------------------------


def objective(problem: Problem, theta) -> float:
    """Expected accumulated cost under the setting's semantics."""
    _require_tabular(problem)
    setting = problem.setting
    if isinstance(setting, (EpisodicDiscounted, FirstExit)):
        V = solve_value_episodic(problem, theta).values
        return float(problem.init.weights @ V)
    if isinstance(setting, Average):
        return solve_value_average(problem, theta).j
    V = solve_value_timevarying(problem, theta)
    return float(problem.init.weights @ V[0])


def exact_gradient(problem: Problem, theta) -> np.ndarray:
    """Analytic objective gradient assembled from visitation weights and values.

    Uses the expectation form: the chain term enters as
    sum_y P(y|x) score(x,y) V(y), weighted by the discounted occupancy
    (episodic and first-exit), the stationary distribution (average), or
    stage densities (time-varying).
    """
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    if not problem.chain.differentiable or not problem.cost.differentiable:
        raise CapabilityError("exact gradient needs differentiable chain and cost")
    setting = problem.setting
    chain, cost = problem.chain, problem.cost
    n = chain.n_states

    if isinstance(setting, (EpisodicDiscounted, FirstExit)):
        gamma = problem.gamma
        V = solve_value_episodic(problem, theta).values
        rho = discounted_occupancy(problem, theta)
        P = chain.transition_matrix(theta)
        S = chain.score_table(theta)
        gradL = cost.grad_table(n, theta)
        g = rho @ gradL
        g += gamma * np.einsum("x,xy,y,xyp->p", rho, P, V, S)
        return g

    if isinstance(setting, Average):
        avg = solve_value_average(problem, theta)
        d = stationary_density(problem, theta)
        P = chain.transition_matrix(theta)
        S = chain.score_table(theta)
        gradL = cost.grad_table(n, theta)
        g = d @ gradL
        g += np.einsum("x,xy,y,xyp->p", d, P, avg.values, S)
        return g

    T = setting.horizon
    V = solve_value_timevarying(problem, theta)
    p = problem.init.weights.copy()
    g = np.zeros(problem.n_params)
    for t in range(T + 1):
        g += p @ cost.grad_table(n, theta, t)
        if t < T:
            P = chain.transition_matrix(theta, t)
            S = chain.score_table(theta, t)
            g += np.einsum("x,xy,y,xyp->p", p, P, V[t + 1], S)
            p = P.T @ p
    return g


def exact_gradient_bottleneck(problem: Problem, theta) -> np.ndarray:
    """Gradient routed through a low-dimensional policy output eta = mu(x, theta).

    Requires chain and cost to expose the bottleneck interface; equals
    exact_gradient whenever both apply, by the chain rule.
    """
    _require_tabular(problem)
    theta = check_params(theta, problem.n_params)
    chain, cost = problem.chain, problem.cost
    if not chain.has_bottleneck or not cost.has_bottleneck:
        raise CapabilityError("bottleneck gradient needs bottleneck chain and cost")
    setting = problem.setting
    if isinstance(setting, (EpisodicDiscounted, FirstExit)):
        gamma = problem.gamma
        V = solve_value_episodic(problem, theta).values
        weights = discounted_occupancy(problem, theta)
    elif isinstance(setting, Average):
        gamma = 1.0
        avg = solve_value_average(problem, theta)
        V = avg.values
        weights = stationary_density(problem, theta)
    else:
        raise CapabilityError("bottleneck gradient covers stationary settings only")
    g = np.zeros(problem.n_params)
    for x in range(chain.n_states):
        if x in chain.terminal:
            continue
        eta = chain.bottleneck(x, theta)
        inner = cost.grad_eta(x, eta) + gamma * (chain.prob_row_eta_jac(x, eta).T @ V)
        g += weights[x] * (chain.bottleneck_jac(x, theta) @ inner)
    return g


# ---------------------------------------------------------------------------
# Finite-difference oracles
# ---------------------------------------------------------------------------


def _probe(fn, theta, coordinate):
    try:
        val = fn(theta)
    except Exception as exc:
        raise ProbeError(
            f"objective probe failed at coordinate {coordinate}: {exc}", coordinate
        ) from exc
    if not np.isfinite(val):
        raise ProbeError(
            f"objective probe is non-finite at coordinate {coordinate}", coordinate
        )
    return val


def fd_gradient(fn, theta, h=1e-6) -> np.ndarray:
    """Centered finite-difference gradient of a scalar function of theta.

    Steps scale with coordinate magnitude: h_i = h (1 + |theta_i|).
    """
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(theta.shape[0])
    for i in range(theta.shape[0]):
        hi = h * (1.0 + abs(theta[i]))
        up = theta.copy()
        up[i] += hi
        dn = theta.copy()
        dn[i] -= hi
        g[i] = (_probe(fn, up, i) - _probe(fn, dn, i)) / (2.0 * hi)
    return g


def fd_hessian(fn, theta, h=1e-4) -> np.ndarray:
    """Centered finite-difference Hessian of a scalar function, symmetrized."""
    theta = np.asarray(theta, dtype=float)
    k = theta.shape[0]
    steps = h * (1.0 + np.abs(theta))
    H = np.zeros((k, k))
    f0 = _probe(fn, theta, None)
    for i in range(k):
        up = theta.copy()
        up[i] += steps[i]
        dn = theta.copy()
        dn[i] -= steps[i]
        H[i, i] = (_probe(fn, up, i) - 2.0 * f0 + _probe(fn, dn, i)) / steps[i] ** 2
    for i in range(k):
        for j in range(i + 1, k):
            pp = theta.copy()
            pp[[i, j]] += [steps[i], steps[j]]
            pm = theta.copy()
            pm[[i, j]] += [steps[i], -steps[j]]
            mp = theta.copy()
            mp[[i, j]] += [-steps[i], steps[j]]
            mm = theta.copy()
            mm[[i, j]] += [-steps[i], -steps[j]]
            val = (
                _probe(fn, pp, j) - _probe(fn, pm, j) - _probe(fn, mp, j) + _probe(fn, mm, j)
            ) / (4.0 * steps[i] * steps[j])
            H[i, j] = val
            H[j, i] = val
    return 0.5 * (H + H.T)


def fd_gradient_oracle(problem: Problem, theta, h=1e-6) -> np.ndarray:
    """Finite-difference gradient of the exact objective."""
    return fd_gradient(lambda th: objective(problem, th), theta, h)


def fd_hessian_oracle(problem: Problem, theta, h=1e-4) -> np.ndarray:
    """Finite-difference Hessian of the exact objective."""
    return fd_hessian(lambda th: objective(problem, th), theta, h)
