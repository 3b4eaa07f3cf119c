"""Adapters that realize Markov decision processes as chain/cost problems.

A decision process with a parameterized policy collapses to a plain
parameterized chain: average transitions over the policy and average the
action cost the same way. Regularized variants add entropy or divergence
terms to the step cost. The module also carries classical policy-gradient
formulas and an action-space policy evaluator used as independent checks
against the chain-side machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, DivergenceUndefinedError, InvalidStructureError
from .exact import (
    discounted_occupancy,
    solve_value_average,
    stationary_density,
    stationary_from_matrix,
)
from .model import (
    Average,
    ChainModel,
    CostModel,
    EpisodicDiscounted,
    FirstExit,
    Problem,
    Setting,
    TabularInitial,
    TableCost,
    WeightedSumCost,
    _softmax,
    check_params,
    cost_policy_entropy,
)


# ---------------------------------------------------------------------------
# Decision-process containers
# ---------------------------------------------------------------------------


@dataclass
class TabularMdp:
    """Finite decision process: transition tensor, cost table, setting, start law."""

    transitions: np.ndarray  # (n_states, n_actions, n_states)
    costs: np.ndarray  # (n_states, n_actions)
    setting: Setting
    init: TabularInitial

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.costs = np.asarray(self.costs, dtype=float)
        if self.transitions.ndim != 3:
            raise InvalidStructureError("transition tensor must be (states, actions, states)")
        n_s, n_a, n_s2 = self.transitions.shape
        if n_s != n_s2:
            raise InvalidStructureError("transition tensor must be square in states")
        if self.costs.shape != (n_s, n_a):
            raise InvalidStructureError("cost table must be (states, actions)")
        if np.any(self.transitions < -1e-12) or np.any(
            np.abs(self.transitions.sum(axis=2) - 1.0) > 1e-9
        ):
            raise InvalidStructureError("each (state, action) row must be a distribution")
        if not np.all(np.isfinite(self.costs)):
            raise InvalidStructureError("cost table must be finite")
        if self.init.weights.shape[0] != n_s:
            raise InvalidStructureError("start law length must match the state count")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]


@dataclass
class LmdpSpec:
    """Linearly-solvable problem data: baseline chain, state cost, terminal set."""

    baseline: np.ndarray  # (n, n) row-stochastic
    state_cost: np.ndarray  # (n,)
    terminal: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.baseline = np.asarray(self.baseline, dtype=float)
        self.state_cost = np.asarray(self.state_cost, dtype=float)
        self.terminal = frozenset(int(s) for s in self.terminal)
        n = self.baseline.shape[0]
        if self.baseline.shape != (n, n):
            raise InvalidStructureError("baseline must be square")
        if np.any(self.baseline < -1e-12) or np.any(
            np.abs(self.baseline.sum(axis=1) - 1.0) > 1e-9
        ):
            raise InvalidStructureError("baseline rows must be distributions")
        if self.state_cost.shape != (n,) or not np.all(np.isfinite(self.state_cost)):
            raise InvalidStructureError("state cost must be a finite vector")
        for s in self.terminal:
            if abs(self.baseline[s, s] - 1.0) > 1e-12:
                raise InvalidStructureError(f"terminal state {s} must be absorbing")
            if abs(self.state_cost[s]) > 1e-12:
                raise InvalidStructureError(f"terminal state {s} must have zero cost")

    @property
    def n_states(self) -> int:
        return self.baseline.shape[0]


# ---------------------------------------------------------------------------
# Softmax policy
# ---------------------------------------------------------------------------


class SoftmaxPolicy:
    """Tabular stochastic policy with one logit per (state, action)."""

    def __init__(self, n_states: int, n_actions: int):
        if n_states < 1 or n_actions < 1:
            raise InvalidStructureError("need at least one state and one action")
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        self.n_params = self.n_states * self.n_actions

    def param_slice(self, x: int) -> slice:
        return slice(x * self.n_actions, (x + 1) * self.n_actions)

    def row(self, x: int, theta) -> np.ndarray:
        th = np.asarray(theta, dtype=float)
        return _softmax(th[self.param_slice(x)])

    def table(self, theta) -> np.ndarray:
        return np.stack([self.row(x, theta) for x in range(self.n_states)])

    def jac_block(self, x: int, theta) -> np.ndarray:
        """d pi(.|x) / d theta_block, the (n_actions, n_actions) softmax Jacobian."""
        p = self.row(x, theta)
        return np.diag(p) - np.outer(p, p)


# ---------------------------------------------------------------------------
# Policy-averaged chain and costs
# ---------------------------------------------------------------------------


class PolicyAveragedChain(ChainModel):
    """Chain P(x'|x, theta) = sum_a pi(a|x, theta) p(x'|x, a).

    The policy's action distribution at x is the bottleneck output, so the
    same object serves the deterministic-bottleneck view where the action
    space is the probability simplex over base actions.
    """

    tabular = True
    samplable = True
    differentiable = True
    twice_differentiable = True
    has_bottleneck = True

    def __init__(self, transitions, policy: SoftmaxPolicy, terminal=()):
        self.p = np.asarray(transitions, dtype=float)
        self.policy = policy
        n_s, n_a, _ = self.p.shape
        if policy.n_states != n_s or policy.n_actions != n_a:
            raise InvalidStructureError("policy shape does not match the transition tensor")
        self.n_states = n_s
        self.n_bottleneck = n_a
        self.n_params = policy.n_params
        self.terminal = frozenset(int(s) for s in terminal)

    def prob_row(self, x, theta, t: int = 0) -> np.ndarray:
        if x in self.terminal:
            row = np.zeros(self.n_states)
            row[x] = 1.0
            return row
        return self.policy.row(x, theta) @ self.p[x]

    def successors(self, x):
        if x in self.terminal:
            return [x]
        return list(np.nonzero(self.p[x].max(axis=0) > 0)[0])

    def score(self, x, x_next, theta, t: int = 0) -> np.ndarray:
        g = np.zeros(self.n_params)
        if x in self.terminal:
            return g
        pi = self.policy.row(x, theta)
        total = float(pi @ self.p[x, :, x_next])
        if total <= 0.0:
            raise InvalidStructureError(f"transition {x}->{x_next} has zero probability")
        g[self.policy.param_slice(x)] = pi * (self.p[x, :, x_next] / total - 1.0)
        return g

    def log_prob_hess(self, x, x_next, theta, t: int = 0) -> np.ndarray:
        h = np.zeros((self.n_params, self.n_params))
        if x in self.terminal:
            return h
        pi = self.policy.row(x, theta)
        pv = self.p[x, :, x_next]
        total = float(pi @ pv)
        jac = self.policy.jac_block(x, theta)
        dP = jac @ pv
        jac2 = _softmax_second_derivative(pi)
        d2P = np.einsum("abc,a->bc", jac2, pv)
        sl = self.policy.param_slice(x)
        h[sl, sl] = d2P / total - np.outer(dP, dP) / total**2
        return h

    def sample(self, x, theta, rng, t: int = 0):
        if x in self.terminal:
            return x
        row = self.prob_row(x, theta)
        return int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))

    def make_sampler(self, theta, t: int = 0):
        cums = {}
        for x in range(self.n_states):
            cums[x] = np.cumsum(self.prob_row(x, theta))
        terminal = self.terminal
        n = self.n_states

        def step(x, rng):
            if x in terminal:
                return x
            idx = np.searchsorted(cums[x], rng.random(), side="right")
            return int(min(idx, n - 1))

        return step

    # --- bottleneck view: eta is the action distribution at x --------------

    def bottleneck(self, x, theta, t: int = 0) -> np.ndarray:
        return self.policy.row(x, theta)

    def bottleneck_jac(self, x, theta, t: int = 0) -> np.ndarray:
        jac = np.zeros((self.n_params, self.n_bottleneck))
        jac[self.policy.param_slice(x), :] = self.policy.jac_block(x, theta)
        return jac

    def prob_row_eta(self, x, eta, t: int = 0) -> np.ndarray:
        return np.asarray(eta, dtype=float) @ self.p[x]

    def prob_row_eta_jac(self, x, eta, t: int = 0) -> np.ndarray:
        return self.p[x].T


def _softmax_second_derivative(pi: np.ndarray) -> np.ndarray:
    """Tensor d^2 pi_a / d theta_b d theta_c for one softmax row, shape (a, b, c)."""
    n = pi.shape[0]
    eye = np.eye(n)
    t1 = np.einsum("a,ab,ac->abc", pi, eye - pi[None, :], eye - pi[None, :])
    t2 = np.einsum("a,b,bc->abc", pi, pi, eye - pi[None, :])
    return t1 - t2


class PolicyExpectedCost(CostModel):
    """Step cost sum_a pi(a|x, theta) c(x, a) for a fixed action-cost table."""

    differentiable = True
    twice_differentiable = True

    def __init__(self, policy: SoftmaxPolicy, costs):
        self.policy = policy
        self.costs = np.asarray(costs, dtype=float)
        if self.costs.shape != (policy.n_states, policy.n_actions):
            raise InvalidStructureError("cost table shape must match the policy")
        self.n_params = policy.n_params

    def value(self, x, theta, t: int = 0) -> float:
        return float(self.policy.row(x, theta) @ self.costs[x])

    def grad(self, x, theta, t: int = 0) -> np.ndarray:
        g = np.zeros(self.n_params)
        g[self.policy.param_slice(x)] = self.policy.jac_block(x, theta) @ self.costs[x]
        return g

    def hess(self, x, theta, t: int = 0) -> np.ndarray:
        h = np.zeros((self.n_params, self.n_params))
        pi = self.policy.row(x, theta)
        jac2 = _softmax_second_derivative(pi)
        sl = self.policy.param_slice(x)
        h[sl, sl] = np.einsum("abc,a->bc", jac2, self.costs[x])
        return h


class BottleneckActionCost(CostModel):
    """Same expected action cost, evaluated through the action distribution."""

    differentiable = True
    has_bottleneck = True

    def __init__(self, policy: SoftmaxPolicy, costs):
        self.policy = policy
        self.costs = np.asarray(costs, dtype=float)
        self.n_params = policy.n_params

    def value_eta(self, x, eta, t: int = 0) -> float:
        return float(np.asarray(eta, dtype=float) @ self.costs[x])

    def grad_eta(self, x, eta, t: int = 0) -> np.ndarray:
        return self.costs[x].copy()

    def value(self, x, theta, t: int = 0) -> float:
        return self.value_eta(x, self.policy.row(x, theta), t)

    def grad(self, x, theta, t: int = 0) -> np.ndarray:
        g = np.zeros(self.n_params)
        g[self.policy.param_slice(x)] = self.policy.jac_block(x, theta) @ self.grad_eta(
            x, self.policy.row(x, theta), t
        )
        return g


class PolicyKlFromOldCost(CostModel):
    """Per-state KL(pi_old(.|x) || pi(.|x, theta)); the frozen policy comes first."""

    differentiable = True
    twice_differentiable = True

    def __init__(self, policy: SoftmaxPolicy, pi_old):
        self.policy = policy
        self.pi_old = np.asarray(pi_old, dtype=float)
        if self.pi_old.shape != (policy.n_states, policy.n_actions):
            raise InvalidStructureError("frozen policy table shape must match the policy")
        if np.any(self.pi_old < 0) or np.any(np.abs(self.pi_old.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidStructureError("frozen policy rows must be distributions")
        self.n_params = policy.n_params

    def value(self, x, theta, t: int = 0) -> float:
        p_old = self.pi_old[x]
        p_new = self.policy.row(x, theta)
        mask = p_old > 0
        if np.any(p_new[mask] <= 0):
            raise DivergenceUndefinedError(
                f"policy gives zero mass where the frozen policy is positive at state {x}"
            )
        return float(np.sum(p_old[mask] * np.log(p_old[mask] / p_new[mask])))

    def grad(self, x, theta, t: int = 0) -> np.ndarray:
        g = np.zeros(self.n_params)
        g[self.policy.param_slice(x)] = self.policy.row(x, theta) - self.pi_old[x]
        return g

    def hess(self, x, theta, t: int = 0) -> np.ndarray:
        h = np.zeros((self.n_params, self.n_params))
        sl = self.policy.param_slice(x)
        h[sl, sl] = self.policy.jac_block(x, theta)
        return h


class MixedRowKlCost(CostModel):
    """State cost r(x) plus KL of the action-mixed row from a reference row.

    This is the deterministic-bottleneck form of the control cost: the
    action is the mixing distribution eta, the realized row is
    q_eta = sum_a eta_a p(.|x, a), and the cost reads r(x) + KL(q_eta || ref).
    """

    differentiable = True
    has_bottleneck = True

    def __init__(self, transitions, policy: SoftmaxPolicy, reference, state_cost):
        self.p = np.asarray(transitions, dtype=float)
        self.policy = policy
        self.reference = np.asarray(reference, dtype=float)
        self.state_cost = np.asarray(state_cost, dtype=float)
        self.n_params = policy.n_params
        n = self.p.shape[0]
        for x in range(n):
            reachable = self.p[x].max(axis=0) > 0
            if np.any(reachable & (self.reference[x] <= 0)):
                raise DivergenceUndefinedError(
                    f"reference row {x} lacks support on reachable successors"
                )

    def value_eta(self, x, eta, t: int = 0) -> float:
        q = np.asarray(eta, dtype=float) @ self.p[x]
        mask = q > 0
        kl = float(np.sum(q[mask] * np.log(q[mask] / self.reference[x][mask])))
        return float(self.state_cost[x]) + kl

    def grad_eta(self, x, eta, t: int = 0) -> np.ndarray:
        q = np.asarray(eta, dtype=float) @ self.p[x]
        mask = q > 0
        logr = np.zeros_like(q)
        logr[mask] = np.log(q[mask] / self.reference[x][mask]) + 1.0
        return self.p[x] @ logr

    def value(self, x, theta, t: int = 0) -> float:
        return self.value_eta(x, self.policy.row(x, theta), t)

    def grad(self, x, theta, t: int = 0) -> np.ndarray:
        g = np.zeros(self.n_params)
        eta = self.policy.row(x, theta)
        g[self.policy.param_slice(x)] = self.policy.jac_block(x, theta) @ self.grad_eta(x, eta, t)
        return g


# ---------------------------------------------------------------------------
# Action costs for the general mapping
# ---------------------------------------------------------------------------


class TableActionCost:
    """Parameter-free action cost backed by an (n_states, n_actions) table."""

    def __init__(self, table, n_params: int):
        self.table = np.asarray(table, dtype=float)
        self.n_params = int(n_params)

    def value(self, x, a, theta) -> float:
        return float(self.table[x, a])

    def grad(self, x, a, theta) -> np.ndarray:
        return np.zeros(self.n_params)


class GeneralPolicyCost(CostModel):
    """Step cost sum_a pi(a|x, theta) ell(x, a, theta) for parametric ell."""

    differentiable = True

    def __init__(self, policy: SoftmaxPolicy, action_cost):
        self.policy = policy
        self.action_cost = action_cost
        self.n_params = policy.n_params
        if action_cost.n_params != policy.n_params:
            raise InvalidStructureError("action cost and policy disagree on n_params")

    def value(self, x, theta, t: int = 0) -> float:
        pi = self.policy.row(x, theta)
        return float(
            sum(pi[a] * self.action_cost.value(x, a, theta) for a in range(len(pi)))
        )

    def grad(self, x, theta, t: int = 0) -> np.ndarray:
        pi = self.policy.row(x, theta)
        vals = np.array([self.action_cost.value(x, a, theta) for a in range(len(pi))])
        g = np.zeros(self.n_params)
        g[self.policy.param_slice(x)] = self.policy.jac_block(x, theta) @ vals
        for a in range(len(pi)):
            g += pi[a] * self.action_cost.grad(x, a, theta)
        return g


# ---------------------------------------------------------------------------
# Mappings to chain/cost problems
# ---------------------------------------------------------------------------


def map_general_mdp(mdp: TabularMdp, policy: SoftmaxPolicy, action_cost=None) -> Problem:
    """General mapping: policy-averaged transitions and policy-averaged cost."""
    if action_cost is None:
        action_cost = TableActionCost(mdp.costs, policy.n_params)
    chain = PolicyAveragedChain(mdp.transitions, policy)
    cost = GeneralPolicyCost(policy, action_cost)
    return Problem(chain, cost, mdp.setting, mdp.init)


def map_stochastic_mdp(mdp: TabularMdp, policy: SoftmaxPolicy) -> Problem:
    """Stochastic-policy mapping with a parameter-free action-cost table."""
    chain = PolicyAveragedChain(mdp.transitions, policy)
    cost = PolicyExpectedCost(policy, mdp.costs)
    return Problem(chain, cost, mdp.setting, mdp.init)


def map_entropy_mdp(mdp: TabularMdp, policy: SoftmaxPolicy) -> Problem:
    """Entropy-regularized mapping: expected action cost plus policy entropy."""
    chain = PolicyAveragedChain(mdp.transitions, policy)
    cost = WeightedSumCost(
        [PolicyExpectedCost(policy, mdp.costs), cost_policy_entropy(policy)]
    )
    return Problem(chain, cost, mdp.setting, mdp.init)


def map_proximal_mdp(mdp: TabularMdp, policy: SoftmaxPolicy, pi_old) -> Problem:
    """Divergence-regularized mapping: adds KL(pi_old || pi(theta)) per state."""
    chain = PolicyAveragedChain(mdp.transitions, policy)
    cost = WeightedSumCost(
        [PolicyExpectedCost(policy, mdp.costs), PolicyKlFromOldCost(policy, pi_old)]
    )
    return Problem(chain, cost, mdp.setting, mdp.init)


def map_lmdp(spec: LmdpSpec, chain: ChainModel, setting: Setting, init) -> Problem:
    """Control-cost mapping: state cost plus KL of the chain from the baseline."""
    if chain.n_states != spec.n_states:
        raise InvalidStructureError("chain and baseline disagree on the state count")
    from .model import KlToFixedChainCost

    cost = WeightedSumCost(
        [
            TableCost(spec.state_cost, n_params=chain.n_params),
            KlToFixedChainCost(chain, spec.baseline),
        ]
    )
    return Problem(chain, cost, setting, init)


# ---------------------------------------------------------------------------
# Equivalence constructions
# ---------------------------------------------------------------------------


@dataclass
class DensityActionMdp:
    """Decision process whose action is a distribution over base actions.

    Transitions and costs are functions of (state, mixing distribution);
    the deterministic policy mu(x, theta) outputs the mixing distribution.
    """

    transitions: np.ndarray  # base tensor (n_s, n_a, n_s)
    costs: object  # cost with value_eta / grad_eta
    mu: SoftmaxPolicy

    def row(self, x, eta) -> np.ndarray:
        return np.asarray(eta, dtype=float) @ self.transitions[x]

    def cost(self, x, eta) -> float:
        return self.costs.value_eta(x, eta)


def stochastic_to_deterministic(mdp: TabularMdp, policy: SoftmaxPolicy):
    """Rebuild a stochastic-policy process as a deterministic-bottleneck one.

    The new action space is the probability simplex over base actions; the
    deterministic policy outputs the old policy's action distribution, so
    the realized transitions and costs coincide entry by entry.
    """
    cost = BottleneckActionCost(policy, mdp.costs)
    dmdp = DensityActionMdp(mdp.transitions, cost, policy)
    chain = PolicyAveragedChain(mdp.transitions, policy)
    problem = Problem(chain, cost, mdp.setting, mdp.init)
    return dmdp, problem


def lmdp_deterministic_pair(
    transitions,
    policy: SoftmaxPolicy,
    reference,
    state_cost,
    setting: Setting,
    init,
):
    """Build matching control-cost and deterministic-bottleneck problems.

    Both share the chain sum_a mu_a(x, theta) p(.|x, a). The bottleneck
    problem prices the realized row through the action: its action cost is
    r(x) + KL(row(eta) || reference). The control-cost problem prices the
    chain row directly. The two cost surfaces agree identically.
    """
    from .model import KlToFixedChainCost

    chain_d = PolicyAveragedChain(transitions, policy)
    cost_d = MixedRowKlCost(transitions, policy, reference, state_cost)
    problem_d = Problem(chain_d, cost_d, setting, init)

    chain_l = PolicyAveragedChain(transitions, policy)
    cost_l = WeightedSumCost(
        [
            TableCost(state_cost, n_params=chain_l.n_params),
            KlToFixedChainCost(chain_l, reference),
        ]
    )
    problem_l = Problem(chain_l, cost_l, setting, init)
    return problem_d, problem_l


# ---------------------------------------------------------------------------
# Independent action-space policy evaluation
# ---------------------------------------------------------------------------


def mdp_policy_evaluation(transitions, costs, pi_table, setting: Setting, init=None):
    """Evaluate a fixed policy on the (state, action) product space.

    Solves for action values Q directly (a linear system over state-action
    pairs) and reduces to state values v(x) = sum_a pi(a|x) Q(x, a). This
    never forms the policy-averaged chain, so it is an independent check
    of the chain-side value solvers.

    Returns (v, j) where j is the average cost (None outside the average
    setting). Average-setting values are normalized so the stationary
    expectation of v vanishes.
    """
    p = np.asarray(transitions, dtype=float)
    ell = np.asarray(costs, dtype=float)
    pi = np.asarray(pi_table, dtype=float)
    n_s, n_a, _ = p.shape
    nsa = n_s * n_a

    def idx(x, a):
        return x * n_a + a

    T = np.zeros((nsa, nsa))
    for x in range(n_s):
        for a in range(n_a):
            for y in range(n_s):
                if p[x, a, y] == 0.0:
                    continue
                T[idx(x, a), idx(y, 0) : idx(y, 0) + n_a] += p[x, a, y] * pi[y]
    ell_flat = ell.reshape(nsa)

    if isinstance(setting, (EpisodicDiscounted, FirstExit)):
        gamma = setting.gamma
        Q = np.linalg.solve(np.eye(nsa) - gamma * T, ell_flat)
        v = np.array([pi[x] @ Q[x * n_a : (x + 1) * n_a] for x in range(n_s)])
        return v, None

    if isinstance(setting, Average):
        mu = stationary_from_matrix(T)
        j = float(mu @ ell_flat)
        Q = np.linalg.solve(np.eye(nsa) - T + np.outer(np.ones(nsa), mu), ell_flat - j)
        v = np.array([pi[x] @ Q[x * n_a : (x + 1) * n_a] for x in range(n_s)])
        return v, j

    raise CapabilityError("action-space evaluation covers stationary settings only")


def chain_as_action_mdp(problem: Problem, theta):
    """View a tabular chain as a decision process whose actions pick successors.

    Actions index next states, transitions are deterministic, the policy
    equals the chain's rows, and the action cost is the state cost. Used to
    route control-cost problems through the action-space evaluator.
    """
    chain, cost = problem.chain, problem.cost
    n = chain.n_states
    p = np.zeros((n, n, n))
    for y in range(n):
        p[:, y, y] = 1.0
    pi = chain.transition_matrix(theta)
    ell = np.tile(cost.value_table(n, theta)[:, None], (1, n))
    return p, ell, pi


# ---------------------------------------------------------------------------
# Classical gradient formulas used as oracles
# ---------------------------------------------------------------------------


def stochastic_policy_gradient(mdp: TabularMdp, policy: SoftmaxPolicy, theta) -> np.ndarray:
    """Likelihood-ratio policy gradient: visitation-weighted d pi . Q.

    State values come from the action-space evaluator, so this route shares
    no value code with the chain-side gradient it is checked against.
    """
    theta = check_params(theta, policy.n_params)
    pi = policy.table(theta)
    v, j = mdp_policy_evaluation(mdp.transitions, mdp.costs, pi, mdp.setting)
    problem = map_stochastic_mdp(mdp, policy)
    if isinstance(mdp.setting, (EpisodicDiscounted, FirstExit)):
        gamma = mdp.setting.gamma
        weights = discounted_occupancy(problem, theta)
    else:
        gamma = 1.0
        weights = stationary_density(problem, theta)
    Q = mdp.costs + gamma * np.einsum("xay,y->xa", mdp.transitions, v)
    g = np.zeros(policy.n_params)
    for x in range(mdp.n_states):
        g[policy.param_slice(x)] = weights[x] * (policy.jac_block(x, theta) @ Q[x])
    return g


def deterministic_bottleneck_gradient(
    mdp: TabularMdp, policy: SoftmaxPolicy, theta
) -> np.ndarray:
    """Deterministic policy gradient through the action-distribution bottleneck.

    Assembles visitation-weighted d mu . d_eta Q(x, eta) from the raw
    decision-process arrays. With eta the action distribution, d_eta Q at
    eta = pi(x) is exactly the vector of action values.
    """
    theta = check_params(theta, policy.n_params)
    pi = policy.table(theta)
    v, j = mdp_policy_evaluation(mdp.transitions, mdp.costs, pi, mdp.setting)
    problem = map_stochastic_mdp(mdp, policy)
    if isinstance(mdp.setting, (EpisodicDiscounted, FirstExit)):
        gamma = mdp.setting.gamma
        weights = discounted_occupancy(problem, theta)
    else:
        gamma = 1.0
        weights = stationary_density(problem, theta)
    dQ_deta = mdp.costs + gamma * np.einsum("xay,y->xa", mdp.transitions, v)
    g = np.zeros(policy.n_params)
    for x in range(mdp.n_states):
        g[policy.param_slice(x)] = weights[x] * (policy.jac_block(x, theta) @ dQ_deta[x])
    return g


def lmdp_policy_gradient(problem: Problem, spec: LmdpSpec, theta) -> np.ndarray:
    """Average-setting control-cost gradient in its specialized form.

    g = sum_x d(x) sum_y dP(y|x) [log(P(y|x)/baseline(y|x)) + v(y)], using
    the differential values of the mapped problem.
    """
    theta = check_params(theta, problem.n_params)
    if not isinstance(problem.setting, Average):
        raise CapabilityError("this specialized gradient is for the average setting")
    chain = problem.chain
    d = stationary_density(problem, theta)
    v = solve_value_average(problem, theta).values
    P = chain.transition_matrix(theta)
    S = chain.score_table(theta)
    g = np.zeros(problem.n_params)
    for x in range(chain.n_states):
        row = P[x]
        mask = row > 0
        logr = np.zeros_like(row)
        logr[mask] = np.log(row[mask] / spec.baseline[x][mask])
        g += d[x] * np.einsum("y,yp->p", row * (logr + v), S[x])
    return g
