"""Rollout generation and score-based gradient estimation.

Rollouts are sampled with one private random stream per rollout, derived
from (seed, rollout index), so a batch is bit-identical no matter how the
work is scheduled. Estimators consume whole batches and refuse parameters
that differ from the ones the batch was generated under.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .errors import (
    CapabilityError,
    InvalidStructureError,
    RegularizationRequiredError,
    StalenessError,
)
from .model import (
    Average,
    EpisodicDiscounted,
    FirstExit,
    GaussianInitial,
    Problem,
    TabularInitial,
    TimeVarying,
    check_params,
)

END_TERMINAL = "terminal"
END_HORIZON = "horizon-cap"
END_GEOMETRIC = "geometric-stop"

_MODES = ("terminal", "horizon", "geometric")


def rollout_rng(seed: int, index: int) -> np.random.Generator:
    """The private random stream of one rollout."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(index,)))


@dataclass
class Rollout:
    """One sampled trajectory with per-step costs and score vectors."""

    states: np.ndarray  # (T+1,) ints or (T+1, n_x) floats
    costs: np.ndarray  # (T+1,)
    scores: np.ndarray  # (T, n_params)
    end_reason: str
    diverged: bool = False

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1


@dataclass
class RolloutBatch:
    """Rollouts plus the exact generation context they were produced under."""

    rollouts: list
    theta: np.ndarray
    seed: int
    mode: str
    horizon_cap: int
    n_diverged: int = 0

    def __len__(self):
        return len(self.rollouts)

    def total_steps(self) -> int:
        return int(sum(r.n_steps for r in self.rollouts))

    def to_jsonl(self, path):
        """Line-delimited dump: a metadata line, then one rollout per line."""
        with open(path, "w") as fh:
            meta = {
                "theta": self.theta.tolist(),
                "seed": self.seed,
                "mode": self.mode,
                "horizon_cap": self.horizon_cap,
            }
            fh.write(json.dumps(meta) + "\n")
            for i, r in enumerate(self.rollouts):
                rec = {
                    "seed": [self.seed, i],
                    "states": np.asarray(r.states).tolist(),
                    "costs": r.costs.tolist(),
                    "end": r.end_reason,
                }
                fh.write(json.dumps(rec) + "\n")


def batch_from_jsonl(problem: Problem, path) -> RolloutBatch:
    """Reload a dumped batch, recomputing score vectors from the chain."""
    with open(path) as fh:
        meta = json.loads(fh.readline())
        theta = np.asarray(meta["theta"], dtype=float)
        tv = isinstance(problem.setting, TimeVarying)
        rollouts = []
        for line in fh:
            rec = json.loads(line)
            states = np.asarray(rec["states"])
            if states.ndim == 1 and problem.chain.tabular:
                states = states.astype(np.int64)
            costs = np.asarray(rec["costs"], dtype=float)
            T = states.shape[0] - 1
            scores = np.zeros((T, problem.n_params))
            for t in range(T):
                scores[t] = problem.chain.score(
                    states[t], states[t + 1], theta, t if tv else 0
                )
            rollouts.append(Rollout(states, costs, scores, rec["end"]))
    return RolloutBatch(
        rollouts, theta, meta["seed"], meta["mode"], meta["horizon_cap"]
    )


def _default_mode(problem: Problem) -> str:
    if isinstance(problem.setting, FirstExit):
        return "terminal"
    if isinstance(problem.setting, EpisodicDiscounted):
        return "geometric"
    return "horizon"


def generate_rollouts(
    problem: Problem,
    theta,
    n_rollouts: int,
    horizon_cap: int = 10_000,
    mode: Optional[str] = None,
    seed: int = 0,
) -> RolloutBatch:
    """Sample independent rollouts of the problem's chain.

    Modes: "terminal" runs until an absorbing terminal state (the cap is a
    guard), "horizon" runs to the cap, and "geometric" additionally stops
    each step with probability 1 - gamma, realizing the discounted
    visitation weights through trajectory lengths. Time-varying problems
    always run exactly their horizon.
    """
    theta = check_params(theta, problem.n_params)
    chain = problem.chain
    if not chain.samplable:
        raise CapabilityError("rollout generation needs a samplable chain")
    if isinstance(problem.setting, Average):
        raise CapabilityError("rollout estimation covers episodic and finite-horizon settings")
    tv = isinstance(problem.setting, TimeVarying)
    if tv:
        horizon_cap = problem.setting.horizon
        mode = "horizon"
    if mode is None:
        mode = _default_mode(problem)
    if mode not in _MODES:
        raise InvalidStructureError(f"unknown termination mode {mode!r}")
    if mode == "terminal" and len(chain.terminal) == 0:
        raise InvalidStructureError("terminal mode needs a chain with terminal states")
    if n_rollouts < 1 or horizon_cap < 1:
        raise InvalidStructureError("need at least one rollout and one step")
    gamma = problem.gamma
    stop_prob = 1.0 - gamma

    n_stages = horizon_cap if tv else 1
    samplers = [chain.make_sampler(theta, t) for t in range(n_stages)]
    tabular = chain.tabular
    if tabular:
        n = chain.n_states
        cost_tables = [
            problem.cost.value_table(n, theta, t) for t in range(n_stages + (1 if tv else 0))
        ]
        score_tables = [chain.score_table(theta, t) for t in range(n_stages)]
    terminal = chain.terminal if (mode != "horizon" or not tv) else frozenset()
    stop_at_terminal = not tv

    rollouts = []
    n_diverged = 0
    for i in range(n_rollouts):
        rng = rollout_rng(seed, i)
        x = problem.init.sample(rng)
        states = [x]
        diverged = False
        t = 0
        reason = END_HORIZON
        while True:
            if tabular and stop_at_terminal and states[-1] in terminal:
                reason = END_TERMINAL
                break
            if t >= horizon_cap:
                reason = END_HORIZON
                break
            if mode == "geometric" and rng.random() < stop_prob:
                reason = END_GEOMETRIC
                break
            stage = min(t, n_stages - 1)
            x_next = samplers[stage](states[-1], rng)
            if not tabular and not np.all(np.isfinite(x_next)):
                diverged = True
                reason = END_HORIZON
                break
            states.append(x_next)
            t += 1
        T = len(states) - 1
        if tabular:
            st = np.asarray(states, dtype=np.int64)
            costs = np.array(
                [cost_tables[min(k, len(cost_tables) - 1)][st[k]] for k in range(T + 1)]
            )
            scores = np.zeros((T, problem.n_params))
            for k in range(T):
                scores[k] = score_tables[min(k, n_stages - 1)][st[k], st[k + 1]]
        else:
            st = np.asarray(states, dtype=float)
            costs = np.array(
                [problem.cost.value(states[k], theta, k if tv else 0) for k in range(T + 1)]
            )
            scores = np.zeros((T, problem.n_params))
            for k in range(T):
                scores[k] = chain.score(states[k], states[k + 1], theta, k if tv else 0)
        if diverged:
            n_diverged += 1
        rollouts.append(Rollout(st, costs, scores, reason, diverged))
    return RolloutBatch(rollouts, theta, seed, mode, horizon_cap, n_diverged)


def effective_gamma(problem: Problem, batch: RolloutBatch) -> float:
    """Discount applied inside estimators: 1 when stopping realizes it."""
    if batch.mode == "geometric":
        return 1.0
    return problem.gamma


def discounted_returns(costs: np.ndarray, gamma: float) -> np.ndarray:
    """Cost-to-go R_t = sum_{k>=t} gamma^{k-t} L_k via a linear filter."""
    return lfilter([1.0], [1.0, -gamma], costs[::-1])[::-1]


def check_batch(theta, batch: RolloutBatch):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != batch.theta.shape or not np.array_equal(theta, batch.theta):
        raise StalenessError("batch was generated under different parameters")


# ---------------------------------------------------------------------------
# Value-function fitting
# ---------------------------------------------------------------------------


class FeatureMap:
    """State features phi(x) used by fitted value baselines."""

    def __init__(self, dim: int, fn):
        self.dim = int(dim)
        self._fn = fn

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self._fn(x), dtype=float)

    @staticmethod
    def tabular(n_states: int) -> "FeatureMap":
        eye = np.eye(n_states)
        return FeatureMap(n_states, lambda x: eye[int(x)])

    @staticmethod
    def constant() -> "FeatureMap":
        return FeatureMap(1, lambda x: np.ones(1))


@dataclass
class ValueApprox:
    """Linear value model omega . phi(x)."""

    features: FeatureMap
    weights: np.ndarray

    def predict(self, x) -> float:
        return float(self.features(x) @ self.weights)

    def table(self, n_states: int) -> np.ndarray:
        return np.array([self.predict(x) for x in range(n_states)])


def fit_value_approx(
    problem: Problem, batch: RolloutBatch, features: FeatureMap, ridge: float = 0.0
) -> ValueApprox:
    """Discount-weighted ridge regression of per-step cost-to-go onto features.

    Minimizes sum over rollouts and steps of gamma^t (omega.phi(x_t) - R_t)^2
    plus ridge ||omega||^2, by the normal equations. Rank deficiency with no
    ridge raises rather than silently pseudo-inverting.
    """
    gamma = effective_gamma(problem, batch)
    k = features.dim
    A = np.zeros((k, k))
    b = np.zeros(k)
    for r in batch.rollouts:
        if r.diverged:
            continue
        R = discounted_returns(r.costs, gamma)
        w = gamma ** np.arange(r.costs.shape[0])
        for t in range(r.costs.shape[0]):
            phi = features(r.states[t])
            A += w[t] * np.outer(phi, phi)
            b += w[t] * phi * R[t]
    A += ridge * np.eye(k)
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        if ridge <= 0.0:
            raise RegularizationRequiredError(
                "normal matrix is rank deficient; supply a positive ridge"
            )
        raise
    omega = np.linalg.solve(chol.T, np.linalg.solve(chol, b))
    return ValueApprox(features, omega)


# ---------------------------------------------------------------------------
# Gradient estimation
# ---------------------------------------------------------------------------


@dataclass
class GradientEstimate:
    """Batch-mean gradient with per-coordinate standard errors."""

    mean: np.ndarray
    stderr: np.ndarray
    n_rollouts: int
    n_diverged: int
    valid: bool
    diagnostics: dict = field(default_factory=dict)


def baseline_expected_values(problem: Problem, theta, approx: ValueApprox):
    """Per-stage tables b(x) = E[V^(x') | x] for tabular chains."""
    chain = problem.chain
    tv = isinstance(problem.setting, TimeVarying)
    n_stages = problem.setting.horizon if tv else 1
    tables = []
    vhat = approx.table(chain.n_states)
    for t in range(n_stages):
        P = chain.transition_matrix(theta, t)
        tables.append(P @ vhat)
    return tables


def estimate_gradient(
    problem: Problem,
    theta,
    batch: RolloutBatch,
    baseline: Optional[ValueApprox] = None,
) -> GradientEstimate:
    """Score-times-cost-to-go gradient estimate from one batch.

    Per rollout the contribution is
        sum_t gamma^t dL(x_t) + sum_{t<T} gamma^{t+1} score_t (R_{t+1} - b(x_t)),
    where b subtracts the predicted one-step-ahead value when a baseline is
    supplied. The estimate is unbiased for the exact gradient; the baseline
    only reduces variance.
    """
    theta = check_params(theta, problem.n_params)
    check_batch(theta, batch)
    chain, cost = problem.chain, problem.cost
    gamma = effective_gamma(problem, batch)
    tv = isinstance(problem.setting, TimeVarying)
    n_stages = batch.horizon_cap if tv else 1

    tabular = chain.tabular
    if tabular:
        n = chain.n_states
        gradL_tables = [
            cost.grad_table(n, theta, t) for t in range(n_stages + (1 if tv else 0))
        ]
        if baseline is not None:
            b_tables = baseline_expected_values(problem, theta, baseline)

    contributions = np.zeros((len(batch.rollouts), problem.n_params))
    lengths = []
    returns0 = []
    n_valid = 0
    for i, r in enumerate(batch.rollouts):
        if r.diverged:
            continue
        T = r.n_steps
        R = discounted_returns(r.costs, gamma)
        gpow = gamma ** np.arange(T + 1)
        if tabular:
            if tv:
                gL = np.stack(
                    [gradL_tables[min(t, len(gradL_tables) - 1)][r.states[t]] for t in range(T + 1)]
                )
            else:
                gL = gradL_tables[0][r.states]
        else:
            gL = np.stack(
                [cost.grad(r.states[t], theta, t if tv else 0) for t in range(T + 1)]
            )
        g = gpow @ gL
        if T > 0:
            if baseline is None:
                adv = R[1:]
            else:
                if tabular:
                    b = np.array(
                        [b_tables[min(t, n_stages - 1)][r.states[t]] for t in range(T)]
                    )
                else:
                    b = np.array(
                        [
                            baseline.predict(chain.mean(r.states[t], theta, t if tv else 0))
                            for t in range(T)
                        ]
                    )
                adv = R[1:] - b
            g = g + (gamma * gpow[:T] * adv) @ r.scores
        contributions[i] = g
        lengths.append(T)
        returns0.append(R[0])
        n_valid += 1

    if n_valid == 0:
        raise InvalidStructureError("no valid rollouts in the batch")
    valid_mask = np.array([not r.diverged for r in batch.rollouts])
    kept = contributions[valid_mask]
    mean = kept.mean(axis=0)
    if n_valid > 1:
        stderr = kept.std(axis=0, ddof=1) / math.sqrt(n_valid)
    else:
        stderr = np.full(problem.n_params, np.inf)
    frac_diverged = batch.n_diverged / len(batch.rollouts)
    return GradientEstimate(
        mean=mean,
        stderr=stderr,
        n_rollouts=n_valid,
        n_diverged=batch.n_diverged,
        valid=frac_diverged <= 0.01,
        diagnostics={
            "mean_return": float(np.mean(returns0)),
            "mean_length": float(np.mean(lengths)),
            "per_rollout": kept,
        },
    )


# ---------------------------------------------------------------------------
# Whole-path derivatives for finite-horizon problems
# ---------------------------------------------------------------------------


@dataclass
class HessianEstimate:
    """Batch-mean Hessian with per-entry standard errors."""

    mean: np.ndarray
    stderr: np.ndarray
    n_rollouts: int


def _require_timevarying(problem: Problem):
    if not isinstance(problem.setting, TimeVarying):
        raise CapabilityError("path derivatives are defined for finite-horizon problems")


def path_gradient(problem: Problem, theta, batch: RolloutBatch) -> GradientEstimate:
    """Whole-path gradient estimate: (sum of scores) L_path + grad L_path."""
    theta = check_params(theta, problem.n_params)
    check_batch(theta, batch)
    _require_timevarying(problem)
    cost = problem.cost
    T = problem.setting.horizon
    n = problem.chain.n_states if problem.chain.tabular else None
    gradL_tables = (
        [cost.grad_table(n, theta, t) for t in range(T + 1)] if n is not None else None
    )
    out = np.zeros((len(batch.rollouts), problem.n_params))
    for i, r in enumerate(batch.rollouts):
        if r.n_steps != T:
            raise InvalidStructureError("path derivatives need full-horizon rollouts")
        total_cost = float(r.costs.sum())
        score_sum = r.scores.sum(axis=0)
        if gradL_tables is not None:
            gL = np.stack([gradL_tables[t][r.states[t]] for t in range(T + 1)]).sum(axis=0)
        else:
            gL = np.stack(
                [cost.grad(r.states[t], theta, t) for t in range(T + 1)]
            ).sum(axis=0)
        out[i] = score_sum * total_cost + gL
    mean = out.mean(axis=0)
    stderr = out.std(axis=0, ddof=1) / math.sqrt(len(batch.rollouts))
    return GradientEstimate(
        mean=mean,
        stderr=stderr,
        n_rollouts=len(batch.rollouts),
        n_diverged=batch.n_diverged,
        valid=True,
        diagnostics={"per_rollout": out},
    )


def path_hessian(problem: Problem, theta, batch: RolloutBatch) -> HessianEstimate:
    """Whole-path Hessian estimate for finite-horizon problems.

    Per path, with K the log-likelihood and L the accumulated cost:
        (dK dK' + d2K) L + dK dL' + dL dK' + d2L.
    Requires second derivatives of both the chain's log rows and the cost.
    The batch mean is symmetrized before it is returned.
    """
    theta = check_params(theta, problem.n_params)
    check_batch(theta, batch)
    _require_timevarying(problem)
    chain, cost = problem.chain, problem.cost
    if not chain.twice_differentiable or not cost.twice_differentiable:
        raise CapabilityError("path Hessian needs twice-differentiable chain and cost")
    T = problem.setting.horizon
    p = problem.n_params
    hess_cache = {}

    def chain_hess(t, x, y):
        key = (t, int(x), int(y)) if chain.tabular else None
        if key is not None and key in hess_cache:
            return hess_cache[key]
        h = chain.log_prob_hess(x, y, theta, t)
        if key is not None:
            hess_cache[key] = h
        return h

    out = np.zeros((len(batch.rollouts), p, p))
    for i, r in enumerate(batch.rollouts):
        if r.n_steps != T:
            raise InvalidStructureError("path derivatives need full-horizon rollouts")
        total_cost = float(r.costs.sum())
        dK = r.scores.sum(axis=0)
        d2K = np.zeros((p, p))
        for t in range(T):
            d2K += chain_hess(t, r.states[t], r.states[t + 1])
        dL = np.zeros(p)
        d2L = np.zeros((p, p))
        for t in range(T + 1):
            dL += cost.grad(r.states[t], theta, t)
            d2L += cost.hess(r.states[t], theta, t)
        H = (np.outer(dK, dK) + d2K) * total_cost
        H += np.outer(dK, dL) + np.outer(dL, dK) + d2L
        out[i] = H
    mean = out.mean(axis=0)
    mean = 0.5 * (mean + mean.T)
    stderr = out.std(axis=0, ddof=1) / math.sqrt(len(batch.rollouts))
    return HessianEstimate(mean=mean, stderr=stderr, n_rollouts=len(batch.rollouts))
