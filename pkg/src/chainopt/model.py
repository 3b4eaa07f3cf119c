"""Core problem primitives.

A problem couples a parameterized Markov chain with a parameterized step
cost. Both read the same flat parameter vector, so a single gradient step
can reshape the dynamics and the cost landscape at once. Settings select
how step costs accumulate: discounted, first-exit, long-run average, or
finite horizon with time-varying stages.
"""

from __future__ import annotations

import abc
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .errors import (
    CapabilityError,
    DivergenceUndefinedError,
    InvalidStructureError,
)

Array = np.ndarray


def check_params(theta, n_params: int) -> Array:
    """Validate theta and return it as a float64 vector of length ``n_params``."""
    th = np.asarray(theta, dtype=float)
    if th.shape != (n_params,):
        raise InvalidStructureError(
            f"parameter vector has shape {th.shape}, expected ({n_params},)"
        )
    if not np.all(np.isfinite(th)):
        raise InvalidStructureError("parameter vector contains non-finite entries")
    return th


# ---------------------------------------------------------------------------
# Settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpisodicDiscounted:
    """Infinite-horizon accumulation with discount factor below 1.

    gamma = 0 is allowed as the degenerate one-step objective.
    """

    gamma: float

    def __post_init__(self):
        if not (0.0 <= self.gamma < 1.0):
            raise InvalidStructureError(f"discount must lie in [0, 1), got {self.gamma}")


@dataclass(frozen=True)
class FirstExit:
    """Undiscounted accumulation until an absorbing zero-cost terminal state."""

    @property
    def gamma(self) -> float:
        return 1.0


@dataclass(frozen=True)
class Average:
    """Long-run average cost per step of an ergodic chain."""

    @property
    def gamma(self) -> float:
        return 1.0


@dataclass(frozen=True)
class TimeVarying:
    """Finite horizon: costs at stages 0..horizon, transitions at 0..horizon-1."""

    horizon: int

    def __post_init__(self):
        if self.horizon < 1:
            raise InvalidStructureError(f"horizon must be >= 1, got {self.horizon}")

    @property
    def gamma(self) -> float:
        return 1.0


Setting = Union[EpisodicDiscounted, FirstExit, Average, TimeVarying]


# ---------------------------------------------------------------------------
# Initial distributions
# ---------------------------------------------------------------------------


class TabularInitial:
    """Initial distribution over a finite state set."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise InvalidStructureError("initial weights must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidStructureError("initial weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InvalidStructureError(f"initial weights sum to {w.sum()}, expected 1")
        self.weights = w / w.sum()
        self._cum = np.cumsum(self.weights)

    def sample(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(self._cum, rng.random(), side="right"))


class GaussianInitial:
    """Gaussian initial distribution for continuous-state chains."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise InvalidStructureError("covariance shape does not match mean")
        if not np.allclose(self.cov, self.cov.T):
            raise InvalidStructureError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidStructureError("covariance must be positive definite") from exc

    def sample(self, rng: np.random.Generator) -> Array:
        return self.mean + self._chol @ rng.standard_normal(self.mean.shape[0])


InitialDistribution = Union[TabularInitial, GaussianInitial]


# ---------------------------------------------------------------------------
# Chain interface
# ---------------------------------------------------------------------------


class ChainModel(abc.ABC):
    """Parameterized transition model P(x'|x, theta).

    Capability flags describe what a concrete chain supports; callers must
    check them before invoking the corresponding methods. Tabular chains
    index states by integers 0..n_states-1 and may carry a set of absorbing
    terminal states whose rows are parameter-free self loops.
    """

    n_params: int = 0
    n_states: Optional[int] = None
    terminal: frozenset = frozenset()

    tabular: bool = False
    samplable: bool = False
    differentiable: bool = False
    twice_differentiable: bool = False
    time_varying: bool = False
    has_bottleneck: bool = False

    # --- tabular access -------------------------------------------------

    def prob_row(self, x: int, theta: Array, t: int = 0) -> Array:
        raise CapabilityError(f"{type(self).__name__} has no tabular rows")

    def prob(self, x, x_next, theta, t: int = 0) -> float:
        row = self.prob_row(x, theta, t)
        return float(row[x_next])

    def successors(self, x: int) -> Sequence[int]:
        raise CapabilityError(f"{type(self).__name__} has no successor lists")

    def transition_matrix(self, theta: Array, t: int = 0) -> Array:
        """Dense (n_states, n_states) transition matrix."""
        if not self.tabular:
            raise CapabilityError(f"{type(self).__name__} is not tabular")
        return np.stack([self.prob_row(x, theta, t) for x in range(self.n_states)])

    # --- differentiation -------------------------------------------------

    def score(self, x, x_next, theta, t: int = 0) -> Array:
        """Gradient of log P(x_next | x, theta) with respect to theta."""
        raise CapabilityError(f"{type(self).__name__} is not differentiable")

    def log_prob(self, x, x_next, theta, t: int = 0) -> float:
        p = self.prob(x, x_next, theta, t)
        if p <= 0.0:
            return -math.inf
        return math.log(p)

    def log_prob_hess(self, x, x_next, theta, t: int = 0) -> Array:
        """Hessian of log P(x_next | x, theta) with respect to theta."""
        raise CapabilityError(f"{type(self).__name__} has no second derivatives")

    def score_table(self, theta: Array, t: int = 0) -> Array:
        """Dense (n, n, n_params) table of score vectors, zero off support."""
        if not self.tabular:
            raise CapabilityError(f"{type(self).__name__} is not tabular")
        n = self.n_states
        out = np.zeros((n, n, self.n_params))
        for x in range(n):
            for y in self.successors(x):
                out[x, y] = self.score(x, y, theta, t)
        return out

    # --- sampling ---------------------------------------------------------

    def sample(self, x, theta, rng: np.random.Generator, t: int = 0):
        raise CapabilityError(f"{type(self).__name__} is not samplable")

    def make_sampler(self, theta: Array, t: int = 0):
        """Return a callable (x, rng) -> x_next with tables precomputed."""
        return lambda x, rng: self.sample(x, theta, rng, t)

    # --- bottleneck (low-dimensional policy output) -----------------------

    n_bottleneck: int = 0

    def bottleneck(self, x, theta, t: int = 0) -> Array:
        raise CapabilityError(f"{type(self).__name__} has no bottleneck")

    def bottleneck_jac(self, x, theta, t: int = 0) -> Array:
        """Jacobian d eta / d theta, shape (n_params, n_bottleneck)."""
        raise CapabilityError(f"{type(self).__name__} has no bottleneck")

    def prob_row_eta(self, x, eta, t: int = 0) -> Array:
        raise CapabilityError(f"{type(self).__name__} has no bottleneck rows")

    def prob_row_eta_jac(self, x, eta, t: int = 0) -> Array:
        """Jacobian d P(.|x, eta) / d eta, shape (n_states, n_bottleneck)."""
        raise CapabilityError(f"{type(self).__name__} has no bottleneck rows")


# ---------------------------------------------------------------------------
# Cost interface
# ---------------------------------------------------------------------------


class CostModel(abc.ABC):
    """Parameterized step cost L(x, theta)."""

    n_params: int = 0
    differentiable: bool = True
    twice_differentiable: bool = False
    time_varying: bool = False
    has_bottleneck: bool = False

    @abc.abstractmethod
    def value(self, x, theta, t: int = 0) -> float:
        ...

    def grad(self, x, theta, t: int = 0) -> Array:
        raise CapabilityError(f"{type(self).__name__} is not differentiable")

    def hess(self, x, theta, t: int = 0) -> Array:
        raise CapabilityError(f"{type(self).__name__} has no second derivatives")

    def value_eta(self, x, eta, t: int = 0) -> float:
        raise CapabilityError(f"{type(self).__name__} has no bottleneck form")

    def grad_eta(self, x, eta, t: int = 0) -> Array:
        raise CapabilityError(f"{type(self).__name__} has no bottleneck form")

    def value_table(self, n_states: int, theta: Array, t: int = 0) -> Array:
        return np.array([self.value(x, theta, t) for x in range(n_states)])

    def grad_table(self, n_states: int, theta: Array, t: int = 0) -> Array:
        return np.stack([self.grad(x, theta, t) for x in range(n_states)])


# ---------------------------------------------------------------------------
# Concrete chains
# ---------------------------------------------------------------------------


def _softmax(logits: Array) -> Array:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


class SoftmaxChain(ChainModel):
    """Tabular chain with one softmax logit per allowed transition.

    Each non-terminal state owns a contiguous block of parameters, one per
    successor; its row is the softmax of that block. Terminal states are
    absorbing self loops that consume no parameters. An optional fixed
    logit offset lets several instances share parameters while realizing
    different stage dynamics.
    """

    tabular = True
    samplable = True
    differentiable = True
    twice_differentiable = True

    def __init__(self, n_states, support, terminal=(), logit_offset=None):
        self.n_states = int(n_states)
        self.terminal = frozenset(int(s) for s in terminal)
        for s in self.terminal:
            if not (0 <= s < self.n_states):
                raise InvalidStructureError(f"terminal state {s} out of range")
        self._succ = {}
        slices = {}
        start = 0
        for x in range(self.n_states):
            if x in self.terminal:
                continue
            if x not in support:
                raise InvalidStructureError(f"non-terminal state {x} has no successors")
            succ = [int(y) for y in support[x]]
            if len(succ) == 0:
                raise InvalidStructureError(f"non-terminal state {x} has no successors")
            if len(set(succ)) != len(succ):
                raise InvalidStructureError(f"state {x} lists a successor twice")
            for y in succ:
                if not (0 <= y < self.n_states):
                    raise InvalidStructureError(f"successor {y} of state {x} out of range")
            self._succ[x] = np.array(succ, dtype=np.int64)
            slices[x] = slice(start, start + len(succ))
            start += len(succ)
        extra = set(support) - set(self._succ)
        if extra & self.terminal:
            raise InvalidStructureError("terminal states must not list successors")
        self._slices = slices
        self.n_params = start
        if logit_offset is None:
            self._offset = np.zeros(self.n_params)
        else:
            self._offset = np.asarray(logit_offset, dtype=float)
            if self._offset.shape != (self.n_params,):
                raise InvalidStructureError("logit offset length must match n_params")

    def param_slice(self, x: int) -> slice:
        return self._slices[x]

    def successors(self, x: int):
        if x in self.terminal:
            return [x]
        return list(self._succ[x])

    def _row_probs(self, x: int, theta: Array) -> Array:
        sl = self._slices[x]
        return _softmax(theta[sl] + self._offset[sl])

    def prob_row(self, x, theta, t: int = 0) -> Array:
        row = np.zeros(self.n_states)
        if x in self.terminal:
            row[x] = 1.0
            return row
        row[self._succ[x]] = self._row_probs(x, theta)
        return row

    def score(self, x, x_next, theta, t: int = 0) -> Array:
        g = np.zeros(self.n_params)
        if x in self.terminal:
            return g
        succ = self._succ[x]
        hits = np.nonzero(succ == x_next)[0]
        if hits.size == 0:
            raise InvalidStructureError(f"transition {x}->{x_next} is outside the support")
        p = self._row_probs(x, theta)
        sl = self._slices[x]
        g[sl] = -p
        g[sl.start + hits[0]] += 1.0
        return g

    def log_prob_hess(self, x, x_next, theta, t: int = 0) -> Array:
        h = np.zeros((self.n_params, self.n_params))
        if x in self.terminal:
            return h
        p = self._row_probs(x, theta)
        sl = self._slices[x]
        h[sl, sl] = np.outer(p, p) - np.diag(p)
        return h

    def prob_row_jac(self, x, theta, t: int = 0) -> Array:
        """Direct (n_states, n_params) Jacobian of the row, not via the score."""
        jac = np.zeros((self.n_states, self.n_params))
        if x in self.terminal:
            return jac
        p = self._row_probs(x, theta)
        sl = self._slices[x]
        block = np.diag(p) - np.outer(p, p)
        jac[self._succ[x], sl] = block
        return jac

    def sample(self, x, theta, rng, t: int = 0):
        if x in self.terminal:
            return x
        p = self._row_probs(x, theta)
        idx = np.searchsorted(np.cumsum(p), rng.random(), side="right")
        return int(self._succ[x][min(idx, len(p) - 1)])

    def make_sampler(self, theta, t: int = 0):
        cums = {x: np.cumsum(self._row_probs(x, theta)) for x in self._succ}
        succ = self._succ
        terminal = self.terminal

        def step(x, rng):
            if x in terminal:
                return x
            c = cums[x]
            idx = np.searchsorted(c, rng.random(), side="right")
            return int(succ[x][min(idx, len(c) - 1)])

        return step


def make_softmax_chain(n_states, support, terminal=()) -> SoftmaxChain:
    """Build a softmax chain from a successor map {state: [successors]}."""
    return SoftmaxChain(n_states, support, terminal)


class FixedTabularChain(ChainModel):
    """Parameter-free tabular chain wrapping a fixed row-stochastic matrix."""

    tabular = True
    samplable = True
    differentiable = True
    twice_differentiable = True

    def __init__(self, matrix, terminal=(), n_params=0):
        P = np.asarray(matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise InvalidStructureError("transition matrix must be square")
        if np.any(P < -1e-12) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise InvalidStructureError("transition matrix rows must be distributions")
        self._P = np.clip(P, 0.0, None)
        self._P /= self._P.sum(axis=1, keepdims=True)
        self.n_states = P.shape[0]
        self.terminal = frozenset(int(s) for s in terminal)
        self.n_params = int(n_params)
        self._cum = np.cumsum(self._P, axis=1)

    def prob_row(self, x, theta, t: int = 0) -> Array:
        return self._P[x].copy()

    def successors(self, x):
        return list(np.nonzero(self._P[x] > 0)[0])

    def score(self, x, x_next, theta, t: int = 0) -> Array:
        return np.zeros(self.n_params)

    def log_prob_hess(self, x, x_next, theta, t: int = 0) -> Array:
        return np.zeros((self.n_params, self.n_params))

    def sample(self, x, theta, rng, t: int = 0):
        idx = np.searchsorted(self._cum[x], rng.random(), side="right")
        return int(min(idx, self.n_states - 1))

    def make_sampler(self, theta, t: int = 0):
        cum = self._cum
        n = self.n_states

        def step(x, rng):
            idx = np.searchsorted(cum[x], rng.random(), side="right")
            return int(min(idx, n - 1))

        return step


class GaussianLinearChain(ChainModel):
    """Continuous-state chain x' ~ Normal(A x + B mu(x, theta), cov).

    The policy output mu(x, theta) = K x + k is the bottleneck. Parameter
    packing is either "affine" (theta holds K row-major then k) or "offset"
    (theta holds k only, with K fixed).
    """

    samplable = True
    differentiable = True
    twice_differentiable = True
    has_bottleneck = True

    def __init__(self, A, B, cov, packing="offset", K_fixed=None):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.n_x = self.A.shape[0]
        self.n_u = self.B.shape[1]
        if self.A.shape != (self.n_x, self.n_x) or self.B.shape[0] != self.n_x:
            raise InvalidStructureError("A must be square and B conformable")
        if self.cov.shape != (self.n_x, self.n_x) or not np.allclose(self.cov, self.cov.T):
            raise InvalidStructureError("noise covariance must be square symmetric")
        try:
            self._chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as exc:
            raise InvalidStructureError("noise covariance must be positive definite") from exc
        self._prec = np.linalg.inv(self.cov)
        if packing not in ("offset", "affine"):
            raise InvalidStructureError(f"unknown packing {packing!r}")
        self.packing = packing
        if K_fixed is None:
            K_fixed = np.zeros((self.n_u, self.n_x))
        self.K_fixed = np.asarray(K_fixed, dtype=float)
        self.n_bottleneck = self.n_u
        self.n_params = self.n_u if packing == "offset" else self.n_u * (self.n_x + 1)

    def _gain_offset(self, theta: Array):
        if self.packing == "offset":
            return self.K_fixed, theta
        K = theta[: self.n_u * self.n_x].reshape(self.n_u, self.n_x)
        return K, theta[self.n_u * self.n_x :]

    def bottleneck(self, x, theta, t: int = 0) -> Array:
        K, k = self._gain_offset(np.asarray(theta, dtype=float))
        return K @ np.asarray(x, dtype=float) + k

    def bottleneck_jac(self, x, theta, t: int = 0) -> Array:
        jac = np.zeros((self.n_params, self.n_u))
        if self.packing == "offset":
            jac[:, :] = np.eye(self.n_u)
            return jac
        xv = np.asarray(x, dtype=float)
        for i in range(self.n_u):
            jac[i * self.n_x : (i + 1) * self.n_x, i] = xv
        jac[self.n_u * self.n_x :, :] = np.eye(self.n_u)
        return jac

    def mean(self, x, theta, t: int = 0) -> Array:
        return self.A @ np.asarray(x, dtype=float) + self.B @ self.bottleneck(x, theta, t)

    def score(self, x, x_next, theta, t: int = 0) -> Array:
        resid = np.asarray(x_next, dtype=float) - self.mean(x, theta, t)
        jm = self.B @ self.bottleneck_jac(x, theta, t).T
        return jm.T @ (self._prec @ resid)

    def log_prob(self, x, x_next, theta, t: int = 0) -> float:
        resid = np.asarray(x_next, dtype=float) - self.mean(x, theta, t)
        quad = resid @ self._prec @ resid
        _, logdet = np.linalg.slogdet(self.cov)
        return -0.5 * (quad + logdet + self.n_x * math.log(2.0 * math.pi))

    def log_prob_hess(self, x, x_next, theta, t: int = 0) -> Array:
        jm = self.B @ self.bottleneck_jac(x, theta, t).T
        return -(jm.T @ self._prec @ jm)

    def eta_fisher(self) -> Array:
        """Per-transition information of the bottleneck output, B' cov^-1 B."""
        return self.B.T @ self._prec @ self.B

    def sample(self, x, theta, rng, t: int = 0):
        return self.mean(x, theta, t) + self._chol @ rng.standard_normal(self.n_x)

    def make_sampler(self, theta, t: int = 0):
        K, k = self._gain_offset(np.asarray(theta, dtype=float))
        M = self.A + self.B @ K
        off = self.B @ k
        chol = self._chol
        n = self.n_x

        def step(x, rng):
            return M @ x + off + chol @ rng.standard_normal(n)

        return step


class TimeVaryingChain(ChainModel):
    """Stage-indexed chain dispatching to one sub-chain per stage.

    All stages read the same parameter vector; queries beyond the last
    stage reuse the final sub-chain.
    """

    time_varying = True

    def __init__(self, stages: Sequence[ChainModel]):
        if len(stages) == 0:
            raise InvalidStructureError("need at least one stage chain")
        n_params = stages[0].n_params
        n_states = stages[0].n_states
        terminal = stages[0].terminal
        for c in stages:
            if c.n_params != n_params or c.n_states != n_states:
                raise InvalidStructureError("stage chains must agree on sizes")
            if c.terminal != terminal:
                raise InvalidStructureError("stage chains must agree on terminal states")
        self.stages = list(stages)
        self.n_params = n_params
        self.n_states = n_states
        self.terminal = terminal
        self.tabular = all(c.tabular for c in stages)
        self.samplable = all(c.samplable for c in stages)
        self.differentiable = all(c.differentiable for c in stages)
        self.twice_differentiable = all(c.twice_differentiable for c in stages)

    def _at(self, t: int) -> ChainModel:
        return self.stages[min(t, len(self.stages) - 1)]

    def prob_row(self, x, theta, t: int = 0):
        return self._at(t).prob_row(x, theta)

    def successors(self, x):
        merged = []
        for c in self.stages:
            for y in c.successors(x):
                if y not in merged:
                    merged.append(y)
        return merged

    def score(self, x, x_next, theta, t: int = 0):
        return self._at(t).score(x, x_next, theta)

    def log_prob_hess(self, x, x_next, theta, t: int = 0):
        return self._at(t).log_prob_hess(x, x_next, theta)

    def score_table(self, theta, t: int = 0):
        return self._at(t).score_table(theta)

    def transition_matrix(self, theta, t: int = 0):
        return self._at(t).transition_matrix(theta)

    def sample(self, x, theta, rng, t: int = 0):
        return self._at(t).sample(x, theta, rng)

    def make_sampler(self, theta, t: int = 0):
        return self._at(t).make_sampler(theta)


# ---------------------------------------------------------------------------
# Concrete costs
# ---------------------------------------------------------------------------


class TableCost(CostModel):
    """Parameter-free per-state cost table."""

    differentiable = True
    twice_differentiable = True
    has_bottleneck = True

    def __init__(self, values, n_params=0):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 1:
            raise InvalidStructureError("cost table must be a vector")
        if not np.all(np.isfinite(self.values)):
            raise InvalidStructureError("cost table must be finite")
        self.n_params = int(n_params)

    def value(self, x, theta, t: int = 0) -> float:
        return float(self.values[x])

    def grad(self, x, theta, t: int = 0) -> Array:
        return np.zeros(self.n_params)

    def hess(self, x, theta, t: int = 0) -> Array:
        return np.zeros((self.n_params, self.n_params))

    def value_eta(self, x, eta, t: int = 0) -> float:
        return float(self.values[x])

    def grad_eta(self, x, eta, t: int = 0) -> Array:
        return np.zeros(np.asarray(eta).shape)

    def value_table(self, n_states, theta, t: int = 0) -> Array:
        return self.values.copy()


class QuadraticCost(CostModel):
    """Per-state quadratic cost c[x] + b[x].theta + 0.5 w[x] theta'Q theta."""

    differentiable = True
    twice_differentiable = True

    def __init__(self, const, lin, quad, quad_weights=None):
        self.const = np.asarray(const, dtype=float)
        self.lin = np.asarray(lin, dtype=float)
        self.quad = np.asarray(quad, dtype=float)
        n = self.const.shape[0]
        self.n_params = self.lin.shape[1]
        if self.lin.shape != (n, self.n_params):
            raise InvalidStructureError("linear term shape mismatch")
        if self.quad.shape != (self.n_params, self.n_params):
            raise InvalidStructureError("quadratic term shape mismatch")
        if not np.allclose(self.quad, self.quad.T):
            raise InvalidStructureError("quadratic term must be symmetric")
        if quad_weights is None:
            quad_weights = np.ones(n)
        self.quad_weights = np.asarray(quad_weights, dtype=float)

    def value(self, x, theta, t: int = 0) -> float:
        th = np.asarray(theta, dtype=float)
        return float(
            self.const[x]
            + self.lin[x] @ th
            + 0.5 * self.quad_weights[x] * (th @ self.quad @ th)
        )

    def grad(self, x, theta, t: int = 0) -> Array:
        th = np.asarray(theta, dtype=float)
        return self.lin[x] + self.quad_weights[x] * (self.quad @ th)

    def hess(self, x, theta, t: int = 0) -> Array:
        return self.quad_weights[x] * self.quad


class StateQuadraticCost(CostModel):
    """Parameter-free cost x'Mx for continuous states."""

    differentiable = True
    twice_differentiable = True

    def __init__(self, M, n_params=0):
        self.M = np.asarray(M, dtype=float)
        self.n_params = int(n_params)

    def value(self, x, theta, t: int = 0) -> float:
        xv = np.asarray(x, dtype=float)
        return float(xv @ self.M @ xv)

    def grad(self, x, theta, t: int = 0) -> Array:
        return np.zeros(self.n_params)

    def hess(self, x, theta, t: int = 0) -> Array:
        return np.zeros((self.n_params, self.n_params))


class WeightedSumCost(CostModel):
    """Weighted sum of component costs sharing one parameter vector."""

    def __init__(self, parts: Sequence[CostModel], weights=None):
        if len(parts) == 0:
            raise InvalidStructureError("need at least one cost component")
        self.parts = list(parts)
        if weights is None:
            weights = np.ones(len(parts))
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (len(parts),):
            raise InvalidStructureError("one weight per cost component required")
        self.n_params = parts[0].n_params
        for p in parts:
            if p.n_params != self.n_params:
                raise InvalidStructureError("cost components disagree on n_params")
        self.differentiable = all(p.differentiable for p in parts)
        self.twice_differentiable = all(p.twice_differentiable for p in parts)
        self.time_varying = any(p.time_varying for p in parts)

    def value(self, x, theta, t: int = 0) -> float:
        return float(sum(w * p.value(x, theta, t) for w, p in zip(self.weights, self.parts)))

    def grad(self, x, theta, t: int = 0) -> Array:
        g = np.zeros(self.n_params)
        for w, p in zip(self.weights, self.parts):
            g += w * p.grad(x, theta, t)
        return g

    def hess(self, x, theta, t: int = 0) -> Array:
        h = np.zeros((self.n_params, self.n_params))
        for w, p in zip(self.weights, self.parts):
            h += w * p.hess(x, theta, t)
        return h


def cost_sum(parts, weights=None) -> WeightedSumCost:
    """Combine cost components into a single weighted-sum cost."""
    return WeightedSumCost(parts, weights)


class KlToFixedChainCost(CostModel):
    """Per-state KL divergence of the chain's row from a fixed reference row.

    The gradient uses the score identity: the sum of dP times the constant
    +1 inside d(P log(P/q)) vanishes because probabilities stay normalized,
    leaving sum_y P(y|x) score(x,y) log(P(y|x)/q(y|x)).
    """

    def __init__(self, chain: ChainModel, reference):
        if not chain.tabular or not chain.differentiable:
            raise CapabilityError("KL cost needs a tabular differentiable chain")
        self.chain = chain
        self.reference = np.asarray(reference, dtype=float)
        n = chain.n_states
        if self.reference.shape != (n, n):
            raise InvalidStructureError("reference matrix shape mismatch")
        if np.any(np.abs(self.reference.sum(axis=1) - 1.0) > 1e-9) or np.any(self.reference < 0):
            raise InvalidStructureError("reference rows must be distributions")
        self.n_params = chain.n_params
        self.twice_differentiable = chain.twice_differentiable
        for x in range(n):
            for y in chain.successors(x):
                if self.reference[x, y] <= 0.0:
                    raise DivergenceUndefinedError(
                        f"chain allows {x}->{y} but the reference gives it zero mass"
                    )

    def _log_ratio(self, x, theta, t):
        row = self.chain.prob_row(x, theta, t)
        mask = row > 0.0
        ratio = np.zeros_like(row)
        ratio[mask] = np.log(row[mask] / self.reference[x][mask])
        return row, mask, ratio

    def value(self, x, theta, t: int = 0) -> float:
        row, mask, ratio = self._log_ratio(x, theta, t)
        return float(np.sum(row[mask] * ratio[mask]))

    def grad(self, x, theta, t: int = 0) -> Array:
        row, mask, ratio = self._log_ratio(x, theta, t)
        g = np.zeros(self.n_params)
        for y in np.nonzero(mask)[0]:
            g += row[y] * ratio[y] * self.chain.score(x, y, theta, t)
        return g

    def hess(self, x, theta, t: int = 0) -> Array:
        row, mask, ratio = self._log_ratio(x, theta, t)
        h = np.zeros((self.n_params, self.n_params))
        for y in np.nonzero(mask)[0]:
            s = self.chain.score(x, y, theta, t)
            curv = np.outer(s, s) + self.chain.log_prob_hess(x, y, theta, t)
            h += row[y] * (ratio[y] * curv + np.outer(s, s))
        return h


def cost_kl_to_fixed(chain: ChainModel, reference) -> KlToFixedChainCost:
    """Control-effort cost: KL from the chain's rows to a fixed reference chain."""
    return KlToFixedChainCost(chain, reference)


class PolicyEntropyCost(CostModel):
    """Entropy of a tabular stochastic policy, one value per state.

    The policy object must expose row(x, theta) -> action probabilities and
    param_slice(x) -> the slice of theta feeding that row.
    """

    def __init__(self, policy):
        self.policy = policy
        self.n_params = policy.n_params

    def value(self, x, theta, t: int = 0) -> float:
        p = self.policy.row(x, theta)
        mask = p > 0
        return float(-np.sum(p[mask] * np.log(p[mask])))

    def grad(self, x, theta, t: int = 0) -> Array:
        p = self.policy.row(x, theta)
        h = self.value(x, theta, t)
        g = np.zeros(self.n_params)
        logs = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        g[self.policy.param_slice(x)] = -p * (logs + h)
        return g


def cost_policy_entropy(policy) -> PolicyEntropyCost:
    """Per-state policy entropy, used as an exploration bonus term."""
    return PolicyEntropyCost(policy)


class TimeVaryingCost(CostModel):
    """Stage-indexed cost dispatching to one sub-cost per stage."""

    time_varying = True

    def __init__(self, stages: Sequence[CostModel]):
        if len(stages) == 0:
            raise InvalidStructureError("need at least one stage cost")
        self.stages = list(stages)
        self.n_params = stages[0].n_params
        for c in stages:
            if c.n_params != self.n_params:
                raise InvalidStructureError("stage costs must agree on n_params")
        self.differentiable = all(c.differentiable for c in stages)
        self.twice_differentiable = all(c.twice_differentiable for c in stages)

    def _at(self, t: int) -> CostModel:
        return self.stages[min(t, len(self.stages) - 1)]

    def value(self, x, theta, t: int = 0) -> float:
        return self._at(t).value(x, theta)

    def grad(self, x, theta, t: int = 0) -> Array:
        return self._at(t).grad(x, theta)

    def hess(self, x, theta, t: int = 0) -> Array:
        return self._at(t).hess(x, theta)

    def value_table(self, n_states, theta, t: int = 0) -> Array:
        return self._at(t).value_table(n_states, theta)

    def grad_table(self, n_states, theta, t: int = 0) -> Array:
        return self._at(t).grad_table(n_states, theta)


# ---------------------------------------------------------------------------
# Problem container
# ---------------------------------------------------------------------------


@dataclass
class Problem:
    """A parameterized chain, a parameterized cost, a setting, and a start law."""

    chain: ChainModel
    cost: CostModel
    setting: Setting
    init: InitialDistribution

    def __post_init__(self):
        if self.chain.n_params != self.cost.n_params:
            raise InvalidStructureError(
                f"chain has {self.chain.n_params} parameters but cost has {self.cost.n_params}"
            )
        if isinstance(self.init, TabularInitial):
            if not self.chain.tabular:
                raise InvalidStructureError("tabular start law requires a tabular chain")
            if self.init.weights.shape[0] != self.chain.n_states:
                raise InvalidStructureError("start law length must match n_states")
        if isinstance(self.setting, FirstExit):
            if not self.chain.tabular:
                raise InvalidStructureError("first-exit problems must be tabular")
            if len(self.chain.terminal) == 0:
                raise InvalidStructureError("first-exit problems need terminal states")
        if isinstance(self.setting, Average) and self.chain.tabular:
            if len(self.chain.terminal) > 0:
                raise InvalidStructureError("average-cost problems must have no terminal states")
        if isinstance(self.setting, TimeVarying):
            T = self.setting.horizon
            if isinstance(self.chain, TimeVaryingChain) and len(self.chain.stages) < T:
                raise InvalidStructureError(f"need {T} stage chains, got {len(self.chain.stages)}")
            if isinstance(self.cost, TimeVaryingCost) and len(self.cost.stages) < T + 1:
                raise InvalidStructureError(
                    f"need {T + 1} stage costs, got {len(self.cost.stages)}"
                )

    @property
    def n_params(self) -> int:
        return self.chain.n_params

    @property
    def gamma(self) -> float:
        return self.setting.gamma
