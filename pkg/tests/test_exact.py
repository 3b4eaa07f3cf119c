"""Value solvers, visitation weights, and analytic gradients vs oracles.

Oracle policy: every solver is checked against an independent computation
(truncated power series, eigenvectors, backward recursion by hand, central
finite differences) before any identity between library routines is used.
"""

import numpy as np
import pytest

from chainopt import (
    Average,
    EpisodicDiscounted,
    FirstExit,
    Problem,
    ReachabilityError,
    SoftmaxChain,
    TableCost,
    TabularInitial,
    discounted_occupancy,
    exact_gradient,
    exact_gradient_bottleneck,
    fd_gradient_oracle,
    objective,
    solve_value_average,
    solve_value_episodic,
    solve_value_timevarying,
    stationary_density,
)
from chainopt.mdp import stochastic_to_deterministic
from chainopt.problems import (
    canonical_two_state,
    random_mdp,
    random_softmax_problem,
    random_timevarying_problem,
)


def series_value(P, L, gamma, terms=2000):
    """Truncated power series sum_t gamma^t P^t L."""
    V = np.zeros_like(L)
    term = L.copy()
    for _ in range(terms):
        V = V + term
        term = gamma * P @ term
    return V


def theta_for(problem, seed):
    rng = np.random.default_rng(seed)
    return 0.3 * rng.normal(size=problem.n_params)


class TestCanonicalClosedForm:
    """The two-state escape problem has exact closed forms: with sigma the
    exit probability, J = 1/sigma, the start state is visited 1/sigma times
    in expectation, and the gradient is (1 - sigma, sigma - 1) / sigma."""

    def test_objective_and_gradient_at_zero(self):
        prob = canonical_two_state()
        theta = np.zeros(prob.n_params)
        assert abs(objective(prob, theta) - 2.0) < 1e-12
        np.testing.assert_allclose(exact_gradient(prob, theta), [1.0, -1.0], atol=1e-12)

    def test_objective_tracks_one_over_sigma(self):
        prob = canonical_two_state()
        for t0, t1 in [(0.5, -0.3), (-1.0, 0.7), (2.0, 0.0)]:
            theta = np.array([t0, t1])
            sigma = np.exp(t1) / (np.exp(t0) + np.exp(t1))
            assert abs(objective(prob, theta) - 1.0 / sigma) < 1e-10

    def test_occupancy_counts_expected_visits(self):
        prob = canonical_two_state()
        rho = discounted_occupancy(prob, np.zeros(2))
        # start state visited Geometric(1/2) times, terminal entered once
        np.testing.assert_allclose(rho, [2.0, 1.0], atol=1e-12)


class TestEpisodicSolver:
    def test_value_matches_power_series(self):
        prob = random_softmax_problem(EpisodicDiscounted(0.9), n_states=6, seed=4)
        theta = theta_for(prob, 0)
        V = solve_value_episodic(prob, theta).values
        P = prob.chain.transition_matrix(theta)
        L = prob.cost.value_table(6, theta)
        np.testing.assert_allclose(V, series_value(P, L, 0.9), atol=1e-10)

    def test_gamma_zero_degenerates_to_one_step_cost(self):
        prob = random_softmax_problem(EpisodicDiscounted(0.0), n_states=5, seed=1)
        theta = theta_for(prob, 2)
        L = prob.cost.value_table(5, theta)
        np.testing.assert_allclose(solve_value_episodic(prob, theta).values, L)
        assert abs(objective(prob, theta) - float(prob.init.weights @ L)) < 1e-14

    def test_first_exit_value_matches_series(self):
        prob = random_softmax_problem(FirstExit(), n_states=6, seed=7)
        theta = theta_for(prob, 3)
        V = solve_value_episodic(prob, theta).values
        P = prob.chain.transition_matrix(theta).copy()
        L = prob.cost.value_table(6, theta)
        for s in prob.chain.terminal:
            P[s, :] = 0.0  # stop accumulating after absorption
        np.testing.assert_allclose(V, series_value(P, L, 1.0, terms=5000), atol=1e-9)

    def test_unreachable_terminal_raises(self):
        chain = SoftmaxChain(3, {0: [0, 1], 1: [0, 1]}, terminal=[2])
        cost = TableCost([1.0, 1.0, 0.0], n_params=chain.n_params)
        prob = Problem(chain, cost, FirstExit(), TabularInitial([1.0, 0.0, 0.0]))
        with pytest.raises(ReachabilityError):
            solve_value_episodic(prob, np.zeros(prob.n_params))


class TestOccupancyAndDensity:
    def test_occupancy_matches_truncated_sum(self):
        prob = random_softmax_problem(EpisodicDiscounted(0.9), n_states=6, seed=5)
        theta = theta_for(prob, 1)
        rho = discounted_occupancy(prob, theta)
        P = prob.chain.transition_matrix(theta)
        p = prob.init.weights.copy()
        want = np.zeros(6)
        for t in range(2000):
            want += (0.9 ** t) * p
            p = P.T @ p
        np.testing.assert_allclose(rho, want, atol=1e-10)

    def test_stationary_density_is_left_eigenvector(self):
        prob = random_softmax_problem(Average(), n_states=7, seed=6)
        theta = theta_for(prob, 4)
        d = stationary_density(prob, theta)
        P = prob.chain.transition_matrix(theta)
        np.testing.assert_allclose(d @ P, d, atol=1e-12)
        assert abs(d.sum() - 1.0) < 1e-12
        assert np.all(d > 0)
        # agrees with the power method, an independent route
        mu = np.full(7, 1.0 / 7.0)
        for _ in range(20000):
            mu = mu @ P
        np.testing.assert_allclose(d, mu, atol=1e-10)


class TestAverageSolver:
    def test_average_cost_and_gauge(self):
        prob = random_softmax_problem(Average(), n_states=6, seed=9)
        theta = theta_for(prob, 5)
        sol = solve_value_average(prob, theta)
        d = stationary_density(prob, theta)
        P = prob.chain.transition_matrix(theta)
        L = prob.cost.value_table(6, theta)
        assert abs(sol.j - float(d @ L)) < 1e-12
        # differential values satisfy V + j = L + P V and E_d[V] = 0
        np.testing.assert_allclose(sol.values + sol.j, L + P @ sol.values, atol=1e-10)
        assert abs(d @ sol.values) < 1e-10


class TestTimeVaryingSolver:
    def test_matches_manual_backward_recursion(self):
        prob = random_timevarying_problem(horizon=4, n_states=5, seed=3)
        theta = theta_for(prob, 6)
        V = solve_value_timevarying(prob, theta)
        assert V.shape == (5, 5)
        want = prob.cost.value_table(5, theta, 4)
        np.testing.assert_allclose(V[4], want)
        for t in (3, 2, 1, 0):
            P = prob.chain.transition_matrix(theta, t)
            want = prob.cost.value_table(5, theta, t) + P @ want
            np.testing.assert_allclose(V[t], want, atol=1e-12)
        assert abs(objective(prob, theta) - float(prob.init.weights @ V[0])) < 1e-14

    def test_objective_matches_monte_carlo(self):
        prob = random_timevarying_problem(horizon=3, n_states=4, seed=8)
        theta = theta_for(prob, 7)
        rng = np.random.default_rng(123)
        total = 0.0
        n = 40_000
        for _ in range(n):
            x = prob.init.sample(rng)
            for t in range(3):
                total += prob.cost.value(x, theta, t)
                x = prob.chain.sample(x, theta, rng, t)
            total += prob.cost.value(x, theta, 3)
        assert abs(total / n - objective(prob, theta)) < 0.05


class TestExactGradient:
    SETTINGS = [
        EpisodicDiscounted(0.9),
        EpisodicDiscounted(0.0),
        FirstExit(),
        Average(),
    ]

    def test_matches_fd_across_settings(self):
        """The expectation-form gradient equals central differences of the
        objective on every stationary setting."""
        for setting in self.SETTINGS:
            prob = random_softmax_problem(setting, n_states=6, seed=11)
            theta = theta_for(prob, 8)
            g = exact_gradient(prob, theta)
            fd = fd_gradient_oracle(prob, theta)
            np.testing.assert_allclose(g, fd, atol=1e-7)

    def test_matches_fd_time_varying(self):
        prob = random_timevarying_problem(horizon=6, n_states=5, seed=2)
        theta = theta_for(prob, 9)
        np.testing.assert_allclose(
            exact_gradient(prob, theta), fd_gradient_oracle(prob, theta), atol=1e-7
        )

    def test_bottleneck_route_agrees(self):
        """The two-factor chain rule through the action distribution gives
        the same gradient as the direct score form."""
        for setting in (EpisodicDiscounted(0.9), Average()):
            mdp, policy, theta = random_mdp(5, 3, seed=12, setting=setting)
            _, prob = stochastic_to_deterministic(mdp, policy)
            np.testing.assert_allclose(
                exact_gradient_bottleneck(prob, theta),
                exact_gradient(prob, theta),
                atol=1e-10,
            )
