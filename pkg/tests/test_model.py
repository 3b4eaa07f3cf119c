"""Chain models, cost models, settings, and problem validation."""

import numpy as np
import pytest

from chainopt import (
    Average,
    EpisodicDiscounted,
    FirstExit,
    FixedTabularChain,
    GaussianInitial,
    GaussianLinearChain,
    InvalidStructureError,
    KlToFixedChainCost,
    Problem,
    QuadraticCost,
    SoftmaxChain,
    StateQuadraticCost,
    TableCost,
    TabularInitial,
    TimeVarying,
    TimeVaryingChain,
    TimeVaryingCost,
    WeightedSumCost,
    cost_policy_entropy,
)
from chainopt.mdp import SoftmaxPolicy


def fd_vector(fn, theta, h=1e-6):
    """Central finite difference of a vector-to-scalar function."""
    theta = np.asarray(theta, dtype=float)
    g = np.zeros(theta.size)
    for i in range(theta.size):
        e = np.zeros(theta.size)
        e[i] = h
        g[i] = (fn(theta + e) - fn(theta - e)) / (2 * h)
    return g


class TestSettings:
    def test_discount_ranges(self):
        """Discount factors outside [0, 1) are rejected; the boundary 0 is allowed."""
        EpisodicDiscounted(0.0)
        EpisodicDiscounted(0.999)
        with pytest.raises(InvalidStructureError):
            EpisodicDiscounted(1.0)
        with pytest.raises(InvalidStructureError):
            EpisodicDiscounted(-0.1)

    def test_first_exit_and_average_are_undiscounted(self):
        assert FirstExit().gamma == 1.0
        assert Average().gamma == 1.0

    def test_time_varying_needs_positive_horizon(self):
        assert TimeVarying(3).horizon == 3
        with pytest.raises(InvalidStructureError):
            TimeVarying(0)


class TestTabularInitial:
    def test_rejects_non_distribution(self):
        with pytest.raises(InvalidStructureError):
            TabularInitial([0.5, 0.6])
        with pytest.raises(InvalidStructureError):
            TabularInitial([-0.1, 1.1])

    def test_sampling_respects_support(self):
        init = TabularInitial([0.0, 1.0, 0.0])
        rng = np.random.default_rng(0)
        assert all(init.sample(rng) == 1 for _ in range(20))


class TestSoftmaxChain:
    def make(self):
        chain = SoftmaxChain(3, {0: [0, 1], 1: [0, 2]}, terminal=[2])
        theta = 0.4 * np.random.default_rng(3).normal(size=chain.n_params)
        return chain, theta

    def test_rows_are_distributions(self):
        chain, theta = self.make()
        P = chain.transition_matrix(theta)
        np.testing.assert_allclose(P.sum(axis=1), np.ones(3), atol=1e-12)
        assert np.all(P >= 0)
        # terminal rows are absorbing and carry no parameters
        assert P[2, 2] == 1.0

    def test_score_matches_fd_of_log_prob(self):
        """The score is the parameter gradient of log P(y | x)."""
        chain, theta = self.make()
        for x in (0, 1):
            for y in chain.successors(x):
                got = chain.score(x, y, theta)
                want = fd_vector(lambda th: chain.log_prob(x, y, th), theta)
                np.testing.assert_allclose(got, want, atol=1e-8)

    def test_log_prob_hess_matches_fd_of_score(self):
        chain, theta = self.make()
        h = 1e-5
        for x in (0, 1):
            for y in chain.successors(x):
                H = chain.log_prob_hess(x, y, theta)
                np.testing.assert_allclose(H, H.T, atol=1e-12)
                for i in range(theta.size):
                    e = np.zeros(theta.size)
                    e[i] = h
                    col = (chain.score(x, y, theta + e) - chain.score(x, y, theta - e)) / (2 * h)
                    np.testing.assert_allclose(H[:, i], col, atol=1e-7)

    def test_score_is_zero_outside_own_row(self):
        chain, theta = self.make()
        s = chain.score(0, 1, theta)
        sl = chain.param_slice(1)
        np.testing.assert_array_equal(s[sl], 0.0)

    def test_sampler_matches_row_frequencies(self):
        chain, theta = self.make()
        rng = np.random.default_rng(11)
        draw = chain.make_sampler(theta)
        n = 40_000
        hits = np.bincount([draw(0, rng) for _ in range(n)], minlength=3)
        np.testing.assert_allclose(hits / n, chain.prob_row(0, theta), atol=0.01)

    def test_rejects_terminal_with_parameters(self):
        with pytest.raises(InvalidStructureError):
            SoftmaxChain(2, {0: [0, 1], 1: [0]}, terminal=[1])


class TestFixedTabularChain:
    def test_rows_and_zero_score(self):
        P = np.array([[0.7, 0.3], [0.2, 0.8]])
        chain = FixedTabularChain(P, n_params=2)
        theta = np.zeros(2)
        np.testing.assert_allclose(chain.transition_matrix(theta), P)
        np.testing.assert_array_equal(chain.score(0, 1, theta), np.zeros(2))

    def test_rejects_bad_matrix(self):
        with pytest.raises(InvalidStructureError):
            FixedTabularChain(np.array([[0.7, 0.4], [0.2, 0.8]]))


class TestGaussianLinearChain:
    def make(self):
        rng = np.random.default_rng(5)
        A = 0.5 * rng.normal(size=(2, 2))
        cov = np.array([[0.5, 0.1], [0.1, 0.4]])
        chain = GaussianLinearChain(A, np.eye(2), cov, packing="offset")
        theta = rng.normal(size=chain.n_params)
        return chain, theta, rng

    def test_score_matches_fd_of_log_density(self):
        chain, theta, rng = self.make()
        x = rng.normal(size=2)
        y = rng.normal(size=2)
        got = chain.score(x, y, theta)
        want = fd_vector(lambda th: chain.log_prob(x, y, th), theta)
        np.testing.assert_allclose(got, want, atol=1e-7)

    def test_eta_fisher_is_inverse_noise_covariance(self):
        """With an identity input matrix the mean is theta-linear with unit
        jacobian, so the score covariance collapses to the noise precision."""
        chain, _, _ = self.make()
        cov = np.array([[0.5, 0.1], [0.1, 0.4]])
        np.testing.assert_allclose(chain.eta_fisher(), np.linalg.inv(cov), atol=1e-12)

    def test_sample_mean_tracks_affine_map(self):
        chain, theta, rng = self.make()
        x = np.array([0.3, -0.2])
        draws = np.stack([chain.sample(x, theta, rng) for _ in range(20_000)])
        np.testing.assert_allclose(draws.mean(axis=0), chain.mean(x, theta), atol=0.02)


class TestCosts:
    def test_table_cost_is_parameter_free(self):
        cost = TableCost([1.0, 0.0], n_params=3)
        theta = np.ones(3)
        assert cost.value(0, theta) == 1.0
        np.testing.assert_array_equal(cost.grad(0, theta), np.zeros(3))
        np.testing.assert_array_equal(cost.value_table(2, theta), [1.0, 0.0])

    def test_quadratic_cost_derivatives(self):
        rng = np.random.default_rng(9)
        n, p = 3, 4
        lin = rng.normal(size=(n, p))
        quad = rng.normal(size=(p, p))
        quad = quad @ quad.T
        cost = QuadraticCost(rng.normal(size=n), lin, quad, quad_weights=[0.5, 1.0, 2.0])
        theta = rng.normal(size=p)
        for x in range(n):
            np.testing.assert_allclose(
                cost.grad(x, theta),
                fd_vector(lambda th: cost.value(x, th), theta),
                atol=1e-6,
            )
            np.testing.assert_allclose(cost.hess(x, theta), cost.hess(x, theta).T)

    def test_weighted_sum_combines_parts(self):
        rng = np.random.default_rng(2)
        a = TableCost(rng.normal(size=3), n_params=2)
        b = QuadraticCost(np.zeros(3), rng.normal(size=(3, 2)), np.eye(2))
        cost = WeightedSumCost([a, b], weights=[2.0, 0.5])
        theta = rng.normal(size=2)
        want = 2.0 * a.value(1, theta) + 0.5 * b.value(1, theta)
        assert abs(cost.value(1, theta) - want) < 1e-14
        np.testing.assert_allclose(
            cost.grad(1, theta), 2.0 * a.grad(1, theta) + 0.5 * b.grad(1, theta)
        )

    def test_kl_to_fixed_chain_matches_manual_kl(self):
        chain = SoftmaxChain(3, {0: [0, 1, 2], 1: [0, 1, 2], 2: [0, 1, 2]})
        ref = np.full((3, 3), 1.0 / 3.0)
        cost = KlToFixedChainCost(chain, ref)
        theta = 0.3 * np.random.default_rng(7).normal(size=chain.n_params)
        P = chain.transition_matrix(theta)
        for x in range(3):
            manual = float(np.sum(P[x] * np.log(P[x] / ref[x])))
            assert abs(cost.value(x, theta) - manual) < 1e-12
            np.testing.assert_allclose(
                cost.grad(x, theta),
                fd_vector(lambda th: cost.value(x, th), theta),
                atol=1e-7,
            )

    def test_policy_entropy_cost(self):
        """The entropy term adds the positive entropy -sum_a pi log pi."""
        policy = SoftmaxPolicy(2, 3)
        cost = cost_policy_entropy(policy)
        theta = 0.5 * np.random.default_rng(1).normal(size=policy.n_params)
        for x in range(2):
            pi = policy.row(x, theta)
            assert abs(cost.value(x, theta) + float(np.sum(pi * np.log(pi)))) < 1e-12
            np.testing.assert_allclose(
                cost.grad(x, theta),
                fd_vector(lambda th: cost.value(x, th), theta),
                atol=1e-7,
            )

    def test_state_quadratic_cost(self):
        M = np.array([[2.0, 0.5], [0.5, 1.0]])
        cost = StateQuadraticCost(M, n_params=3)
        x = np.array([1.0, -2.0])
        assert abs(cost.value(x, np.zeros(3)) - float(x @ M @ x)) < 1e-14


class TestTimeVarying:
    def test_stage_dispatch(self):
        """Stage chains and costs are consulted at their own time index;
        the last stage persists past the horizon."""
        c0 = FixedTabularChain(np.array([[0.0, 1.0], [0.0, 1.0]]), n_params=0)
        c1 = FixedTabularChain(np.array([[1.0, 0.0], [1.0, 0.0]]), n_params=0)
        chain = TimeVaryingChain([c0, c1])
        theta = np.zeros(0)
        np.testing.assert_allclose(chain.prob_row(0, theta, t=0), [0.0, 1.0])
        np.testing.assert_allclose(chain.prob_row(0, theta, t=1), [1.0, 0.0])
        np.testing.assert_allclose(chain.prob_row(0, theta, t=5), [1.0, 0.0])

        cost = TimeVaryingCost([TableCost([1.0, 2.0]), TableCost([3.0, 4.0])])
        assert cost.value(1, theta, t=0) == 2.0
        assert cost.value(1, theta, t=1) == 4.0
        assert cost.value(1, theta, t=9) == 4.0


class TestProblemValidation:
    def test_parameter_count_must_agree(self):
        chain = SoftmaxChain(2, {0: [0, 1], 1: [0, 1]})
        with pytest.raises(InvalidStructureError):
            Problem(chain, TableCost([1.0, 0.0], n_params=1),
                    EpisodicDiscounted(0.9), TabularInitial([1.0, 0.0]))

    def test_first_exit_needs_terminal_states(self):
        chain = SoftmaxChain(2, {0: [0, 1], 1: [0, 1]})
        cost = TableCost([1.0, 0.0], n_params=chain.n_params)
        with pytest.raises(InvalidStructureError):
            Problem(chain, cost, FirstExit(), TabularInitial([1.0, 0.0]))

    def test_average_rejects_terminal_states(self):
        chain = SoftmaxChain(2, {0: [0, 1]}, terminal=[1])
        cost = TableCost([1.0, 0.0], n_params=chain.n_params)
        with pytest.raises(InvalidStructureError):
            Problem(chain, cost, Average(), TabularInitial([1.0, 0.0]))

    def test_gaussian_start_law_for_continuous_chain(self):
        rng = np.random.default_rng(0)
        chain = GaussianLinearChain(0.5 * np.eye(2), np.eye(2), np.eye(2), packing="offset")
        cost = StateQuadraticCost(np.eye(2), n_params=chain.n_params)
        prob = Problem(chain, cost, EpisodicDiscounted(0.9),
                       GaussianInitial(np.zeros(2), np.eye(2)))
        assert prob.n_params == chain.n_params
        assert prob.init.sample(rng).shape == (2,)
