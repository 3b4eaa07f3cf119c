"""Rollout generation, serialization, value fitting, and sampled gradients."""

import numpy as np
import pytest

from chainopt import (
    EpisodicDiscounted,
    FeatureMap,
    RegularizationRequiredError,
    StalenessError,
    batch_from_jsonl,
    estimate_gradient,
    exact_gradient,
    fd_hessian_oracle,
    fit_value_approx,
    generate_rollouts,
    path_gradient,
    path_hessian,
    solve_value_episodic,
)
from chainopt.rollout import check_batch, discounted_returns
from chainopt.problems import (
    canonical_two_state,
    random_softmax_problem,
    random_timevarying_problem,
)


class TestGeneration:
    def test_deterministic_under_seed(self):
        prob = canonical_two_state()
        theta = np.zeros(prob.n_params)
        a = generate_rollouts(prob, theta, 50, seed=3)
        b = generate_rollouts(prob, theta, 50, seed=3)
        for ra, rb in zip(a.rollouts, b.rollouts):
            np.testing.assert_array_equal(ra.states, rb.states)
            np.testing.assert_array_equal(ra.scores, rb.scores)
        c = generate_rollouts(prob, theta, 50, seed=4)
        assert any(
            ra.states.shape != rc.states.shape or not np.array_equal(ra.states, rc.states)
            for ra, rc in zip(a.rollouts, c.rollouts)
        )

    def test_first_exit_rollouts_end_at_terminal(self):
        prob = canonical_two_state()
        batch = generate_rollouts(prob, np.zeros(2), 200, seed=0)
        assert batch.mode == "terminal"
        for r in batch.rollouts:
            assert r.states[-1] == 1
            assert np.all(r.states[:-1] == 0)
            # unit step cost at the start state, none at the goal
            assert r.costs[-1] == 0.0
            assert np.all(r.costs[:-1] == 1.0)

    def test_geometric_mode_length_distribution(self):
        """The stop coin is flipped before every transition, so lengths are
        geometric with mean gamma / (1 - gamma)."""
        prob = random_softmax_problem(EpisodicDiscounted(0.9), n_states=5, seed=2)
        theta = np.zeros(prob.n_params)
        batch = generate_rollouts(prob, theta, 4000, seed=1)
        assert batch.mode == "geometric"
        lengths = np.array([r.n_steps for r in batch.rollouts], dtype=float)
        assert abs(lengths.mean() - 9.0) < 0.5

    def test_horizon_cap_guards_terminal_mode(self):
        prob = canonical_two_state()
        batch = generate_rollouts(prob, np.array([8.0, -8.0]), 20, horizon_cap=5, seed=0)
        assert all(r.n_steps <= 5 for r in batch.rollouts)

    def test_time_varying_runs_exact_horizon(self):
        prob = random_timevarying_problem(horizon=4, n_states=4, seed=0)
        batch = generate_rollouts(prob, np.zeros(prob.n_params), 30, seed=5)
        assert all(r.n_steps == 4 for r in batch.rollouts)

    def test_stale_batch_is_rejected(self):
        prob = canonical_two_state()
        batch = generate_rollouts(prob, np.zeros(2), 10, seed=0)
        with pytest.raises(StalenessError):
            check_batch(np.array([0.1, 0.0]), batch)


class TestSerialization:
    def test_jsonl_round_trip(self, tmp_path):
        prob = random_softmax_problem(EpisodicDiscounted(0.9), n_states=5, seed=3)
        theta = 0.2 * np.random.default_rng(0).normal(size=prob.n_params)
        batch = generate_rollouts(prob, theta, 25, seed=7)
        path = tmp_path / "batch.jsonl"
        batch.to_jsonl(path)
        back = batch_from_jsonl(prob, path)
        assert back.mode == batch.mode and back.seed == batch.seed
        np.testing.assert_array_equal(back.theta, batch.theta)
        for ra, rb in zip(batch.rollouts, back.rollouts):
            np.testing.assert_array_equal(ra.states, rb.states)
            np.testing.assert_allclose(ra.costs, rb.costs, rtol=0, atol=0)
            np.testing.assert_allclose(ra.scores, rb.scores, rtol=0, atol=0)


class TestDiscountedReturns:
    def test_small_cases_by_hand(self):
        np.testing.assert_allclose(
            discounted_returns(np.array([1.0, 2.0, 4.0]), 0.5),
            [1.0 + 1.0 + 1.0, 2.0 + 2.0, 4.0],
        )
        np.testing.assert_allclose(
            discounted_returns(np.array([3.0]), 0.9), [3.0]
        )


class TestValueFit:
    def test_constant_feature_recovers_weighted_mean(self):
        """With a single constant feature the normal equations collapse to
        the discount-weighted average of the returns."""
        prob = canonical_two_state()
        theta = np.zeros(2)
        batch = generate_rollouts(prob, theta, 300, seed=11)
        fit = fit_value_approx(prob, batch, FeatureMap.constant())
        num = den = 0.0
        for r in batch.rollouts:
            R = discounted_returns(r.costs, 1.0)
            for t in range(r.costs.shape[0]):
                num += R[t]
                den += 1.0
        assert abs(fit.weights[0] - num / den) < 1e-12

    def test_tabular_fit_approaches_exact_values(self):
        prob = canonical_two_state()
        theta = np.zeros(2)
        batch = generate_rollouts(prob, theta, 4000, seed=13)
        fit = fit_value_approx(prob, batch, FeatureMap.tabular(2), ridge=1e-9)
        V = solve_value_episodic(prob, theta).values
        np.testing.assert_allclose(fit.table(2), V, atol=0.15)

    def test_rank_deficiency_requires_ridge(self):
        prob = canonical_two_state()
        batch = generate_rollouts(prob, np.zeros(2), 20, seed=0)
        dead = FeatureMap(2, lambda x: np.zeros(2))
        with pytest.raises(RegularizationRequiredError):
            fit_value_approx(prob, batch, dead, ridge=0.0)


class TestGradientEstimation:
    def test_combined_estimate_near_exact(self):
        """Batch means concentrate on the exact gradient (tight bound in the
        acceptance suite; this is a 5-sigma smoke check)."""
        prob = canonical_two_state()
        theta = np.zeros(2)
        exact = exact_gradient(prob, theta)
        means, ses = [], []
        for k in range(10):
            batch = generate_rollouts(prob, theta, 400, seed=100 + k)
            est = estimate_gradient(prob, theta, batch)
            assert est.valid and est.n_rollouts == 400
            means.append(est.mean)
            ses.append(est.stderr)
        mean = np.mean(means, axis=0)
        se = np.sqrt(np.sum(np.square(ses), axis=0)) / len(ses)
        assert np.all(np.abs(mean - exact) <= 5 * se)

    def test_baseline_changes_values_not_expectation(self):
        prob = canonical_two_state()
        theta = np.zeros(2)
        fit_batch = generate_rollouts(prob, theta, 500, seed=999)
        baseline = fit_value_approx(prob, fit_batch, FeatureMap.tabular(2), ridge=1e-9)
        exact = exact_gradient(prob, theta)
        means, ses = [], []
        for k in range(10):
            batch = generate_rollouts(prob, theta, 400, seed=2000 + k)
            est = estimate_gradient(prob, theta, batch, baseline=baseline)
            means.append(est.mean)
            ses.append(est.stderr)
        mean = np.mean(means, axis=0)
        se = np.sqrt(np.sum(np.square(ses), axis=0)) / len(ses)
        assert np.all(np.abs(mean - exact) <= 5 * se)

    def test_time_varying_estimate_near_exact(self):
        prob = random_timevarying_problem(horizon=3, n_states=4, seed=1)
        theta = 0.2 * np.random.default_rng(1).normal(size=prob.n_params)
        exact = exact_gradient(prob, theta)
        batch = generate_rollouts(prob, theta, 3000, seed=21)
        est = estimate_gradient(prob, theta, batch)
        assert np.all(np.abs(est.mean - exact) <= 5 * est.stderr + 1e-12)


class TestPathDerivatives:
    def test_path_gradient_matches_estimate_route(self):
        """Whole-path likelihood-ratio gradient agrees with the exact
        gradient within sampling error."""
        prob = random_timevarying_problem(horizon=2, n_states=3, seed=4)
        theta = 0.1 * np.random.default_rng(4).normal(size=prob.n_params)
        exact = exact_gradient(prob, theta)
        batch = generate_rollouts(prob, theta, 4000, seed=31)
        est = path_gradient(prob, theta, batch)
        assert np.all(np.abs(est.mean - exact) <= 5 * est.stderr + 1e-12)

    def test_path_hessian_symmetric_and_consistent(self):
        prob = random_timevarying_problem(horizon=2, n_states=3, seed=4)
        theta = 0.1 * np.random.default_rng(4).normal(size=prob.n_params)
        batch = generate_rollouts(prob, theta, 6000, seed=32)
        est = path_hessian(prob, theta, batch)
        np.testing.assert_allclose(est.mean, est.mean.T, atol=1e-12)
        H = fd_hessian_oracle(prob, theta)
        assert np.all(np.abs(est.mean - H) <= 6 * est.stderr + 1e-8)
