"""Bellman 算子、值迭代与策略评估测试"""
import numpy as np
import pytest

from app.core.exceptions import ConvergenceError, InfeasibleActionError, InvalidParameters
from app.models.schemas import Action
from app.services.bellman_service import (
    DEFER_TRANSMIT,
    BeliefGrid,
    ValueTable,
    action_value_defer,
    action_value_sense,
    action_value_transmit,
    action_values_at,
    bellman_sweep,
    compute_action_values,
    expected_reward,
    finite_horizon_values,
    interpolate_value,
    policy_evaluation,
    value_iteration
)
from conftest import make_params


def constant_table(params, grid, value):
    table = ValueTable.zeros(params, grid)
    table.values = np.full(table.shape, float(value))
    return table


class TestBeliefGrid:
    """信念网格"""

    def test_contains_exact_lambdas(self):
        params = make_params(lambda1=0.9123, lambda0=0.6017)
        grid = BeliefGrid.build(params, 200)
        assert grid.nodes[grid.index_lambda0] == 0.6017
        assert grid.nodes[grid.index_lambda1] == 0.9123
        assert grid.size == 203
        assert grid.nodes[0] == 0.0
        assert grid.nodes[-1] == 1.0
        assert np.all(np.diff(grid.nodes) > 0)

    def test_lambda_on_uniform_node_is_not_duplicated(self, reference_params):
        grid = BeliefGrid.build(reference_params, 10)
        assert grid.size == 11
        assert grid.nodes[grid.index_lambda0] == 0.6
        assert grid.nodes[grid.index_lambda1] == 0.9

    def test_defer_bracket_brackets_image(self, reference_params):
        grid = BeliefGrid.build(reference_params, 50)
        image = reference_params.lambda0 * (1 - grid.nodes) + reference_params.lambda1 * grid.nodes
        reconstructed = grid.nodes[grid.defer_lo] * (1 - grid.defer_weight) + grid.nodes[grid.defer_lo + 1] * grid.defer_weight
        np.testing.assert_allclose(reconstructed, image, atol=1e-14)

    def test_invalid_intervals(self, reference_params):
        with pytest.raises(InvalidParameters):
            BeliefGrid.build(reference_params, 0)


class TestExpectedReward:
    """单时隙期望回报"""

    def test_transmit(self, reference_params):
        assert expected_reward(reference_params, 2 * reference_params.k, 0.5, Action.TRANSMIT) == pytest.approx(1.5)

    def test_sense_with_energy(self, reference_params):
        assert expected_reward(reference_params, 2 * reference_params.k, 0.5, Action.SENSE) == pytest.approx(1.2)

    def test_sense_only(self, reference_params):
        assert expected_reward(reference_params, 1, 0.9, Action.SENSE) == 0.0

    def test_defer(self, reference_params):
        assert expected_reward(reference_params, 7, 0.9, Action.DEFER) == 0.0

    def test_infeasible(self, reference_params):
        with pytest.raises(InfeasibleActionError) as exc_info:
            expected_reward(reference_params, reference_params.k - 1, 0.9, Action.TRANSMIT)
        assert exc_info.value.exit_code == 3
        with pytest.raises(InfeasibleActionError):
            expected_reward(reference_params, 0, 0.9, Action.SENSE)


class TestInterpolation:
    """节点间线性插值"""

    def test_node_values_exact(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        table = ValueTable.zeros(reference_params, grid)
        table.values = np.random.default_rng(0).random(table.shape)
        for i in (0, 3, grid.index_lambda0, grid.size - 1):
            assert interpolate_value(table, grid, 4, float(grid.nodes[i])) == table.values[4, i]

    def test_affine_reproduced(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        table = ValueTable.zeros(reference_params, grid)
        table.values = np.tile(2.0 + 3.0 * grid.nodes, (reference_params.n_levels, 1))
        for p in (0.013, 0.5, 0.777):
            assert interpolate_value(table, grid, 0, p) == pytest.approx(2.0 + 3.0 * p)

    def test_out_of_range(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        with pytest.raises(InvalidParameters):
            interpolate_value(ValueTable.zeros(reference_params, grid), grid, 0, 1.5)


class TestActionValues:
    """四个动作值递推"""

    @pytest.fixture
    def grid(self, reference_params):
        return BeliefGrid.build(reference_params, 50)

    def test_defer(self, reference_params, grid):
        assert action_value_defer(reference_params, constant_table(reference_params, grid, 0), grid, 3, 0.4) == 0.0
        assert action_value_defer(reference_params, constant_table(reference_params, grid, 7), grid, 3, 0.4) == pytest.approx(0.98 * 7)

    def test_defer_clips_at_capacity(self, reference_params, grid):
        table = ValueTable.zeros(reference_params, grid)
        table.values = np.tile(np.arange(reference_params.n_levels, dtype=float)[:, None], (1, grid.size))
        top = reference_params.max_quanta
        assert action_value_defer(reference_params, table, grid, top, 0.3) == pytest.approx(0.98 * top)

    def test_sense(self, reference_params, grid):
        zero = constant_table(reference_params, grid, 0)
        assert action_value_sense(reference_params, zero, grid, 10, 0.5) == pytest.approx(0.5 * 0.8 * 3.0)
        assert action_value_sense(reference_params, zero, grid, 3, 0.5) == 0.0

    def test_sense_good_branch(self, grid):
        params = make_params(q=0.0)
        table = constant_table(params, grid, 4.0)
        assert action_value_sense(params, table, grid, params.k, 1.0) == pytest.approx(0.8 * 3.0 + 0.98 * 4.0)

    def test_transmit(self, reference_params, grid):
        assert action_value_transmit(reference_params, constant_table(reference_params, grid, 0), grid, 5, 0.7) == pytest.approx(2.1)
        assert action_value_transmit(reference_params, constant_table(reference_params, grid, 4), grid, 5, 0.0) == pytest.approx(0.98 * 4)

    def test_transmit_myopic(self, grid):
        params = make_params(beta=0.0)
        table = constant_table(params, grid, 100.0)
        assert action_value_transmit(params, table, grid, 5, 0.7) == pytest.approx(2.1)

    def test_infeasible(self, reference_params, grid):
        table = constant_table(reference_params, grid, 0)
        with pytest.raises(InfeasibleActionError):
            action_value_transmit(reference_params, table, grid, 4, 0.5)
        with pytest.raises(InfeasibleActionError):
            action_value_sense(reference_params, table, grid, 0, 0.5)

    def test_vectorized_matches_scalar(self, reference_params, grid):
        table = ValueTable.zeros(reference_params, grid)
        table.values = np.sort(np.random.default_rng(1).random(table.shape) * 10, axis=0)
        vectorized = compute_action_values(reference_params, grid, table.values)
        for u in (0, 1, 4, 5, 12, reference_params.max_quanta):
            for i in (0, 7, grid.index_lambda1, grid.size - 1):
                scalar = action_values_at(reference_params, table, grid, u, float(grid.nodes[i]))
                np.testing.assert_allclose(vectorized[u, i], scalar, rtol=1e-12, atol=1e-12)

    def test_arbitrary_beliefs(self, reference_params, grid):
        table = ValueTable.zeros(reference_params, grid)
        table.values = np.random.default_rng(2).random(table.shape)
        beliefs = np.array([0.123, 0.456, 0.8571])
        vectorized = compute_action_values(reference_params, grid, table.values, beliefs=beliefs)
        assert vectorized.shape == (reference_params.n_levels, 3, 3)
        for j, p in enumerate(beliefs):
            scalar = action_values_at(reference_params, table, grid, 12, float(p))
            np.testing.assert_allclose(vectorized[12, j], scalar, rtol=1e-12, atol=1e-12)


class TestBellmanSweep:
    """同步 Bellman 更新"""

    def test_first_sweep_from_zero(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        table, delta = bellman_sweep(reference_params, grid, ValueTable.zeros(reference_params, grid))
        k = reference_params.k
        np.testing.assert_allclose(table.values[k:], np.tile(grid.nodes * 3.0, (reference_params.n_levels - k, 1)))
        np.testing.assert_array_equal(table.values[:k], 0.0)
        assert delta == pytest.approx(3.0)
        assert table.iteration_count == 1

    def test_monotone_from_zero(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        table = ValueTable.zeros(reference_params, grid)
        for _ in range(30):
            new_table, _ = bellman_sweep(reference_params, grid, table)
            assert np.all(new_table.values >= table.values - 1e-12)
            table = new_table

    def test_respects_restricted_actions(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        table = ValueTable.zeros(reference_params, grid, DEFER_TRANSMIT)
        table, _ = bellman_sweep(reference_params, grid, table)
        assert np.all(np.isnan(table.action_values[:, :, 1]))

    def test_contraction_on_random_pairs(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        rng = np.random.default_rng(3)
        for _ in range(20):
            t1, t2 = ValueTable.zeros(reference_params, grid), ValueTable.zeros(reference_params, grid)
            t1.values = rng.uniform(0, 150, t1.shape)
            t2.values = rng.uniform(0, 150, t2.shape)
            before = np.max(np.abs(t1.values - t2.values))
            after = np.max(np.abs(bellman_sweep(reference_params, grid, t1)[0].values - bellman_sweep(reference_params, grid, t2)[0].values))
            assert after <= 0.98 * before * (1 + 1e-12)


class TestValueIteration:
    """值迭代"""

    def test_zero_rate_one_sweep(self):
        params = make_params(rate_r=0.0)
        grid = BeliefGrid.build(params, 20)
        table = value_iteration(params, grid, 1e-6)
        assert table.iteration_count == 1
        np.testing.assert_array_equal(table.values, 0.0)

    def test_myopic_two_sweeps(self):
        params = make_params(beta=0.0)
        grid = BeliefGrid.build(params, 20)
        table = value_iteration(params, grid, 1e-6)
        assert table.iteration_count == 2
        np.testing.assert_allclose(table.values[params.k:], np.tile(3.0 * grid.nodes, (params.n_levels - params.k, 1)))
        np.testing.assert_array_equal(table.values[:params.k], 0.0)

    def test_reference_bounded_and_monotone(self, reference_solution):
        params, grid, table, _ = reference_solution
        assert np.all(np.isfinite(table.values))
        assert table.values.max() <= 3.0 / (1 - 0.98)
        assert np.all(np.diff(table.values, axis=0) >= -1e-8 * 3.0)
        assert np.all(np.diff(table.values, axis=1) >= -1e-8 * 3.0)
        assert table.final_sup_norm_delta <= 1e-6 * 3.0 * (1 - 0.98) / (2 * 0.98)

    def test_restricted_never_exceeds_full(self, small_params):
        grid = BeliefGrid.build(small_params, 40)
        full = value_iteration(small_params, grid, 1e-7)
        restricted = value_iteration(small_params, grid, 1e-7, actions=DEFER_TRANSMIT)
        assert np.all(restricted.values <= full.values + 1e-7)

    def test_convergence_error(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        with pytest.raises(ConvergenceError) as exc_info:
            value_iteration(reference_params, grid, 1e-6, max_iterations=3)
        assert exc_info.value.exit_code == 4
        assert exc_info.value.iterations == 3

    def test_invalid_epsilon(self, reference_params):
        grid = BeliefGrid.build(reference_params, 20)
        with pytest.raises(InvalidParameters):
            value_iteration(reference_params, grid, 0.0)


class TestFiniteHorizonAndEvaluation:
    """有限时域值与固定策略评估"""

    def test_zero_horizon(self, small_params):
        grid = BeliefGrid.build(small_params, 10)
        np.testing.assert_array_equal(finite_horizon_values(small_params, grid, 0).values, 0.0)

    def test_evaluation_of_optimal_actions_matches_values(self, small_params):
        from app.services.policy_service import extract_policy

        grid = BeliefGrid.build(small_params, 40)
        table = value_iteration(small_params, grid, 1e-8)
        policy = extract_policy(small_params, grid, table)
        evaluated = policy_evaluation(small_params, grid, policy.actions.astype(np.int64), 1e-8)
        np.testing.assert_allclose(evaluated.values, table.values, atol=1e-6)

    def test_infeasible_policy_rejected(self, small_params):
        grid = BeliefGrid.build(small_params, 10)
        actions = np.full((small_params.n_levels, grid.size), 2, dtype=np.int64)
        with pytest.raises(InfeasibleActionError):
            policy_evaluation(small_params, grid, actions, 1e-6)

    def test_shape_mismatch(self, small_params):
        grid = BeliefGrid.build(small_params, 10)
        with pytest.raises(InvalidParameters):
            policy_evaluation(small_params, grid, np.zeros((2, 2), dtype=np.int64), 1e-6)
