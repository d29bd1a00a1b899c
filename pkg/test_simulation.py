"""仿真、副本统计与吞吐量扫描测试"""
import numpy as np
import pytest

from app.core.exceptions import BeliefChainTooLongError, InfeasibleActionError, InvalidParameters
from app.models.channel_model import belief_update_defer, stationary_belief
from app.models.schemas import Action, ChannelState, Observation, PolicyKind
from app.services.bellman_service import BeliefGrid, value_iteration
from app.services.simulation_service import (
    GreedyPolicy,
    SchedulingPolicy,
    SimState,
    ValueTablePolicy,
    build_policies,
    confidence_half_width,
    derive_seed_sequence,
    reachable_beliefs,
    run_discounted_episodes,
    run_policy,
    run_replications,
    step,
    sweep_throughput,
    truncation_horizon
)
from app.utils.config_utils import PRESETS
from conftest import make_params

NO_HARVEST = 0.999
HARVEST = 0.0


class TestStep:
    """单时隙转移"""

    def test_sense_bad_channel(self, reference_params):
        k = reference_params.k
        state = SimState(true_channel=ChannelState.BAD, u=k, belief=0.5)
        nxt, reward, obs = step(reference_params, state, Action.SENSE, (0.99, NO_HARVEST))
        assert (nxt.u, nxt.belief, reward, obs) == (k - 1, 0.6, 0.0, Observation.SENSED_BAD)
        assert nxt.slot == 1

    def test_sense_good_channel_transmits(self, reference_params):
        k = reference_params.k
        state = SimState(true_channel=ChannelState.GOOD, u=k, belief=0.5)
        nxt, reward, obs = step(reference_params, state, Action.SENSE, (0.0, NO_HARVEST))
        assert nxt.u == 0
        assert reward == pytest.approx(0.8 * 3.0)
        assert obs == Observation.SENSED_GOOD
        assert nxt.belief == 0.9

    def test_sense_only_low_battery(self, reference_params):
        state = SimState(true_channel=ChannelState.GOOD, u=2, belief=0.5)
        nxt, reward, obs = step(reference_params, state, Action.SENSE, (0.0, NO_HARVEST))
        assert (nxt.u, reward, obs) == (1, 0.0, Observation.SENSED_GOOD)

    def test_transmit_good_with_harvest(self, reference_params):
        k = reference_params.k
        state = SimState(true_channel=ChannelState.GOOD, u=k, belief=0.5)
        nxt, reward, obs = step(reference_params, state, Action.TRANSMIT, (0.0, HARVEST))
        assert (nxt.u, nxt.belief, reward, obs) == (k, 0.9, 3.0, Observation.ACK)

    def test_defer_at_capacity(self, reference_params):
        top = reference_params.max_quanta
        state = SimState(true_channel=ChannelState.GOOD, u=top, belief=0.3)
        nxt, reward, obs = step(reference_params, state, Action.DEFER, (0.5, HARVEST))
        assert nxt.u == top
        assert nxt.belief == belief_update_defer(reference_params, 0.3)
        assert (reward, obs) == (0.0, Observation.NONE)

    def test_first_slot_drawn_from_belief(self, reference_params):
        k = reference_params.k
        start = SimState(true_channel=None, u=k, belief=0.25)
        nxt, reward, obs = step(reference_params, start, Action.TRANSMIT, (0.2, NO_HARVEST))
        assert (nxt.true_channel, reward, obs) == (ChannelState.GOOD, 3.0, Observation.ACK)
        nxt, reward, obs = step(reference_params, start, Action.TRANSMIT, (0.3, NO_HARVEST))
        assert (nxt.true_channel, reward, obs) == (ChannelState.BAD, 0.0, Observation.NACK)

    def test_infeasible(self, reference_params):
        state = SimState(true_channel=ChannelState.GOOD, u=reference_params.k - 1, belief=0.5)
        with pytest.raises(InfeasibleActionError):
            step(reference_params, state, Action.TRANSMIT, (0.0, 0.0))
        with pytest.raises(InfeasibleActionError):
            step(reference_params, SimState(ChannelState.GOOD, 0, 0.5), Action.SENSE, (0.0, 0.0))


class TestReachableBeliefs:
    """可达信念链"""

    def test_chain_closed_under_defer(self, reference_params):
        start = stationary_belief(reference_params)
        chain = reachable_beliefs(reference_params, start)
        assert chain.values[chain.index_lambda0] == 0.6
        assert chain.values[chain.index_lambda1] == 0.9
        assert chain.values[chain.index_start] == start
        for i, j in enumerate(chain.next_defer):
            p, p_next = chain.values[i], belief_update_defer(reference_params, chain.values[i])
            if chain.values[j] != p_next:
                # 收敛到浮点噪声后接到平稳信念
                assert abs(p_next - p) <= 1e-15
                assert chain.values[j] == start

    def test_settled_node_is_fixed_point(self, throughput_params):
        chain = reachable_beliefs(throughput_params, 0.0)
        settled = [i for i, j in enumerate(chain.next_defer) if i == j]
        assert settled
        for i in settled:
            p = chain.values[i]
            assert abs(belief_update_defer(throughput_params, p) - p) <= 1e-15

    def test_strong_correlation_chain_is_bounded(self):
        params = make_params(lambda1=0.99, lambda0=0.01)
        chain = reachable_beliefs(params, 0.3)
        assert len(chain.values) < 20_000
        target = stationary_belief(params)
        for start in (chain.index_lambda0, chain.index_lambda1, chain.index_start):
            i = start
            for _ in range(len(chain.values)):
                i = chain.next_defer[i]
            assert chain.values[i] == pytest.approx(target, abs=1e-13)

    def test_near_deterministic_channel_raises(self):
        params = make_params(lambda1=0.999999, lambda0=1e-6)
        with pytest.raises(BeliefChainTooLongError) as exc_info:
            reachable_beliefs(params, 0.5, max_size=10_000)
        assert exc_info.value.exit_code == 3

    def test_lookup_matches_decide(self, small_params):
        grid = BeliefGrid.build(small_params, 40)
        policy = ValueTablePolicy(PolicyKind.OPTIMAL, small_params, grid, value_iteration(small_params, grid, 1e-7))
        chain = reachable_beliefs(small_params, 0.5)
        lookup = policy.lookup_table(small_params, chain)
        for u in range(small_params.n_levels):
            for s in range(0, len(chain.values), 7):
                assert policy.decide(u, float(chain.values[s])).value == "DOT"[lookup[u, s]]

    def test_policy_base_is_abstract(self, small_params):
        with pytest.raises(TypeError):
            SchedulingPolicy()
        assert isinstance(GreedyPolicy(small_params), SchedulingPolicy)


class TestRunPolicy:
    """单次长时仿真"""

    def test_no_energy_no_throughput(self):
        params = make_params(q=0.0)
        grid = BeliefGrid.build(params, 20)
        policy = ValueTablePolicy(PolicyKind.OPTIMAL, params, grid, value_iteration(params, grid, 3e-6))
        report, _ = run_policy(params, policy, 2000, 0, seed=1, start_u=0)
        assert report.throughput == 0.0
        assert report.count_defer + report.count_sense + report.count_transmit == 2000

    def test_always_good_greedy_reaches_rate(self):
        params = make_params(lambda1=1.0, lambda0=1.0, q=1.0)
        report, _ = run_policy(params, GreedyPolicy(params), 1000, 100, seed=5)
        assert report.throughput == pytest.approx(params.rate_r)
        assert report.slots == 900

    def test_energy_conservation(self, small_params):
        report, _ = run_policy(small_params, GreedyPolicy(small_params), 5000, 0, seed=3)
        assert report.initial_quanta + report.quanta_harvested - report.quanta_spent == report.final_quanta

    def test_deterministic(self, small_params):
        policy = GreedyPolicy(small_params)
        first, _ = run_policy(small_params, policy, 3000, 100, seed=42)
        second, _ = run_policy(small_params, policy, 3000, 100, seed=42)
        other, _ = run_policy(small_params, policy, 3000, 100, seed=43)
        assert first == second
        assert first.total_bits != other.total_bits or first.count_transmit != other.count_transmit

    def test_batch_matches_reference_stepper(self, small_params):
        """批量仿真与逐时隙 step 推进完全一致"""
        grid = BeliefGrid.build(small_params, 40)
        policy = ValueTablePolicy(PolicyKind.OPTIMAL, small_params, grid, value_iteration(small_params, grid, 1e-7))
        horizon, seed = 400, 11
        report, trace = run_policy(small_params, policy, horizon, 0, seed, record_trace=True)

        rng = np.random.default_rng(derive_seed_sequence(seed, "simulate"))
        draws = rng.random((horizon, 2))
        state = SimState(true_channel=None, u=small_params.max_quanta, belief=stationary_belief(small_params))
        total = 0.0
        for t in range(horizon):
            action = policy.decide(state.u, state.belief)
            assert trace["u"][t] == state.u
            assert trace["belief"][t] == pytest.approx(state.belief, abs=1e-14)
            assert trace["action"][t] == action.value
            state, reward, _ = step(small_params, state, action, (draws[t, 0], draws[t, 1]))
            total += reward
        assert report.total_bits == pytest.approx(total)
        assert report.final_quanta == state.u

    @pytest.mark.parametrize("start_belief, expected", [(0.0, 0), (1.0, 1)])
    def test_first_slot_channel_follows_start_belief(self, start_belief, expected):
        params = make_params(lambda1=0.7, lambda0=0.2, k=2, b_max=1, q=0.0)
        policy = GreedyPolicy(params)
        for seed in range(200):
            report, _ = run_policy(params, policy, 2, 0, seed, start_belief=start_belief)
            assert report.count_transmit == 1
            assert report.successful_transmissions == expected

    def test_first_slot_success_rate(self):
        params = make_params(lambda1=0.7, lambda0=0.2, k=2, b_max=1, q=0.0)
        policy = GreedyPolicy(params)
        runs = 400
        successes = sum(
            run_policy(params, policy, 2, 0, seed, start_belief=0.3)[0].successful_transmissions
            for seed in range(runs)
        )
        assert abs(successes / runs - 0.3) <= 4.0 * np.sqrt(0.3 * 0.7 / runs)

    def test_belief_matches_forward_filter(self, small_params):
        """跟踪的信念与两状态隐马尔可夫前向滤波一致，且对真实信道校准"""
        grid = BeliefGrid.build(small_params, 40)
        policy = ValueTablePolicy(PolicyKind.OPTIMAL, small_params, grid, value_iteration(small_params, grid, 1e-7))
        start_belief = 0.05
        _, trace = run_policy(small_params, policy, 3000, 0, 5, start_belief=start_belief, record_trace=True)

        lam0, lam1 = small_params.lambda0, small_params.lambda1
        transition = np.array([[1.0 - lam0, lam0], [1.0 - lam1, lam1]])
        predicted = np.array([1.0 - start_belief, start_belief])
        for t in range(3000):
            assert trace["belief"][t] == pytest.approx(predicted[1], abs=1e-12)
            if trace["action"][t] in ("O", "T"):
                posterior = np.eye(2)[trace["channel"][t]]
            else:
                posterior = predicted
            predicted = posterior @ transition

        belief = np.array(trace["belief"])
        channel = np.array(trace["channel"])
        z = np.sum(channel - belief) / np.sqrt(np.sum(belief * (1.0 - belief)))
        assert abs(z) <= 4.0

    def test_invalid_horizon(self, small_params):
        with pytest.raises(InvalidParameters):
            run_policy(small_params, GreedyPolicy(small_params), 100, 100, seed=0)


class TestStatistics:
    """置信区间与副本"""

    def test_half_width(self):
        samples = [1.0, 2.0, 3.0, 4.0]
        sem = np.std(samples, ddof=1) / 2.0
        assert confidence_half_width(samples, 0.95) == pytest.approx(1.959964 * sem, rel=1e-5)

    def test_degenerate_samples(self):
        assert confidence_half_width([2.0]) == 0.0
        assert confidence_half_width([2.0, 2.0, 2.0]) == 0.0

    def test_replications(self, small_params):
        sequence = derive_seed_sequence(7, "sweep")
        summary, reports = run_replications(small_params, GreedyPolicy(small_params), 2000, 100, 4, sequence)
        assert len(reports) == 4
        assert summary.replications == 4
        assert summary.throughput == pytest.approx(np.mean([r.throughput for r in reports]))
        assert summary.ci_half_width >= 0.0

    def test_truncation_horizon(self):
        assert truncation_horizon(0.0) == 1
        h = truncation_horizon(0.98, 1e-10)
        assert 0.98 ** (h - 1) < 1e-10
        assert 0.98 ** (h - 3) >= 1e-10

    def test_seed_components_independent(self):
        a = derive_seed_sequence(0, "simulate").generate_state(2)
        b = derive_seed_sequence(0, "sweep").generate_state(2)
        assert not np.array_equal(a, b)
        with pytest.raises(ValueError):
            derive_seed_sequence(0, "unknown")


class TestSweep:
    """吞吐量扫描"""

    def test_small_sweep_ordering_and_determinism(self, small_params):
        kwargs = dict(
            q_values=[0.2, 0.6], grid_intervals=40, epsilon=1e-6,
            horizon=20_000, warmup=500, replications=4, seed=9, max_workers=1
        )
        first = sweep_throughput(small_params, **kwargs)
        second = sweep_throughput(small_params, **kwargs)
        assert first == second
        assert [(p.q, p.policy) for p in first] == [
            (0.2, PolicyKind.OPTIMAL), (0.2, PolicyKind.SINGLE), (0.2, PolicyKind.GREEDY),
            (0.6, PolicyKind.OPTIMAL), (0.6, PolicyKind.SINGLE), (0.6, PolicyKind.GREEDY),
        ]

    def test_zero_harvest_near_zero(self, small_params):
        points = sweep_throughput(
            small_params, [0.0], 20, 1e-6, horizon=10_000, warmup=100, replications=2, seed=0, max_workers=1
        )
        bound = small_params.b_max * small_params.rate_r / (10_000 - 100)
        assert all(point.throughput_mean <= bound for point in points)

    def test_invalid_q(self, small_params):
        with pytest.raises(InvalidParameters):
            sweep_throughput(small_params, [1.5], 20, 1e-6, 1000, 10, 1, 0)

    def test_build_policies(self, small_params):
        policies = build_policies(small_params, 20, 1e-6)
        assert set(policies) == {PolicyKind.OPTIMAL, PolicyKind.SINGLE, PolicyKind.GREEDY}

    @pytest.mark.slow
    def test_throughput_ordering_and_gap_shape(self, throughput_params):
        q_values = PRESETS["throughput"]["q_values"]
        points = sweep_throughput(
            throughput_params, q_values, 200, 2e-6, horizon=100_000, warmup=5_000, replications=3, seed=0
        )
        by_q = {}
        for point in points:
            by_q.setdefault(point.q, {})[point.policy] = point
        assert sorted(by_q) == q_values

        gaps = []
        for q in q_values:
            group = by_q[q]
            optimal, single, greedy = group[PolicyKind.OPTIMAL], group[PolicyKind.SINGLE], group[PolicyKind.GREEDY]
            assert optimal.throughput_mean + optimal.ci_half_width >= single.throughput_mean - single.ci_half_width
            assert single.throughput_mean + single.ci_half_width >= greedy.throughput_mean - greedy.ci_half_width
            gaps.append(optimal.throughput_mean - single.throughput_mean)

        # 最优与单阈值的差距在中间的 q 处最大
        peak = int(np.argmax(gaps))
        assert 0 < peak < len(q_values) - 1


class TestDiscountedEpisodes:
    """折扣回报蒙特卡洛与求解值对比"""

    @pytest.mark.slow
    def test_reference_agreement(self, reference_solution):
        params, grid, table, _ = reference_solution
        policy = ValueTablePolicy(PolicyKind.OPTIMAL, params, grid, table)
        report = run_discounted_episodes(params, policy, table, grid, 10_000, derive_seed_sequence(0, "episodes"))
        assert report.episodes == 10_000
        assert report.z_score <= 3.0
