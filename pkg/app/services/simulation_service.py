import time
from abc import ABC, abstractmethod
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm
from tqdm.auto import tqdm

from app.core.config import settings
from app.core.exceptions import BeliefChainTooLongError, InfeasibleActionError, InvalidParameters
from app.models.channel_model import (
    belief_update_defer,
    can_sense,
    can_transmit,
    channel_step,
    channel_step_array,
    draw_channel,
    harvest,
    harvest_array,
    stationary_belief,
    validate_battery
)
from app.models.schemas import (
    ACTION_ORDER,
    Action,
    ChannelState,
    EpisodeReport,
    ModelParams,
    Observation,
    PolicyKind,
    SimReport,
    SweepPoint
)
from app.services.bellman_service import (
    BeliefGrid,
    ValueTable,
    compute_action_values,
    feasible_mask,
    interpolate_value,
    value_iteration
)
from app.services.policy_service import (
    greedy_action,
    select_actions,
    solve_single_threshold_baseline,
    tie_tolerance
)

logger = logging.getLogger(__name__)

_DEFER, _SENSE, _TRANSMIT = 0, 1, 2

# 子种子派生顺序
SEED_COMPONENTS = ("simulate", "sweep", "episodes", "verify")


def derive_seed_sequence(seed: int, component: str) -> np.random.SeedSequence:
    """从运行种子派生某个组件的 SeedSequence"""
    children = np.random.SeedSequence(seed).spawn(len(SEED_COMPONENTS))
    return children[SEED_COMPONENTS.index(component)]


@dataclass
class SimState:
    """仿真状态；true_channel 是上一时隙的信道，策略不可见

    true_channel 为 None 表示尚未开始：首个时隙的信道直接按当前信念抽取，
    保证该时隙信道为好的概率恰为 belief。
    """
    true_channel: Optional[ChannelState]
    u: int
    belief: float
    slot: int = 0


def step(
    params: ModelParams,
    state: SimState,
    action: Action,
    draws: Tuple[float, float]
) -> Tuple[SimState, float, Observation]:
    """推进一个时隙

    draws 依次为信道抽样和收集抽样。时隙开始时信道先转移，动作作用于新信道，
    时隙结束时按概率 q 收集一个能量单位。
    """
    k = params.k
    if action == Action.TRANSMIT and not can_transmit(params, state.u):
        raise InfeasibleActionError(action.value, state.u, k)
    if action == Action.SENSE and not can_sense(state.u):
        raise InfeasibleActionError(action.value, state.u, k)

    channel_draw, harvest_draw = draws
    if state.true_channel is None:
        g = draw_channel(state.belief, channel_draw)
    else:
        g = channel_step(params, state.true_channel, channel_draw)
    good = g == ChannelState.GOOD
    u = state.u
    reward = 0.0

    if action == Action.DEFER:
        observation = Observation.NONE
        belief = belief_update_defer(params, state.belief)
    elif action == Action.SENSE:
        u -= 1
        if good and can_transmit(params, state.u):
            u -= k - 1
            reward = (1.0 - params.tau) * params.rate_r
        observation = Observation.SENSED_GOOD if good else Observation.SENSED_BAD
        belief = params.lambda1 if good else params.lambda0
    else:
        u -= k
        if good:
            reward = params.rate_r
        observation = Observation.ACK if good else Observation.NACK
        belief = params.lambda1 if good else params.lambda0

    if harvest_draw < params.q:
        u = harvest(params, u)

    return SimState(true_channel=g, u=u, belief=belief, slot=state.slot + 1), reward, observation


@dataclass(frozen=True)
class BeliefChain:
    """轨迹可能到达的全部信念

    λ0、λ1 与起始信念各自的 J 迭代序列，直到浮点值重复，或与下一步之差
    不超过 settle_tolerance（此时接到平稳信念节点，该节点自环）。
    """
    values: np.ndarray
    next_defer: np.ndarray
    index_lambda0: int
    index_lambda1: int
    index_start: int


def reachable_beliefs(
    params: ModelParams,
    start: float,
    max_size: Optional[int] = None,
    settle_tolerance: Optional[float] = None
) -> BeliefChain:
    """枚举可达信念；超过 max_size 时抛出 BeliefChainTooLongError"""
    if max_size is None:
        max_size = settings.max_belief_chain
    if settle_tolerance is None:
        settle_tolerance = settings.belief_settle_tolerance

    values: List[float] = []
    next_defer: List[int] = []
    index: Dict[float, int] = {}

    def add(value: float) -> int:
        if value not in index:
            if len(values) >= max_size:
                raise BeliefChainTooLongError(max_size, params.lambda1, params.lambda0)
            index[value] = len(values)
            values.append(value)
            next_defer.append(-1)
        return index[value]

    for seed in (params.lambda0, params.lambda1, start):
        i = add(seed)
        while next_defer[i] == -1:
            p_next = belief_update_defer(params, values[i])
            if p_next != values[i] and abs(p_next - values[i]) <= settle_tolerance:
                fixed = add(stationary_belief(params))
                if next_defer[fixed] == -1:
                    next_defer[fixed] = fixed
                if fixed != i:
                    next_defer[i] = fixed
                break
            j = add(p_next)
            next_defer[i] = j
            i = j

    return BeliefChain(
        values=np.array(values),
        next_defer=np.array(next_defer, dtype=np.int64),
        index_lambda0=index[params.lambda0],
        index_lambda1=index[params.lambda1],
        index_start=index[start]
    )


class SchedulingPolicy(ABC):
    """策略基类：给出 (电池, 信念) 上的动作"""

    kind: PolicyKind

    @abstractmethod
    def decide(self, u: int, p: float) -> Action:
        """单点决策"""

    @abstractmethod
    def lookup_table(self, params: ModelParams, chain: BeliefChain) -> np.ndarray:
        """在 (电池, 可达信念) 上预先求出动作下标，形状 (U, S)"""


class ValueTablePolicy(SchedulingPolicy):
    """按插值动作值的 argmax 决策（最优策略与单阈值策略）"""

    def __init__(self, kind: PolicyKind, params: ModelParams, grid: BeliefGrid, table: ValueTable):
        self.kind = kind
        self.params = params
        self.grid = grid
        self.table = table
        self._mask = feasible_mask(params, table.actions)
        self._tolerance = tie_tolerance(params)

    def _actions_on(self, beliefs: np.ndarray) -> np.ndarray:
        action_values = compute_action_values(
            self.params, self.grid, self.table.values, self._mask, beliefs=beliefs
        )
        return select_actions(action_values, self._tolerance)

    def decide(self, u: int, p: float) -> Action:
        return ACTION_ORDER[int(self._actions_on(np.array([p]))[u, 0])]

    def lookup_table(self, params: ModelParams, chain: BeliefChain) -> np.ndarray:
        return self._actions_on(chain.values)


class GreedyPolicy(SchedulingPolicy):
    """有能量即发送"""

    kind = PolicyKind.GREEDY

    def __init__(self, params: ModelParams):
        self.params = params

    def decide(self, u: int, p: float) -> Action:
        return greedy_action(self.params, u)

    def lookup_table(self, params: ModelParams, chain: BeliefChain) -> np.ndarray:
        table = np.zeros((params.n_levels, len(chain.values)), dtype=np.int8)
        table[params.k:, :] = _TRANSMIT
        return table


@dataclass
class BatchResult:
    """一批并行副本的原始统计（每个数组长度为副本数）"""
    total_bits: np.ndarray
    discounted_reward: np.ndarray
    counts: np.ndarray
    successful_transmissions: np.ndarray
    successful_sense_transmissions: np.ndarray
    quanta_spent: np.ndarray
    quanta_harvested: np.ndarray
    initial_quanta: np.ndarray
    final_quanta: np.ndarray
    trace: Optional[Dict[str, list]] = None


def simulate_batch(
    params: ModelParams,
    lookup: np.ndarray,
    chain: BeliefChain,
    generators: Sequence[np.random.Generator],
    horizon: int,
    warmup: int = 0,
    start_u: Optional[int] = None,
    record_trace: bool = False
) -> BatchResult:
    """多个独立副本同步推进（逐时隙向量化）

    每个副本使用自己的生成器，每个时隙依次抽信道、收集两个数。首个时隙的信道
    直接按起始信念抽取，之后按马尔可夫链转移。
    """
    n = len(generators)
    k, top = params.k, params.max_quanta
    start_u = top if start_u is None else start_u
    validate_battery(params, start_u)
    if not (0 <= warmup < horizon):
        raise InvalidParameters(f"need 0 <= warmup < horizon, got warmup={warmup} horizon={horizon}")

    sense_reward = (1.0 - params.tau) * params.rate_r
    p_start = chain.values[chain.index_start]

    u = np.full(n, start_u, dtype=np.int64)
    s = np.full(n, chain.index_start, dtype=np.int64)
    g = np.zeros(n, dtype=np.int64)

    total_bits = np.zeros(n)
    discounted = np.zeros(n)
    counts = np.zeros((n, len(ACTION_ORDER)), dtype=np.int64)
    ok_transmit = np.zeros(n, dtype=np.int64)
    ok_sense = np.zeros(n, dtype=np.int64)
    spent = np.zeros(n, dtype=np.int64)
    harvested = np.zeros(n, dtype=np.int64)
    trace = {"slot": [], "u": [], "belief": [], "action": [], "channel": [], "reward": []} if record_trace else None

    codes = np.arange(len(ACTION_ORDER))
    discount = 1.0
    chunk = settings.sim_chunk_slots
    for chunk_start in range(0, horizon, chunk):
        length = min(chunk, horizon - chunk_start)
        draws = np.stack([gen.random((length, 2)) for gen in generators])

        for offset in range(length):
            t = chunk_start + offset
            if t == 0:
                g = (draws[:, offset, 0] < p_start).astype(np.int64)
            else:
                g = channel_step_array(params, g, draws[:, offset, 0])
            good = g == 1
            a = lookup[u, s]

            is_t = a == _TRANSMIT
            is_o = a == _SENSE
            o_full = is_o & can_transmit(params, u)

            reward = np.where(is_t & good, params.rate_r, 0.0)
            reward = np.where(o_full & good, sense_reward, reward)

            cost = np.where(is_t, k, 0) + np.where(is_o, 1, 0) + np.where(o_full & good, k - 1, 0)
            before = u - cost
            harvest_hit = draws[:, offset, 1] < params.q
            after = harvest_array(params, before, harvest_hit)

            if record_trace:
                trace["slot"].append(t)
                trace["u"].append(int(u[0]))
                trace["belief"].append(float(chain.values[s[0]]))
                trace["action"].append(ACTION_ORDER[int(a[0])].value)
                trace["channel"].append(int(g[0]))
                trace["reward"].append(float(reward[0]))

            observed = is_t | is_o
            s = np.where(
                observed,
                np.where(good, chain.index_lambda1, chain.index_lambda0),
                chain.next_defer[s]
            )

            counts += a[:, None] == codes
            spent += cost
            harvested += after - before
            ok_transmit += is_t & good
            ok_sense += o_full & good
            u = after

            discounted += discount * reward
            discount *= params.beta
            if t >= warmup:
                total_bits += reward

    return BatchResult(
        total_bits=total_bits,
        discounted_reward=discounted,
        counts=counts,
        successful_transmissions=ok_transmit,
        successful_sense_transmissions=ok_sense,
        quanta_spent=spent,
        quanta_harvested=harvested,
        initial_quanta=np.full(n, start_u, dtype=np.int64),
        final_quanta=u,
        trace=trace
    )


def _reports_from_batch(
    batch: BatchResult,
    kind: PolicyKind,
    params: ModelParams,
    horizon: int,
    warmup: int,
    seeds: Sequence[Optional[int]]
) -> List[SimReport]:
    """批量结果拆分为逐副本报告"""
    slots = horizon - warmup
    reports = []
    for i in range(len(batch.total_bits)):
        reports.append(SimReport(
            policy=kind,
            q=params.q,
            total_bits=float(batch.total_bits[i]),
            slots=slots,
            throughput=float(batch.total_bits[i]) / slots,
            discounted_reward=float(batch.discounted_reward[i]),
            count_defer=int(batch.counts[i, _DEFER]),
            count_sense=int(batch.counts[i, _SENSE]),
            count_transmit=int(batch.counts[i, _TRANSMIT]),
            successful_transmissions=int(batch.successful_transmissions[i]),
            successful_sense_transmissions=int(batch.successful_sense_transmissions[i]),
            quanta_spent=int(batch.quanta_spent[i]),
            quanta_harvested=int(batch.quanta_harvested[i]),
            initial_quanta=int(batch.initial_quanta[i]),
            final_quanta=int(batch.final_quanta[i]),
            seed=seeds[i]
        ))
    return reports


def confidence_half_width(samples: Sequence[float], confidence: Optional[float] = None) -> float:
    """正态近似置信区间半宽"""
    if confidence is None:
        confidence = settings.confidence_level
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < 2:
        return 0.0
    sem = float(np.std(samples, ddof=1) / np.sqrt(samples.size))
    if sem == 0.0:
        return 0.0
    lower, upper = norm.interval(confidence, loc=float(np.mean(samples)), scale=sem)
    return float((upper - lower) / 2.0)


def aggregate_reports(reports: Sequence[SimReport]) -> SimReport:
    """多副本汇总：吞吐量与折扣回报取均值，计数求和"""
    throughputs = [r.throughput for r in reports]
    first = reports[0]
    return replace_report(
        first,
        total_bits=float(sum(r.total_bits for r in reports)),
        slots=sum(r.slots for r in reports),
        throughput=float(np.mean(throughputs)),
        discounted_reward=float(np.mean([r.discounted_reward for r in reports])),
        count_defer=sum(r.count_defer for r in reports),
        count_sense=sum(r.count_sense for r in reports),
        count_transmit=sum(r.count_transmit for r in reports),
        successful_transmissions=sum(r.successful_transmissions for r in reports),
        successful_sense_transmissions=sum(r.successful_sense_transmissions for r in reports),
        quanta_spent=sum(r.quanta_spent for r in reports),
        quanta_harvested=sum(r.quanta_harvested for r in reports),
        initial_quanta=sum(r.initial_quanta for r in reports),
        final_quanta=sum(r.final_quanta for r in reports),
        replications=len(reports),
        ci_half_width=confidence_half_width(throughputs)
    )


def replace_report(report: SimReport, **changes) -> SimReport:
    return report.model_copy(update=changes)


def run_policy(
    params: ModelParams,
    policy: SchedulingPolicy,
    horizon: int,
    warmup: int,
    seed: int,
    start_u: Optional[int] = None,
    start_belief: Optional[float] = None,
    record_trace: bool = False
) -> Tuple[SimReport, Optional[Dict[str, list]]]:
    """单次仿真：默认满电、平稳信念、平稳信道起步"""
    if start_belief is None:
        start_belief = stationary_belief(params)
    chain = reachable_beliefs(params, start_belief)
    lookup = policy.lookup_table(params, chain)
    batch = simulate_batch(
        params, lookup, chain, [np.random.default_rng(derive_seed_sequence(seed, "simulate"))],
        horizon, warmup, start_u, record_trace
    )
    report = _reports_from_batch(batch, policy.kind, params, horizon, warmup, [seed])[0]
    return report, batch.trace


def run_replications(
    params: ModelParams,
    policy: SchedulingPolicy,
    horizon: int,
    warmup: int,
    replications: int,
    seed_sequence: np.random.SeedSequence,
    start_u: Optional[int] = None
) -> Tuple[SimReport, List[SimReport]]:
    """独立副本仿真，返回汇总报告和逐副本报告"""
    start_belief = stationary_belief(params)
    chain = reachable_beliefs(params, start_belief)
    lookup = policy.lookup_table(params, chain)
    children = seed_sequence.spawn(replications)
    generators = [np.random.default_rng(child) for child in children]
    batch = simulate_batch(params, lookup, chain, generators, horizon, warmup, start_u)
    reports = _reports_from_batch(batch, policy.kind, params, horizon, warmup, [None] * replications)
    return aggregate_reports(reports), reports


def truncation_horizon(beta: float, truncation: Optional[float] = None) -> int:
    """β^t 首次低于截断阈值的时隙数"""
    if truncation is None:
        truncation = settings.discount_truncation
    if beta == 0.0:
        return 1
    return int(np.ceil(np.log(truncation) / np.log(beta))) + 1


def run_discounted_episodes(
    params: ModelParams,
    policy: SchedulingPolicy,
    table: ValueTable,
    grid: BeliefGrid,
    episodes: int,
    seed_sequence: np.random.SeedSequence
) -> EpisodeReport:
    """从 (B_max, p*) 出发的折扣回报蒙特卡洛估计，与求解值对比"""
    start_belief = stationary_belief(params)
    horizon = truncation_horizon(params.beta)
    chain = reachable_beliefs(params, start_belief)
    lookup = policy.lookup_table(params, chain)
    generators = [np.random.default_rng(child) for child in seed_sequence.spawn(episodes)]
    batch = simulate_batch(params, lookup, chain, generators, horizon, 0)

    rewards = batch.discounted_reward
    std_error = float(np.std(rewards, ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    solver_value = interpolate_value(table, grid, params.max_quanta, start_belief)
    return EpisodeReport(
        episodes=episodes,
        horizon=horizon,
        mean=float(np.mean(rewards)),
        std_error=std_error,
        solver_value=solver_value
    )


def build_policies(
    params: ModelParams,
    grid_intervals: int,
    epsilon: float,
    max_iterations: Optional[int] = None
) -> Dict[PolicyKind, SchedulingPolicy]:
    """为给定参数求解最优与单阈值策略，并构造 greedy"""
    grid = BeliefGrid.build(params, grid_intervals)
    optimal_table = value_iteration(params, grid, epsilon, max_iterations)
    single_table, _ = solve_single_threshold_baseline(params, grid, epsilon, max_iterations)
    return {
        PolicyKind.OPTIMAL: ValueTablePolicy(PolicyKind.OPTIMAL, params, grid, optimal_table),
        PolicyKind.SINGLE: ValueTablePolicy(PolicyKind.SINGLE, params, grid, single_table),
        PolicyKind.GREEDY: GreedyPolicy(params)
    }


def _sweep_point(
    params: ModelParams,
    grid_intervals: int,
    epsilon: float,
    max_iterations: Optional[int],
    horizon: int,
    warmup: int,
    replications: int,
    seed_sequence: np.random.SeedSequence
) -> List[SweepPoint]:
    """单个 q 点：求解并评估三种策略"""
    start_time = time.time()
    policies = build_policies(params, grid_intervals, epsilon, max_iterations)
    policy_seeds = seed_sequence.spawn(len(policies))

    points = []
    for (kind, policy), child in zip(policies.items(), policy_seeds):
        summary, _ = run_replications(params, policy, horizon, warmup, replications, child)
        points.append(SweepPoint(
            q=params.q,
            policy=kind,
            throughput_mean=summary.throughput,
            ci_half_width=summary.ci_half_width,
            replications=replications,
            horizon=horizon
        ))

    elapsed = round(time.time() - start_time, 2)
    logger.info(
        f"Sweep point q={params.q}: "
        + ", ".join(f"{p.policy.value}={p.throughput_mean:.4f}±{p.ci_half_width:.4f}" for p in points)
        + f" ({elapsed}s)"
    )
    return points


def sweep_throughput(
    params_template: ModelParams,
    q_values: Sequence[float],
    grid_intervals: int,
    epsilon: float,
    horizon: int,
    warmup: int,
    replications: int,
    seed: int,
    max_iterations: Optional[int] = None,
    max_workers: Optional[int] = None
) -> List[SweepPoint]:
    """吞吐量随 q 变化的三策略对比"""
    for q in q_values:
        if not (0.0 <= q <= 1.0):
            raise InvalidParameters(f"q value {q} outside [0, 1]")
    if max_workers is None:
        max_workers = settings.max_workers

    point_seeds = derive_seed_sequence(seed, "sweep").spawn(len(q_values))
    jobs = [
        (params_template.with_q(q), grid_intervals, epsilon, max_iterations, horizon, warmup, replications, child)
        for q, child in zip(q_values, point_seeds)
    ]

    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        futures = [executor.submit(_sweep_point, *job) for job in jobs]
        results = [
            future.result()
            for future in tqdm(futures, desc="sweep", disable=not settings.show_progress)
        ]

    return [point for points in results for point in points]
