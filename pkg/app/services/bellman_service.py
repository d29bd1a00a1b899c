import time
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import ConvergenceError, InfeasibleActionError, InvalidParameters
from app.models.channel_model import (
    belief_update_defer,
    belief_update_defer_array,
    can_sense,
    can_transmit,
    harvest
)
from app.models.schemas import ACTION_ORDER, Action, ModelParams

logger = logging.getLogger(__name__)

ALL_ACTIONS: Tuple[Action, ...] = (Action.DEFER, Action.SENSE, Action.TRANSMIT)
DEFER_TRANSMIT: Tuple[Action, ...] = (Action.DEFER, Action.TRANSMIT)



@dataclass(frozen=True)
class BeliefGrid:
    """信念轴 [0, 1] 的离散化

    均匀网格加上精确的 λ0、λ1 节点；J(p) 在网格外的插值下标和权重预先计算。
    """
    nodes: np.ndarray
    intervals: int
    index_lambda0: int
    index_lambda1: int
    defer_lo: np.ndarray
    defer_weight: np.ndarray

    @classmethod
    def build(
        cls,
        params: ModelParams,
        intervals: Optional[int] = None,
        tolerance: Optional[float] = None
    ) -> "BeliefGrid":
        """构造网格"""
        if intervals is None:
            intervals = settings.default_grid_intervals
        if tolerance is None:
            tolerance = settings.grid_dedup_tolerance
        if intervals < 1:
            raise InvalidParameters(f"grid intervals must be >= 1, got {intervals}")

        nodes = list(np.linspace(0.0, 1.0, intervals + 1))
        for lam in (params.lambda0, params.lambda1):
            nearest = min(range(len(nodes)), key=lambda i: abs(nodes[i] - lam))
            if abs(nodes[nearest] - lam) <= tolerance:
                # 端点保持 0/1，内部节点直接替换为精确的 λ
                if 0 < nearest < len(nodes) - 1:
                    nodes[nearest] = lam
            else:
                nodes.append(lam)
        nodes = np.array(sorted(nodes), dtype=np.float64)

        # 容差内去重
        keep = np.concatenate(([True], np.diff(nodes) > tolerance))
        nodes = nodes[keep]

        index_lambda0 = int(np.argmin(np.abs(nodes - params.lambda0)))
        index_lambda1 = int(np.argmin(np.abs(nodes - params.lambda1)))

        lo, weight = _bracket(nodes, belief_update_defer_array(params, nodes))
        return cls(
            nodes=nodes,
            intervals=intervals,
            index_lambda0=index_lambda0,
            index_lambda1=index_lambda1,
            defer_lo=lo,
            defer_weight=weight
        )

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def max_spacing(self) -> float:
        return float(np.max(np.diff(self.nodes)))

    def describe(self) -> str:
        """网格描述（用于溯源）"""
        return f"uniform({self.intervals})+lambda nodes, {self.size} nodes, max spacing {self.max_spacing:.3g}"


def _bracket(nodes: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """返回 x 所在区间的左端下标和线性插值权重"""
    hi = np.searchsorted(nodes, x, side="right")
    hi = np.clip(hi, 1, len(nodes) - 1)
    lo = hi - 1
    denom = nodes[hi] - nodes[lo]
    weight = np.where(denom > 0, (x - nodes[lo]) / denom, 0.0)
    weight = np.clip(weight, 0.0, 1.0)
    return lo, weight


@dataclass
class ValueTable:
    """值函数表 V(u, p) 与各动作值 V_D / V_O / V_T

    action_values 的最后一维按 D、O、T 排列，不可行动作为 NaN。
    """
    values: np.ndarray
    action_values: np.ndarray
    iteration_count: int = 0
    final_sup_norm_delta: float = float("inf")
    epsilon: Optional[float] = None
    actions: Tuple[Action, ...] = field(default=ALL_ACTIONS)

    @classmethod
    def zeros(cls, params: ModelParams, grid: BeliefGrid, actions: Sequence[Action] = ALL_ACTIONS) -> "ValueTable":
        """V ≡ 0 初始表"""
        shape = (params.n_levels, grid.size)
        values = np.zeros(shape)
        action_values = np.full(shape + (len(ACTION_ORDER),), np.nan)
        return cls(values=values, action_values=action_values, actions=tuple(actions))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def feasible_mask(params: ModelParams, actions: Iterable[Action] = ALL_ACTIONS) -> np.ndarray:
    """每个电池量子上各动作是否可行，形状 (U, 3)"""
    u = np.arange(params.n_levels)
    allowed = set(actions)
    mask = np.zeros((params.n_levels, len(ACTION_ORDER)), dtype=bool)
    mask[:, 0] = Action.DEFER in allowed
    mask[:, 1] = can_sense(u) & (Action.SENSE in allowed)
    mask[:, 2] = can_transmit(params, u) & (Action.TRANSMIT in allowed)
    return mask


def _check_feasible(params: ModelParams, u: int, action: Action) -> None:
    """不可行动作抛出异常"""
    if action == Action.TRANSMIT and not can_transmit(params, u):
        raise InfeasibleActionError(action.value, u, params.k)
    if action == Action.SENSE and not can_sense(u):
        raise InfeasibleActionError(action.value, u, params.k)


def expected_reward(params: ModelParams, u: int, p: float, action: Action) -> float:
    """单时隙期望回报（比特）"""
    _check_feasible(params, u, action)
    if action == Action.TRANSMIT:
        return p * params.rate_r
    if action == Action.SENSE and u >= params.k:
        return (1.0 - params.tau) * p * params.rate_r
    return 0.0


def interpolate_value(table: ValueTable, grid: BeliefGrid, u: int, p: float) -> float:
    """V(u, ·) 在网格节点间线性插值，节点处精确"""
    if not (0.0 <= p <= 1.0):
        raise InvalidParameters(f"belief {p} outside [0, 1]")
    return float(np.interp(p, grid.nodes, table.values[u]))


def action_value_defer(params: ModelParams, table: ValueTable, grid: BeliefGrid, u: int, p: float) -> float:
    """V_D(u, p)"""
    p_next = belief_update_defer(params, p)
    up = harvest(params, u)
    return params.beta * (
        params.q * interpolate_value(table, grid, up, p_next)
        + (1.0 - params.q) * interpolate_value(table, grid, u, p_next)
    )


def action_value_sense(params: ModelParams, table: ValueTable, grid: BeliefGrid, u: int, p: float) -> float:
    """V_O(u, p)，分 u >= k（感知后可发送）与 1 <= u < k（只感知）两种情况"""
    _check_feasible(params, u, Action.SENSE)
    k, q, beta = params.k, params.q, params.beta
    v = table.values
    i0, i1 = grid.index_lambda0, grid.index_lambda1

    if u >= k:
        good = (1.0 - params.tau) * params.rate_r + beta * (q * v[u, i1] + (1.0 - q) * v[u - k, i1])
        bad = beta * (q * v[harvest(params, u - 1), i0] + (1.0 - q) * v[u - 1, i0])
        return float(p * good + (1.0 - p) * bad)

    up = harvest(params, u - 1)
    return float(beta * (
        q * p * v[up, i1]
        + q * (1.0 - p) * v[up, i0]
        + (1.0 - q) * p * v[u - 1, i1]
        + (1.0 - q) * (1.0 - p) * v[u - 1, i0]
    ))


def action_value_transmit(params: ModelParams, table: ValueTable, grid: BeliefGrid, u: int, p: float) -> float:
    """V_T(u, p)"""
    _check_feasible(params, u, Action.TRANSMIT)
    k, q, beta = params.k, params.q, params.beta
    v = table.values
    i0, i1 = grid.index_lambda0, grid.index_lambda1

    good = params.rate_r + beta * (q * v[u, i1] + (1.0 - q) * v[u - k, i1])
    bad = beta * (q * v[u, i0] + (1.0 - q) * v[u - k, i0])
    return float(p * good + (1.0 - p) * bad)


def action_values_at(params: ModelParams, table: ValueTable, grid: BeliefGrid, u: int, p: float) -> np.ndarray:
    """任意信念 p 处的三个动作值（不可行为 NaN，受限动作集同样置 NaN）"""
    out = np.full(len(ACTION_ORDER), np.nan)
    allowed = set(table.actions)
    out[0] = action_value_defer(params, table, grid, u, p)
    if u >= 1 and Action.SENSE in allowed:
        out[1] = action_value_sense(params, table, grid, u, p)
    if u >= params.k and Action.TRANSMIT in allowed:
        out[2] = action_value_transmit(params, table, grid, u, p)
    return out


def compute_action_values(
    params: ModelParams,
    grid: BeliefGrid,
    values: np.ndarray,
    mask: Optional[np.ndarray] = None,
    beliefs: Optional[np.ndarray] = None
) -> np.ndarray:
    """同步计算三个动作值，形状 (U, N, 3)

    beliefs 缺省为网格节点；给出任意信念数组时形状为 (U, len(beliefs), 3)。
    """
    if mask is None:
        mask = feasible_mask(params)
    k, q, beta, rate = params.k, params.q, params.beta, params.rate_r
    top = params.max_quanta
    u = np.arange(params.n_levels)

    if beliefs is None:
        beliefs = grid.nodes
        lo, w = grid.defer_lo, grid.defer_weight
    else:
        beliefs = np.asarray(beliefs, dtype=np.float64)
        lo, w = _bracket(grid.nodes, belief_update_defer_array(params, beliefs))
    p = beliefs[None, :]

    out = np.full((params.n_levels, len(beliefs), len(ACTION_ORDER)), np.nan)

    # D：J(p) 落在网格外，线性插值
    v_defer = values[:, lo] * (1.0 - w) + values[:, lo + 1] * w
    up = np.minimum(u + k, top)
    out[:, :, 0] = beta * (q * v_defer[up] + (1.0 - q) * v_defer)

    v1 = values[:, grid.index_lambda1]
    v0 = values[:, grid.index_lambda0]

    # u >= k：T 和可发送的 O
    ut = u[k:]
    if ut.size:
        cont_good = beta * (q * v1[ut] + (1.0 - q) * v1[ut - k])
        cont_bad_t = beta * (q * v0[ut] + (1.0 - q) * v0[ut - k])
        cont_bad_o = beta * (q * v0[np.minimum(ut - 1 + k, top)] + (1.0 - q) * v0[ut - 1])
        out[k:, :, 2] = p * (rate + cont_good[:, None]) + (1.0 - p) * cont_bad_t[:, None]
        out[k:, :, 1] = p * ((1.0 - params.tau) * rate + cont_good[:, None]) + (1.0 - p) * cont_bad_o[:, None]

    # 1 <= u < k：只感知
    us = u[1:k]
    if us.size:
        up_s = np.minimum(us - 1 + k, top)
        good = beta * (q * v1[up_s] + (1.0 - q) * v1[us - 1])
        bad = beta * (q * v0[up_s] + (1.0 - q) * v0[us - 1])
        out[1:k, :, 1] = p * good[:, None] + (1.0 - p) * bad[:, None]

    out[~np.broadcast_to(mask[:, None, :], out.shape)] = np.nan
    return out


def _stopping_target(params: ModelParams, epsilon: float) -> float:
    """ε 最优停止阈值 ε(1-β)/(2β)；β=0 时要求精确不动点"""
    if epsilon <= 0:
        raise InvalidParameters(f"epsilon must be positive, got {epsilon}")
    if params.beta == 0.0:
        return 0.0
    return epsilon * (1.0 - params.beta) / (2.0 * params.beta)


def bellman_sweep(params: ModelParams, grid: BeliefGrid, table_in: ValueTable) -> Tuple[ValueTable, float]:
    """一次同步 Bellman 更新，返回新表和上确界范数变化量"""
    mask = feasible_mask(params, table_in.actions)
    action_values = compute_action_values(params, grid, table_in.values, mask)
    values = np.nanmax(action_values, axis=2)
    delta = float(np.max(np.abs(values - table_in.values)))
    table_out = replace(
        table_in,
        values=values,
        action_values=action_values,
        iteration_count=table_in.iteration_count + 1,
        final_sup_norm_delta=delta
    )
    return table_out, delta


def value_iteration(
    params: ModelParams,
    grid: BeliefGrid,
    epsilon: float,
    max_iterations: Optional[int] = None,
    actions: Sequence[Action] = ALL_ACTIONS
) -> ValueTable:
    """从 V ≡ 0 出发迭代 Bellman 算子直到 ε 最优"""
    if max_iterations is None:
        max_iterations = settings.default_max_iterations
    target = _stopping_target(params, epsilon)
    mask = feasible_mask(params, actions)
    labels = "".join(a.value for a in actions)

    logger.info(
        f"Value iteration started: actions={labels} k={params.k} b_max={params.b_max} "
        f"beta={params.beta} q={params.q} nodes={grid.size} target={target:.3e}"
    )
    start_time = time.time()

    values = np.zeros((params.n_levels, grid.size))
    delta = float("inf")
    for iteration in range(1, max_iterations + 1):
        action_values = compute_action_values(params, grid, values, mask)
        new_values = np.nanmax(action_values, axis=2)
        delta = float(np.max(np.abs(new_values - values)))
        values = new_values

        if iteration % 1000 == 0:
            logger.debug(f"sweep {iteration}: delta={delta:.3e}")

        if delta <= target:
            elapsed = round(time.time() - start_time, 2)
            logger.info(f"Value iteration converged: {iteration} sweeps, delta={delta:.3e}, {elapsed}s")
            return ValueTable(
                values=values,
                action_values=action_values,
                iteration_count=iteration,
                final_sup_norm_delta=delta,
                epsilon=epsilon,
                actions=tuple(actions)
            )

    raise ConvergenceError(max_iterations, delta, target)


def finite_horizon_values(
    params: ModelParams,
    grid: BeliefGrid,
    horizon: int,
    actions: Sequence[Action] = ALL_ACTIONS
) -> ValueTable:
    """从 V ≡ 0 出发执行 horizon 次同步更新（有限时域网格值）"""
    table = ValueTable.zeros(params, grid, actions)
    for _ in range(horizon):
        table, _ = bellman_sweep(params, grid, table)
    return table


def policy_evaluation(
    params: ModelParams,
    grid: BeliefGrid,
    action_table: np.ndarray,
    epsilon: float,
    max_iterations: Optional[int] = None
) -> ValueTable:
    """固定策略的值函数（固定动作的同步 Bellman 迭代）

    action_table 形状 (U, N)，元素为 ACTION_ORDER 中的下标。
    """
    if max_iterations is None:
        max_iterations = settings.default_max_iterations
    if action_table.shape != (params.n_levels, grid.size):
        raise InvalidParameters(
            f"action table shape {action_table.shape} does not match {(params.n_levels, grid.size)}"
        )

    mask = feasible_mask(params)
    feasible = np.take_along_axis(
        np.broadcast_to(mask[:, None, :], action_table.shape + (len(ACTION_ORDER),)),
        action_table[:, :, None],
        axis=2
    )[:, :, 0]
    if not feasible.all():
        u, node = np.argwhere(~feasible)[0]
        raise InfeasibleActionError(ACTION_ORDER[action_table[u, node]].value, int(u), params.k)

    target = _stopping_target(params, epsilon)
    values = np.zeros((params.n_levels, grid.size))
    delta = float("inf")
    for iteration in range(1, max_iterations + 1):
        action_values = compute_action_values(params, grid, values, mask)
        new_values = np.take_along_axis(action_values, action_table[:, :, None], axis=2)[:, :, 0]
        delta = float(np.max(np.abs(new_values - values)))
        values = new_values
        if delta <= target:
            logger.info(f"Policy evaluation converged: {iteration} sweeps, delta={delta:.3e}")
            return ValueTable(
                values=values,
                action_values=action_values,
                iteration_count=iteration,
                final_sup_norm_delta=delta,
                epsilon=epsilon
            )

    raise ConvergenceError(max_iterations, delta, target)
