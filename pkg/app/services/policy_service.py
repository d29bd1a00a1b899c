import re
import logging
from dataclasses import dataclass
from itertools import groupby
from typing import Dict, List, Optional, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import StructureViolationError
from app.models.schemas import (
    ACTION_ORDER,
    Action,
    ModelParams,
    ThresholdPattern,
    ThresholdProfile,
    ThresholdRow
)
from app.services.bellman_service import (
    ALL_ACTIONS,
    DEFER_TRANSMIT,
    BeliefGrid,
    ValueTable,
    policy_evaluation,
    value_iteration
)

logger = logging.getLogger(__name__)

# 允许的动作序列（游程压缩后）
_FULL_PATTERN = re.compile(r"^D?O?D?T?$")
_LOW_BATTERY_PATTERN = re.compile(r"^D?O?D?$")
_TWO_ACTION_PATTERN = re.compile(r"^D?T?$")


@dataclass
class PolicyTable:
    """策略表：每个 (u, 信念节点) 上的动作下标（ACTION_ORDER 顺序）"""
    actions: np.ndarray
    params: ModelParams
    grid: BeliefGrid
    epsilon: Optional[float] = None
    mode: str = "full"

    @property
    def provenance(self) -> Dict[str, str]:
        """来源信息"""
        return {
            "params_hash": self.params.params_hash(),
            "grid": self.grid.describe(),
            "epsilon": "" if self.epsilon is None else f"{self.epsilon:.6g}",
            "mode": self.mode
        }

    def action(self, u: int, node: int) -> Action:
        return ACTION_ORDER[int(self.actions[u, node])]

    def row_labels(self, u: int) -> str:
        return "".join(ACTION_ORDER[int(a)].value for a in self.actions[u])


@dataclass
class BaselinePolicy:
    """对比策略：greedy 或 single-threshold"""
    kind: str
    thresholds: Optional[List[Optional[float]]] = None
    policy: Optional[PolicyTable] = None


def select_actions(action_values: np.ndarray, tolerance: float) -> np.ndarray:
    """带平局容差的 argmax，优先级 D > O > T

    action_values 最后一维为 (D, O, T)，不可行为 NaN。
    """
    best = np.nanmax(action_values, axis=-1)
    filled = np.where(np.isnan(action_values), -np.inf, action_values)
    near_best = filled >= (best[..., None] - tolerance)
    # 第一个满足条件的下标即优先级最高的动作
    return np.argmax(near_best, axis=-1).astype(np.int8)


def tie_tolerance(params: ModelParams) -> float:
    return settings.tie_tolerance_factor * max(params.rate_r, 1e-300)


def extract_policy(params: ModelParams, grid: BeliefGrid, table: ValueTable) -> PolicyTable:
    """从收敛的值函数表提取最优策略"""
    actions = select_actions(table.action_values, tie_tolerance(params))
    mode = "full" if set(table.actions) == set(ALL_ACTIONS) else "two-action"
    return PolicyTable(actions=actions, params=params, grid=grid, epsilon=table.epsilon, mode=mode)


def summarize_regions(policy: PolicyTable) -> Dict[str, int]:
    """各动作所占网格单元数"""
    counts = np.bincount(policy.actions.ravel().astype(np.int64), minlength=len(ACTION_ORDER))
    return {action.value: int(counts[i]) for i, action in enumerate(ACTION_ORDER)}


def _runs(labels: str) -> List[Tuple[str, int, int]]:
    """游程分解：(动作, 起始节点, 结束节点)"""
    runs = []
    start = 0
    for label, group in groupby(labels):
        length = len(list(group))
        runs.append((label, start, start + length - 1))
        start += length
    return runs


def _boundary(nodes: np.ndarray, left: int) -> Tuple[float, float]:
    """left 与 left+1 两节点之间的中点及其半间距"""
    lo, hi = nodes[left], nodes[left + 1]
    return float(0.5 * (lo + hi)), float(0.5 * (hi - lo))


def _classify_row(policy: PolicyTable, u: int) -> ThresholdRow:
    """单行动作序列的结构识别"""
    params, nodes = policy.params, policy.grid.nodes
    labels = policy.row_labels(u)
    runs = _runs(labels)
    sequence = "".join(label for label, _, _ in runs)

    if policy.mode == "two-action":
        pattern_re = _TWO_ACTION_PATTERN
    elif u >= params.k:
        pattern_re = _FULL_PATTERN
    elif u >= 1:
        pattern_re = _LOW_BATTERY_PATTERN
    else:
        pattern_re = re.compile(r"^D$")
    valid = bool(pattern_re.match(sequence))

    rho: Dict[str, float] = {}
    resolution = 0.0
    for index, (label, first, last) in enumerate(runs):
        if label == "D":
            continue
        if first == 0:
            start, half = 0.0, 0.0
        else:
            start, half = _boundary(nodes, first - 1)
        resolution = max(resolution, half)
        if label == "O":
            rho.setdefault("rho1", start)
            if last < len(nodes) - 1:
                end, half = _boundary(nodes, last)
                rho.setdefault("rho2", end)
                resolution = max(resolution, half)
        elif label == "T":
            rho.setdefault("rho3", start)
            if "rho1" in rho and "rho2" not in rho:
                rho["rho2"] = start

    distinct = len(set(rho.values()))
    if not rho:
        pattern = ThresholdPattern.ALL_DEFER
    elif 1 <= u < params.k and policy.mode == "full":
        pattern = ThresholdPattern.SENSE_ONLY_BAND
    elif distinct == 1:
        pattern = ThresholdPattern.ONE
    elif distinct == 2:
        pattern = ThresholdPattern.TWO
    else:
        pattern = ThresholdPattern.THREE

    return ThresholdRow(
        u=u,
        b=params.battery_level(u),
        pattern=pattern,
        sequence=sequence,
        rho1=rho.get("rho1"),
        rho2=rho.get("rho2"),
        rho3=rho.get("rho3"),
        resolution=resolution,
        valid=valid
    )


def detect_thresholds(policy: PolicyTable) -> ThresholdProfile:
    """逐电池行识别阈值结构，违反结构的行只报告不修复"""
    rows = [_classify_row(policy, u) for u in range(policy.params.n_levels)]
    profile = ThresholdProfile(mode=policy.mode, rows=rows)

    for row in profile.violations:
        logger.warning(f"Threshold structure violated at u={row.u} (b={row.b}): {row.sequence}")
    return profile


def solve_single_threshold_baseline(
    params: ModelParams,
    grid: BeliefGrid,
    epsilon: float,
    max_iterations: Optional[int] = None
) -> Tuple[ValueTable, BaselinePolicy]:
    """只允许 D/T 两个动作的值迭代，并逐行校验 D*T* 结构"""
    table = value_iteration(params, grid, epsilon, max_iterations, actions=DEFER_TRANSMIT)
    policy = extract_policy(params, grid, table)
    profile = detect_thresholds(policy)
    if not profile.passed:
        raise StructureViolationError([
            {"u": row.u, "sequence": row.sequence} for row in profile.violations
        ])
    thresholds = [row.rho3 for row in profile.rows]
    return table, BaselinePolicy(kind="single-threshold", thresholds=thresholds, policy=policy)


def greedy_action(params: ModelParams, u: int) -> Action:
    """有能量就发送，忽略信念"""
    return Action.TRANSMIT if u >= params.k else Action.DEFER


def greedy_policy_table(params: ModelParams, grid: BeliefGrid) -> PolicyTable:
    """greedy 策略在网格上的动作表"""
    actions = np.zeros((params.n_levels, grid.size), dtype=np.int8)
    actions[params.k:, :] = ACTION_ORDER.index(Action.TRANSMIT)
    return PolicyTable(actions=actions, params=params, grid=grid, mode="greedy")


def evaluate_greedy(
    params: ModelParams,
    grid: BeliefGrid,
    epsilon: float,
    max_iterations: Optional[int] = None
) -> ValueTable:
    """greedy 策略在完整模型下的值函数"""
    policy = greedy_policy_table(params, grid)
    return policy_evaluation(params, grid, policy.actions.astype(np.int64), epsilon, max_iterations)
