"""Gilbert-Elliot 信道、能量收集与信念更新

所有函数均为纯函数；电池以整数量子 u 表示（τ = 1/k），从不使用浮点电量。
电池判定函数同时接受整数和 numpy 整型数组。
"""
import logging
from typing import Union

import numpy as np

from app.core.exceptions import DegenerateChainError, InvalidParameters
from app.models.schemas import ChannelState, ModelParams

logger = logging.getLogger(__name__)

BatteryLike = Union[int, np.ndarray]


def belief_update_defer(params: ModelParams, p: float) -> float:
    """无观测时的一步信念传播 J(p) = λ0(1-p) + λ1 p"""
    return params.lambda0 * (1.0 - p) + params.lambda1 * p


def belief_update_defer_array(params: ModelParams, p: np.ndarray) -> np.ndarray:
    """J(p) 的向量化版本"""
    return params.lambda0 * (1.0 - p) + params.lambda1 * p


def stationary_belief(params: ModelParams) -> float:
    """J 的不动点 λ0 / (1 - λ1 + λ0)，即信道长期处于好状态的概率"""
    denom = 1.0 - params.lambda1 + params.lambda0
    if denom == 0.0:
        raise DegenerateChainError()
    return params.lambda0 / denom


def channel_step(params: ModelParams, g: ChannelState, rng_draw: float) -> ChannelState:
    """信道状态转移：rng_draw < λ_g 时下一状态为好"""
    threshold = params.lambda1 if g == ChannelState.GOOD else params.lambda0
    return ChannelState.GOOD if rng_draw < threshold else ChannelState.BAD


def channel_step_array(params: ModelParams, g: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """批量信道转移，g 为 0/1 整型数组"""
    thresholds = np.where(g == 1, params.lambda1, params.lambda0)
    return (draws < thresholds).astype(np.int64)


def draw_channel(p: float, rng_draw: float) -> ChannelState:
    """按信念直接抽取信道：rng_draw < p 时为好"""
    return ChannelState.GOOD if rng_draw < p else ChannelState.BAD


def can_sense(u: BatteryLike) -> BatteryLike:
    """至少剩一个量子才能感知"""
    return u >= 1


def can_transmit(params: ModelParams, u: BatteryLike) -> BatteryLike:
    """至少一个完整能量单位（k 个量子）才能发送"""
    return u >= params.k


def harvest(params: ModelParams, u: int) -> int:
    """收集一个能量单位，截断在电池容量"""
    return min(u + params.k, params.max_quanta)


def harvest_array(params: ModelParams, u: np.ndarray, harvested: np.ndarray) -> np.ndarray:
    """批量收集：harvested 为真的位置加一个能量单位并截断"""
    return np.where(harvested, np.minimum(u + params.k, params.max_quanta), u)


def validate_battery(params: ModelParams, u: int) -> None:
    """校验电池量子数在 [0, k*b_max] 内"""
    if not (0 <= u <= params.max_quanta):
        raise InvalidParameters(f"battery {u} quanta outside [0, {params.max_quanta}]")
