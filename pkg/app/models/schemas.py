from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Optional, List, Dict
from enum import Enum, IntEnum
import hashlib

import orjson

from app.core.config import settings


class Action(str, Enum):
    """调度动作枚举"""
    DEFER = "D"
    SENSE = "O"
    TRANSMIT = "T"


# 动作在各表中的固定顺序，同时也是平局时的优先顺序
ACTION_ORDER: List[Action] = [Action.DEFER, Action.SENSE, Action.TRANSMIT]


class ChannelState(IntEnum):
    """信道状态枚举"""
    BAD = 0
    GOOD = 1


class Observation(str, Enum):
    """每个时隙结束时发射端获得的观测"""
    NONE = "none"
    SENSED_GOOD = "sensed_good"
    SENSED_BAD = "sensed_bad"
    ACK = "ack"
    NACK = "nack"


class PolicyKind(str, Enum):
    """策略类型枚举"""
    OPTIMAL = "optimal"
    SINGLE = "single"
    GREEDY = "greedy"


class ThresholdPattern(str, Enum):
    """每个电池行的阈值结构类型"""
    ALL_DEFER = "all-D"
    ONE = "one-threshold"
    TWO = "two-threshold"
    THREE = "three-threshold"
    SENSE_ONLY_BAND = "sense-only-band"


class ModelParams(BaseModel):
    """问题参数（构造后不可变）

    电池以 τ = 1/k 为单位的整数量子计数，满电为 k * b_max 个量子。
    """
    lambda1: float = Field(..., description="P[G_t=1 | G_{t-1}=1]", ge=0.0, le=1.0)
    lambda0: float = Field(..., description="P[G_t=1 | G_{t-1}=0]", ge=0.0, le=1.0)
    q: float = Field(..., description="每时隙收集一个能量单位的概率", ge=0.0, le=1.0)
    k: int = Field(..., description="感知粒度，τ = 1/k", ge=2)
    rate_r: float = Field(..., description="好信道满时隙传输比特数 R", ge=0.0)
    beta: float = Field(..., description="折扣因子", ge=0.0, lt=1.0)
    b_max: int = Field(..., description="电池容量（能量单位）", ge=1)

    class Config:
        frozen = True

    @property
    def tau(self) -> float:
        """感知代价 τ"""
        return 1.0 / self.k

    @property
    def max_quanta(self) -> int:
        """满电量子数"""
        return self.k * self.b_max

    @property
    def n_levels(self) -> int:
        """电池状态数（0..k*b_max）"""
        return self.k * self.b_max + 1

    def battery_level(self, u: int) -> float:
        """量子数换算为能量单位（仅用于展示）"""
        return u / self.k

    def with_q(self, q: float) -> "ModelParams":
        """返回只替换收集概率的新参数"""
        return self.model_copy(update={"q": q})

    def params_hash(self) -> str:
        """参数指纹，用于结果溯源"""
        payload = orjson.dumps(self.model_dump(), option=orjson.OPT_SORT_KEYS)
        return hashlib.sha256(payload).hexdigest()[:16]


class RunConfig(BaseModel):
    """一次运行的完整配置（未知键拒绝）"""
    # 模型参数
    lambda1: float = Field(..., ge=0.0, le=1.0)
    lambda0: float = Field(..., ge=0.0, le=1.0)
    q: float = Field(..., ge=0.0, le=1.0)
    k: int = Field(..., ge=2)
    rate_r: float = Field(..., ge=0.0)
    beta: float = Field(..., ge=0.0, lt=1.0)
    b_max: int = Field(..., ge=1)

    # 求解器
    grid_intervals: int = Field(settings.default_grid_intervals, ge=1)
    epsilon: Optional[float] = Field(None, gt=0.0, description="缺省为 1e-6 * R")
    max_iterations: int = Field(settings.default_max_iterations, ge=1)

    # 仿真
    horizon: int = Field(settings.default_horizon, ge=1)
    warmup: int = Field(settings.default_warmup, ge=0)
    replications: int = Field(settings.default_replications, ge=1)
    episodes: int = Field(settings.default_episodes, ge=1)
    seed: int = Field(0, ge=0)
    q_values: List[float] = Field(default_factory=list)

    # 输出
    output_dir: str = settings.output_dir

    # 验证
    verify_random_sets: int = Field(50, ge=0)
    verify_oracle_horizon: int = Field(4, ge=0, le=settings.oracle_max_horizon)

    class Config:
        extra = "forbid"

    @field_validator("q_values")
    @classmethod
    def validate_q_values(cls, v):
        """验证 q 列表"""
        for q in v:
            if not (0.0 <= q <= 1.0):
                raise ValueError(f"q value {q} outside [0, 1]")
        return v

    @model_validator(mode="after")
    def validate_horizon(self):
        """仿真长度必须大于预热长度"""
        if self.horizon <= self.warmup:
            raise ValueError(f"horizon ({self.horizon}) must exceed warmup ({self.warmup})")
        return self

    @property
    def model_params(self) -> ModelParams:
        """提取模型参数"""
        return ModelParams(
            lambda1=self.lambda1,
            lambda0=self.lambda0,
            q=self.q,
            k=self.k,
            rate_r=self.rate_r,
            beta=self.beta,
            b_max=self.b_max
        )

    @property
    def effective_epsilon(self) -> float:
        """实际使用的 ε"""
        if self.epsilon is not None:
            return self.epsilon
        # R=0 时仍需要正的 ε
        return settings.default_epsilon_factor * max(self.rate_r, 1.0)


class ThresholdRow(BaseModel):
    """单个电池行的阈值描述

    ρ1 为 O 区起点，ρ2 为 O 区终点（O 直接接 T 时 ρ2 = ρ3），ρ3 为 T 区起点。
    行首（p = 0）即非 D 的区间，其起点记为 0.0。退化的行按不同阈值取值的个数归类，
    例如 "OT" 的 ρ1 = 0.0、ρ2 = ρ3，记为两阈值；全 "T" 行 ρ3 = 0.0，记为一阈值。
    """
    u: int
    b: float
    pattern: ThresholdPattern
    sequence: str = Field(..., description="游程压缩后的动作序列，如 DODT")
    rho1: Optional[float] = None
    rho2: Optional[float] = None
    rho3: Optional[float] = None
    resolution: float = Field(0.0, description="阈值位置误差上界（半个网格间距）")
    valid: bool = True


class ThresholdProfile(BaseModel):
    """全部电池行的阈值结构"""
    mode: str = Field("full", description="full（D/O/T）或 two-action（D/T）")
    rows: List[ThresholdRow]

    @property
    def violations(self) -> List[ThresholdRow]:
        """不满足结构的行"""
        return [row for row in self.rows if not row.valid]

    @property
    def passed(self) -> bool:
        return not self.violations

    def row(self, u: int) -> ThresholdRow:
        return self.rows[u]


class SimReport(BaseModel):
    """单次仿真结果"""
    policy: PolicyKind
    q: float
    total_bits: float
    slots: int
    throughput: float
    discounted_reward: float
    count_defer: int = 0
    count_sense: int = 0
    count_transmit: int = 0
    successful_transmissions: int = 0
    successful_sense_transmissions: int = 0
    quanta_spent: int = 0
    quanta_harvested: int = 0
    initial_quanta: int = 0
    final_quanta: int = 0
    seed: Optional[int] = None
    replications: int = 1
    ci_half_width: float = 0.0


class SweepPoint(BaseModel):
    """扫描表中的一行"""
    q: float
    policy: PolicyKind
    throughput_mean: float
    ci_half_width: float
    replications: int
    horizon: int


class EpisodeReport(BaseModel):
    """折扣回报蒙特卡洛估计"""
    episodes: int
    horizon: int
    mean: float
    std_error: float
    solver_value: float

    @property
    def z_score(self) -> float:
        if self.std_error == 0.0:
            return 0.0 if self.mean == self.solver_value else float("inf")
        return abs(self.mean - self.solver_value) / self.std_error


class OracleSpec(BaseModel):
    """暴力有限时域预言机输入"""
    horizon: int = Field(..., ge=0, le=settings.oracle_max_horizon)
    u: int = Field(..., ge=0)
    p: float = Field(..., ge=0.0, le=1.0)
    params: ModelParams

    @model_validator(mode="after")
    def validate_battery(self):
        if self.u > self.params.max_quanta:
            raise ValueError(f"u={self.u} exceeds battery capacity {self.params.max_quanta}")
        return self


class CheckReport(BaseModel):
    """单项检查结果"""
    name: str
    passed: bool
    worst_violation: float = 0.0
    location: str = ""
    detail: str = ""


class VerificationReport(BaseModel):
    """验证套件汇总"""
    checks: List[CheckReport] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def summary(self) -> Dict[str, int]:
        failed = sum(1 for check in self.checks if not check.passed)
        return {"total": len(self.checks), "passed": len(self.checks) - failed, "failed": failed}
