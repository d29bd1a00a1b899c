from typing import Any, Dict, List, Optional
import logging

logger = logging.getLogger(__name__)


class SchedulerException(Exception):
    """基础异常类"""

    def __init__(self, detail: str, error_code: str = None, exit_code: int = 1):
        super().__init__(detail)
        self.detail = detail
        self.error_code = error_code
        self.exit_code = exit_code


class InvalidParameters(SchedulerException):
    """无效参数"""

    def __init__(self, detail: str = "Invalid parameters"):
        super().__init__(detail=detail, error_code="INVALID_PARAMETERS", exit_code=2)


class ConfigValidationError(SchedulerException):
    """配置文件校验错误"""

    def __init__(self, detail: str = "Invalid configuration", line: Optional[int] = None):
        if line is not None:
            detail = f"line {line}: {detail}"
        super().__init__(detail=detail, error_code="CONFIG_VALIDATION_ERROR", exit_code=2)
        self.line = line


class InfeasibleActionError(SchedulerException):
    """动作在当前电池状态下不可行"""

    def __init__(self, action: str, u: int, k: int):
        super().__init__(
            detail=f"Action {action} is infeasible at battery {u} quanta (k={k})",
            error_code="INFEASIBLE_ACTION",
            exit_code=3
        )
        self.action = action
        self.u = u


class DegenerateChainError(SchedulerException):
    """信道马尔可夫链退化（无唯一平稳分布）"""

    def __init__(self, detail: str = "Channel chain is degenerate: 1 - lambda1 + lambda0 == 0"):
        super().__init__(detail=detail, error_code="DEGENERATE_CHAIN", exit_code=3)


class ConvergenceError(SchedulerException):
    """迭代在上限内未收敛"""

    def __init__(self, iterations: int, last_delta: float, target: float):
        super().__init__(
            detail=(
                f"No convergence after {iterations} sweeps "
                f"(last delta {last_delta:.3e}, target {target:.3e})"
            ),
            error_code="CONVERGENCE_ERROR",
            exit_code=4
        )
        self.iterations = iterations
        self.last_delta = last_delta


class StructureViolationError(SchedulerException):
    """策略不满足阈值结构"""

    def __init__(self, violations: List[Dict[str, Any]]):
        rows = ", ".join(f"u={v['u']}: {v['sequence']}" for v in violations[:5])
        super().__init__(
            detail=f"Threshold structure violated in {len(violations)} row(s): {rows}",
            error_code="STRUCTURE_VIOLATION",
            exit_code=5
        )
        self.violations = violations


class BeliefChainTooLongError(SchedulerException):
    """可达信念链超过上限（|λ1 - λ0| 过于接近 1）"""

    def __init__(self, size: int, lambda1: float, lambda0: float):
        super().__init__(
            detail=(
                f"Reachable belief chain exceeded {size} entries "
                f"(lambda1={lambda1}, lambda0={lambda0}); belief converges too slowly to simulate"
            ),
            error_code="BELIEF_CHAIN_TOO_LONG",
            exit_code=3
        )
        self.size = size


def format_error(exc: SchedulerException) -> Dict[str, Any]:
    """格式化错误信息"""
    logger.error(f"Scheduler Exception: {exc.detail} (Code: {exc.error_code})")

    return {
        "error": {
            "message": exc.detail,
            "type": exc.error_code or "scheduler_error",
            "code": exc.exit_code
        }
    }


def format_unexpected_error(exc: Exception) -> Dict[str, Any]:
    """通用异常格式化"""
    logger.error(f"Unhandled exception: {str(exc)}", exc_info=True)

    return {
        "error": {
            "message": "Internal error",
            "type": "internal_error",
            "code": 1
        }
    }
