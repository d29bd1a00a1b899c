import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import orjson
import pandas as pd

from app.models.schemas import (
    ACTION_ORDER,
    ModelParams,
    RunConfig,
    SimReport,
    SweepPoint,
    ThresholdProfile,
    VerificationReport
)
from app.services.bellman_service import BeliefGrid, ValueTable
from app.services.policy_service import PolicyTable
from app.utils.config_utils import dump_config

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.12g"


def value_table_frame(params: ModelParams, grid: BeliefGrid, table: ValueTable) -> pd.DataFrame:
    """值函数表：u, b, p, v, v_defer, v_sense, v_transmit"""
    n_levels, n_nodes = table.shape
    u = np.repeat(np.arange(n_levels), n_nodes)
    return pd.DataFrame({
        "u": u,
        "b": u / params.k,
        "p": np.tile(grid.nodes, n_levels),
        "v": table.values.ravel(),
        "v_defer": table.action_values[:, :, 0].ravel(),
        "v_sense": table.action_values[:, :, 1].ravel(),
        "v_transmit": table.action_values[:, :, 2].ravel(),
    })


def policy_frame(policy: PolicyTable) -> pd.DataFrame:
    """策略图：u, b, p, action"""
    n_levels, n_nodes = policy.actions.shape
    u = np.repeat(np.arange(n_levels), n_nodes)
    labels = np.array([action.value for action in ACTION_ORDER])
    return pd.DataFrame({
        "u": u,
        "b": u / policy.params.k,
        "p": np.tile(policy.grid.nodes, n_levels),
        "action": labels[policy.actions.ravel().astype(np.int64)],
    })


def threshold_frame(profile: ThresholdProfile) -> pd.DataFrame:
    """阈值表：u, b, pattern, rho1, rho2, rho3"""
    return pd.DataFrame(
        [
            {
                "u": row.u,
                "b": row.b,
                "pattern": row.pattern.value,
                "rho1": row.rho1,
                "rho2": row.rho2,
                "rho3": row.rho3,
            }
            for row in profile.rows
        ],
        columns=["u", "b", "pattern", "rho1", "rho2", "rho3"]
    )


def sweep_frame(points: Sequence[SweepPoint]) -> pd.DataFrame:
    """吞吐量扫描表"""
    return pd.DataFrame(
        [
            {
                "q": point.q,
                "policy": point.policy.value,
                "throughput_mean": point.throughput_mean,
                "ci_half_width": point.ci_half_width,
                "replications": point.replications,
                "horizon": point.horizon,
            }
            for point in points
        ],
        columns=["q", "policy", "throughput_mean", "ci_half_width", "replications", "horizon"]
    )


def sim_report_frame(reports: Iterable[SimReport]) -> pd.DataFrame:
    rows = [report.model_dump(mode="json") for report in reports]
    return pd.DataFrame(rows)


def trace_frame(trace: Dict[str, list]) -> pd.DataFrame:
    return pd.DataFrame(trace, columns=["slot", "u", "belief", "action", "channel", "reward"])


def verification_frame(report: VerificationReport) -> pd.DataFrame:
    return pd.DataFrame(
        [check.model_dump() for check in report.checks],
        columns=["name", "passed", "worst_violation", "location", "detail"]
    )


def regions_frame(rows: List[Dict[str, float]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=["k", "tau", "cells_defer", "cells_sense", "cells_transmit"])


def write_csv(
    frame: pd.DataFrame,
    path: Path,
    config: RunConfig,
    footer: Optional[List[str]] = None
) -> Path:
    """写 CSV：生效配置作为 # 注释头，表头必需，'\\n' 行尾"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        for line in dump_config(config):
            f.write(f"# {line}\n")
        frame.to_csv(f, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        for line in footer or []:
            f.write(f"# {line}\n")

    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_json(payload: dict, path: Path) -> Path:
    """orjson 输出（键排序，缩进）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n")
    logger.info(f"Wrote {path}")
    return path


def verification_payload(report: VerificationReport, config: RunConfig) -> dict:
    return {
        "passed": report.passed,
        "summary": report.summary(),
        "config": dump_config(config),
        "checks": [check.model_dump() for check in report.checks],
    }
