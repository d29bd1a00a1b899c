import logging
import time
from pathlib import Path
from typing import List, Optional, Sequence

from app.core.config import settings
from app.core.exceptions import InvalidParameters
from app.models.schemas import ModelParams, PolicyKind, RunConfig
from app.services.bellman_service import BeliefGrid, value_iteration
from app.services.policy_service import (
    detect_thresholds,
    extract_policy,
    solve_single_threshold_baseline,
    summarize_regions
)
from app.services.simulation_service import (
    GreedyPolicy,
    SchedulingPolicy,
    ValueTablePolicy,
    run_policy,
    sweep_throughput
)
from app.services.verify_service import run_verification
from app.utils.csv_utils import (
    policy_frame,
    regions_frame,
    sim_report_frame,
    sweep_frame,
    threshold_frame,
    trace_frame,
    value_table_frame,
    verification_frame,
    verification_payload,
    write_csv,
    write_json
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VERIFY_FAILED = 5


def _output_dir(config: RunConfig) -> Path:
    return Path(config.output_dir or settings.output_dir)


def cmd_solve(config: RunConfig) -> int:
    """求解最优策略，输出值函数表、策略图和阈值表

    Args:
        config: 生效配置

    Returns:
        int: 退出码
    """
    params = config.model_params
    out = _output_dir(config)

    grid = BeliefGrid.build(params, config.grid_intervals)
    logger.info(f"Belief grid: {grid.describe()}")
    table = value_iteration(params, grid, config.effective_epsilon, config.max_iterations)
    policy = extract_policy(params, grid, table)
    profile = detect_thresholds(policy)
    regions = summarize_regions(policy)

    write_csv(value_table_frame(params, grid, table), out / "value_table.csv", config)
    write_csv(policy_frame(policy), out / "policy_map.csv", config)
    write_csv(
        threshold_frame(profile),
        out / "thresholds.csv",
        config,
        footer=[f"cells {label} = {count}" for label, count in regions.items()]
    )

    print(
        f"solved in {table.iteration_count} sweeps (delta={table.final_sup_norm_delta:.3e}); "
        f"cells D={regions['D']} O={regions['O']} T={regions['T']}; "
        f"structure violations={len(profile.violations)}"
    )
    return EXIT_OK


def _build_policy(kind: PolicyKind, params: ModelParams, config: RunConfig) -> SchedulingPolicy:
    """按需求解单个策略"""
    if kind == PolicyKind.GREEDY:
        return GreedyPolicy(params)

    grid = BeliefGrid.build(params, config.grid_intervals)
    if kind == PolicyKind.OPTIMAL:
        table = value_iteration(params, grid, config.effective_epsilon, config.max_iterations)
    else:
        table, _ = solve_single_threshold_baseline(params, grid, config.effective_epsilon, config.max_iterations)
    return ValueTablePolicy(kind, params, grid, table)


def cmd_simulate(config: RunConfig, kind: PolicyKind = PolicyKind.OPTIMAL, trace: bool = False) -> int:
    """单策略长时仿真，可选输出逐时隙轨迹"""
    params = config.model_params
    out = _output_dir(config)

    policy = _build_policy(kind, params, config)
    start_time = time.time()
    report, records = run_policy(
        params, policy, config.horizon, config.warmup, config.seed, record_trace=trace
    )
    elapsed = round(time.time() - start_time, 2)
    logger.info(f"Simulated {config.horizon} slots of {kind.value} policy in {elapsed}s")

    write_csv(sim_report_frame([report]), out / f"simulate_{kind.value}.csv", config)
    if trace and records is not None:
        write_csv(trace_frame(records), out / f"trace_{kind.value}.csv", config)

    print(f"{kind.value}: throughput={report.throughput:.6f} bits/slot over {report.slots} slots")
    return EXIT_OK


def cmd_sweep(config: RunConfig) -> int:
    """三种策略的吞吐量随 q 变化"""
    q_values = config.q_values or [config.q]
    points = sweep_throughput(
        config.model_params,
        q_values,
        config.grid_intervals,
        config.effective_epsilon,
        config.horizon,
        config.warmup,
        config.replications,
        config.seed,
        config.max_iterations
    )
    write_csv(sweep_frame(points), _output_dir(config) / "sweep.csv", config)

    for point in points:
        print(f"q={point.q:g} {point.policy.value}: {point.throughput_mean:.6f} ± {point.ci_half_width:.6f}")
    return EXIT_OK


def cmd_verify(config: RunConfig) -> int:
    """运行验证套件，全部通过返回 0，否则返回 5"""
    out = _output_dir(config)
    report = run_verification(config)

    write_csv(verification_frame(report), out / "verification.csv", config)
    write_json(verification_payload(report, config), out / "verification.json")

    summary = report.summary()
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: worst={check.worst_violation:.3e} {check.location}".rstrip())
    print(f"{summary['passed']}/{summary['total']} checks passed")

    if not report.passed:
        logger.warning(f"Verification failed: {summary['failed']} checks")
        return EXIT_VERIFY_FAILED
    return EXIT_OK


def compare_sensing_cost(config: RunConfig, k_values: Sequence[int]) -> List[dict]:
    """不同感知开销 τ = 1/k 下三种动作区域的格点数"""
    rows = []
    for k in k_values:
        if k < 2:
            raise InvalidParameters(f"k must be >= 2, got {k}")
        params = config.model_params.model_copy(update={"k": k})
        grid = BeliefGrid.build(params, config.grid_intervals)
        table = value_iteration(params, grid, config.effective_epsilon, config.max_iterations)
        regions = summarize_regions(extract_policy(params, grid, table))
        rows.append({
            "k": k,
            "tau": params.tau,
            "cells_defer": regions["D"],
            "cells_sense": regions["O"],
            "cells_transmit": regions["T"],
        })
        logger.info(f"Regions at k={k}: {regions}")
    return rows


def cmd_regions(config: RunConfig, k_values: Optional[Sequence[int]] = None) -> int:
    """比较感知开销对决策区域的影响"""
    if not k_values:
        k_values = [config.k]
    rows = compare_sensing_cost(config, k_values)
    write_csv(regions_frame(rows), _output_dir(config) / "regions.csv", config)

    for row in rows:
        print(
            f"k={row['k']} tau={row['tau']:g}: D={row['cells_defer']} "
            f"O={row['cells_sense']} T={row['cells_transmit']}"
        )
    if len(rows) > 1 and rows[0]["cells_sense"] > 0:
        reduction = 1.0 - rows[-1]["cells_sense"] / rows[0]["cells_sense"]
        print(f"sense region change k={rows[0]['k']} -> k={rows[-1]['k']}: {-reduction:+.1%}")
    return EXIT_OK
