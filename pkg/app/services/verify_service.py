"""独立验证：暴力有限时域预言机与值函数/策略结构检查

预言机直接按协议语义展开动作、信道结果和收集结果，不使用网格和插值，
也不调用求解器中的任何函数。
"""
import time
import logging
from functools import lru_cache
from typing import Callable, List, Optional

import numpy as np

from app.core.config import settings
from app.models.channel_model import stationary_belief
from app.models.schemas import (
    CheckReport,
    ModelParams,
    OracleSpec,
    PolicyKind,
    RunConfig,
    ThresholdPattern,
    ThresholdProfile,
    ThresholdRow,
    VerificationReport
)
from app.services.bellman_service import (
    BeliefGrid,
    ValueTable,
    bellman_sweep,
    finite_horizon_values,
    value_iteration
)
from app.services.policy_service import (
    detect_thresholds,
    evaluate_greedy,
    extract_policy,
    solve_single_threshold_baseline
)
from app.services.simulation_service import (
    ValueTablePolicy,
    derive_seed_sequence,
    run_discounted_episodes
)

logger = logging.getLogger(__name__)


def finite_horizon_oracle(spec: OracleSpec) -> float:
    """H 步最优期望折扣回报（精确信念，树形递归）"""
    params = spec.params
    k, top = params.k, params.max_quanta
    lam0, lam1 = params.lambda0, params.lambda1
    q, beta, rate = params.q, params.beta, params.rate_r
    tau = 1.0 / k

    @lru_cache(maxsize=None)
    def value(u: int, p: float, steps: int) -> float:
        if steps == 0:
            return 0.0
        candidates = [outcome_value(u, p, steps, "D")]
        if u >= 1:
            candidates.append(outcome_value(u, p, steps, "O"))
        if u >= k:
            candidates.append(outcome_value(u, p, steps, "T"))
        return max(candidates)

    def outcome_value(u: int, p: float, steps: int, action: str) -> float:
        total = 0.0
        for good, p_channel in ((True, p), (False, 1.0 - p)):
            if p_channel == 0.0:
                continue
            # 本时隙的即时回报、剩余电量和下一时隙信念
            if action == "D":
                reward, left = 0.0, u
                p_next = lam0 * (1.0 - p) + lam1 * p
            elif action == "O":
                if good and u >= k:
                    reward, left = (1.0 - tau) * rate, u - k
                else:
                    reward, left = 0.0, u - 1
                p_next = lam1 if good else lam0
            else:
                reward = rate if good else 0.0
                left = u - k
                p_next = lam1 if good else lam0

            for harvested, p_harvest in ((True, q), (False, 1.0 - q)):
                if p_harvest == 0.0:
                    continue
                u_next = min(left + k, top) if harvested else left
                total += p_channel * p_harvest * (reward + beta * value(u_next, p_next, steps - 1))
        return total

    return value(spec.u, spec.p, spec.horizon)


def check_convexity(table: ValueTable, grid: BeliefGrid, tolerance: float) -> CheckReport:
    """V(u, ·) 在网格节点上的离散凸性：中间节点不高于两侧弦"""
    p = grid.nodes
    v = table.values
    left, mid, right = p[:-2], p[1:-1], p[2:]
    theta = (mid - left) / (right - left)
    chord = (1.0 - theta) * v[:, :-2] + theta * v[:, 2:]
    excess = v[:, 1:-1] - chord

    worst = float(np.max(excess)) if excess.size else 0.0
    passed = worst <= tolerance
    location = ""
    if excess.size:
        u, i = np.unravel_index(int(np.argmax(excess)), excess.shape)
        location = f"u={u}, p={p[i + 1]:.6g}"
    return CheckReport(
        name="convexity",
        passed=passed,
        worst_violation=max(worst, 0.0),
        location=location,
        detail=f"tolerance={tolerance:.3g}"
    )


def check_monotonicity(table: ValueTable, grid: BeliefGrid, tolerance: float) -> CheckReport:
    """V 对电池和信念均不减"""
    v = table.values
    drop_u = v[:-1, :] - v[1:, :]
    drop_p = v[:, :-1] - v[:, 1:]

    worst_u = float(np.max(drop_u)) if drop_u.size else 0.0
    worst_p = float(np.max(drop_p)) if drop_p.size else 0.0
    if worst_u >= worst_p and drop_u.size:
        u, i = np.unravel_index(int(np.argmax(drop_u)), drop_u.shape)
        location = f"battery step u={u}->{u + 1}, p={grid.nodes[i]:.6g}"
    elif drop_p.size:
        u, i = np.unravel_index(int(np.argmax(drop_p)), drop_p.shape)
        location = f"belief step u={u}, p={grid.nodes[i]:.6g}->{grid.nodes[i + 1]:.6g}"
    else:
        location = ""

    worst = max(worst_u, worst_p)
    return CheckReport(
        name="monotonicity",
        passed=worst <= tolerance,
        worst_violation=max(worst, 0.0),
        location=location,
        detail=f"tolerance={tolerance:.3g}"
    )


def check_threshold_structure(profile: ThresholdProfile) -> CheckReport:
    """每个电池行的动作序列符合阈值结构"""
    violations = profile.violations
    location = "; ".join(f"u={row.u}: {row.sequence}" for row in violations[:5])
    return CheckReport(
        name=f"threshold_structure[{profile.mode}]",
        passed=not violations,
        worst_violation=float(len(violations)),
        location=location,
        detail=f"{len(profile.rows)} rows checked"
    )


def check_contraction(
    params: ModelParams,
    grid: BeliefGrid,
    pairs: int,
    rng: np.random.Generator,
    operator: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    relative_tolerance: float = 1e-12
) -> CheckReport:
    """随机表对上的 β 压缩性：||T V1 - T V2|| <= β ||V1 - V2||"""
    if operator is None:
        def operator(values: np.ndarray) -> np.ndarray:
            table = ValueTable.zeros(params, grid)
            table.values = values
            return bellman_sweep(params, grid, table)[0].values

    scale = params.rate_r / (1.0 - params.beta) if params.rate_r > 0 else 1.0
    worst_ratio = 0.0
    failures = 0
    for _ in range(pairs):
        v1 = rng.uniform(0.0, scale, size=(params.n_levels, grid.size))
        v2 = rng.uniform(0.0, scale, size=(params.n_levels, grid.size))
        before = float(np.max(np.abs(v1 - v2)))
        after = float(np.max(np.abs(operator(v1) - operator(v2))))
        bound = params.beta * before
        if after > bound * (1.0 + relative_tolerance) + relative_tolerance * scale * 1e-3:
            failures += 1
        if before > 0:
            worst_ratio = max(worst_ratio, after / before)

    return CheckReport(
        name="contraction",
        passed=failures == 0,
        worst_violation=max(worst_ratio - params.beta, 0.0),
        location=f"{failures} of {pairs} pairs" if failures else "",
        detail=f"worst ratio {worst_ratio:.12g}, beta={params.beta}"
    )


def random_params(rng: np.random.Generator) -> ModelParams:
    """随机参数集（λ1 >= λ0）"""
    lam = np.sort(rng.uniform(0.0, 1.0, size=2))
    return ModelParams(
        lambda0=float(lam[0]),
        lambda1=float(lam[1]),
        q=float(rng.uniform(0.0, 1.0)),
        k=int(rng.integers(2, 6)),
        rate_r=float(rng.uniform(0.5, 3.0)),
        beta=float(rng.uniform(0.5, 0.95)),
        b_max=int(rng.integers(1, 4))
    )


def check_oracle_agreement(
    instances: int,
    max_horizon: int,
    grid_intervals: int,
    rng: np.random.Generator,
    tolerance_factor: float = 1e-3,
    offset: float = 0.0
) -> CheckReport:
    """H 步网格值与暴力预言机对比（offset 仅用于负对照）"""
    worst = 0.0
    location = ""
    failures = 0
    for instance in range(instances):
        params = random_params(rng)
        horizon = int(rng.integers(1, max_horizon + 1)) if max_horizon > 0 else 0
        grid = BeliefGrid.build(params, grid_intervals)
        u = int(rng.integers(0, params.max_quanta + 1))
        p = float(grid.nodes[int(rng.integers(0, grid.size))])

        exact = finite_horizon_oracle(OracleSpec(horizon=horizon, u=u, p=p, params=params))
        approx = float(finite_horizon_values(params, grid, horizon).values[u, np.searchsorted(grid.nodes, p)]) + offset
        error = abs(approx - exact)
        bound = tolerance_factor * max(params.rate_r, 1e-12)
        if error > bound:
            failures += 1
        if error / bound > worst:
            worst = error / bound
            location = f"instance {instance}: H={horizon}, u={u}, p={p:.6g}, error={error:.3e}"

    return CheckReport(
        name="oracle_agreement",
        passed=failures == 0,
        worst_violation=worst,
        location=location,
        detail=f"{instances} instances, H<={max_horizon}, error/bound reported"
    )


def check_dominance(full: ValueTable, single: ValueTable, greedy: ValueTable, tolerance: float) -> CheckReport:
    """V_full >= V_single >= V_greedy 逐点成立"""
    gap_single = float(np.max(single.values - full.values))
    gap_greedy = float(np.max(greedy.values - single.values))
    worst = max(gap_single, gap_greedy)
    location = "single above full" if gap_single >= gap_greedy else "greedy above single"
    return CheckReport(
        name="dominance_chain",
        passed=worst <= tolerance,
        worst_violation=max(worst, 0.0),
        location=location if worst > tolerance else "",
        detail=f"tolerance={tolerance:.3g}"
    )


def check_monte_carlo(mean: float, std_error: float, solver_value: float, max_z: float = 3.0) -> CheckReport:
    """蒙特卡洛折扣回报落在求解值的 max_z 个标准误内"""
    if std_error == 0.0:
        z = 0.0 if abs(mean - solver_value) <= 1e-12 else float("inf")
    else:
        z = abs(mean - solver_value) / std_error
    return CheckReport(
        name="monte_carlo_discounted_reward",
        passed=z <= max_z,
        worst_violation=z,
        location="" if z <= max_z else f"mean={mean:.6g}, solver={solver_value:.6g}",
        detail=f"std_error={std_error:.3g}, z={z:.3f}"
    )


def _shape_checks(params: ModelParams, table: ValueTable, grid: BeliefGrid, label: str) -> List[CheckReport]:
    tolerance = settings.structure_tolerance_factor * max(params.rate_r, 1e-12)
    checks = [check_convexity(table, grid, tolerance), check_monotonicity(table, grid, tolerance)]
    for check in checks:
        check.name = f"{check.name}[{label}]"
    return checks


def _negative_controls(params: ModelParams, grid: BeliefGrid, rng: np.random.Generator) -> List[CheckReport]:
    """每个检查器都必须拒绝构造出的违例输入"""
    tolerance = settings.structure_tolerance_factor * max(params.rate_r, 1.0)
    nodes = grid.nodes

    concave = ValueTable.zeros(params, grid)
    concave.values = np.tile(np.sqrt(nodes), (params.n_levels, 1)) * max(params.rate_r, 1.0)
    decreasing = ValueTable.zeros(params, grid)
    decreasing.values = np.tile(1.0 - nodes, (params.n_levels, 1))
    broken = ThresholdProfile(mode="full", rows=[
        ThresholdRow(u=params.k, b=1.0, pattern=ThresholdPattern.ONE, sequence="DTD", valid=False)
    ])

    results = [
        ("convexity", not check_convexity(concave, grid, tolerance).passed),
        ("monotonicity", not check_monotonicity(decreasing, grid, tolerance).passed),
        ("threshold_structure", not check_threshold_structure(broken).passed),
        ("contraction", not check_contraction(params, grid, 3, rng, operator=lambda v: 2.0 * v).passed),
        ("oracle_agreement", not check_oracle_agreement(2, 2, grid.intervals, rng, offset=1.0).passed),
        ("monte_carlo", not check_monte_carlo(10.0, 0.1, 9.0).passed)
    ]
    return [
        CheckReport(
            name=f"negative_control[{name}]",
            passed=rejected,
            detail="fabricated violation rejected" if rejected else "fabricated violation accepted"
        )
        for name, rejected in results
    ]


def run_verification(config: RunConfig) -> VerificationReport:
    """完整验证套件"""
    start_time = time.time()
    params = config.model_params
    epsilon = config.effective_epsilon
    seed_sequence = derive_seed_sequence(config.seed, "verify")
    rng_sequence, episode_sequence = seed_sequence.spawn(2)
    rng = np.random.default_rng(rng_sequence)
    report = VerificationReport()

    grid = BeliefGrid.build(params, config.grid_intervals)
    full = value_iteration(params, grid, epsilon, config.max_iterations)
    report.checks.extend(_shape_checks(params, full, grid, "config"))

    policy = extract_policy(params, grid, full)
    profile = detect_thresholds(policy)
    if params.lambda1 >= params.lambda0:
        report.checks.append(check_threshold_structure(profile))
    else:
        report.checks.append(CheckReport(
            name="threshold_structure[full]",
            passed=True,
            detail="skipped: lambda1 < lambda0"
        ))

    single, _ = solve_single_threshold_baseline(params, grid, epsilon, config.max_iterations)
    single_profile = detect_thresholds(extract_policy(params, grid, single))
    report.checks.append(check_threshold_structure(single_profile))

    greedy = evaluate_greedy(params, grid, epsilon, config.max_iterations)
    report.checks.append(check_dominance(full, single, greedy, tolerance=epsilon))

    random_checks: List[CheckReport] = []
    for _ in range(config.verify_random_sets):
        random_set = random_params(rng)
        random_grid = BeliefGrid.build(random_set, config.grid_intervals)
        random_table = value_iteration(
            random_set, random_grid, settings.default_epsilon_factor * random_set.rate_r, config.max_iterations
        )
        random_checks.extend(_shape_checks(random_set, random_table, random_grid, "random"))
    if random_checks:
        failed = [check for check in random_checks if not check.passed]
        worst = max(random_checks, key=lambda check: check.worst_violation)
        report.checks.append(CheckReport(
            name="value_shape[random_sets]",
            passed=not failed,
            worst_violation=worst.worst_violation,
            location=worst.location if failed else "",
            detail=f"{config.verify_random_sets} parameter sets, {len(failed)} failed checks"
        ))

    report.checks.append(check_contraction(params, grid, 100, rng))

    if config.verify_random_sets:
        report.checks.append(check_oracle_agreement(
            config.verify_random_sets, config.verify_oracle_horizon, config.grid_intervals, rng
        ))

    episodes = run_discounted_episodes(
        params,
        ValueTablePolicy(PolicyKind.OPTIMAL, params, grid, full),
        full,
        grid,
        config.episodes,
        episode_sequence
    )
    monte_carlo = check_monte_carlo(episodes.mean, episodes.std_error, episodes.solver_value)
    if not monte_carlo.passed:
        logger.warning(f"Monte Carlo disagreement: {monte_carlo.detail}")
    report.checks.append(monte_carlo)

    report.checks.extend(_negative_controls(params, grid, rng))

    elapsed = round(time.time() - start_time, 2)
    logger.info(f"Verification finished: {report.summary()} in {elapsed}s (p*={stationary_belief(params):.6g})")
    return report
