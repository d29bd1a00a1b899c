import argparse
import logging
import sys
from typing import List, Optional

import orjson

from app.core.config import settings
from app.core.exceptions import (
    ConfigValidationError,
    SchedulerException,
    format_error,
    format_unexpected_error
)
from app.cli import cmd_regions, cmd_simulate, cmd_solve, cmd_sweep, cmd_verify
from app.models.schemas import PolicyKind
from app.utils.config_utils import PRESETS, load_config

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "simulate", "sweep", "verify", "regions")


def configure_logging() -> None:
    """按设置配置日志"""
    logging.basicConfig(
        level=logging.DEBUG if settings.debug else getattr(logging, settings.log_level.upper(), logging.INFO),
        format=settings.log_format,
        stream=sys.stderr
    )


def _parse_k_values(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigValidationError(f"--k-values expects comma-separated integers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description=f"{settings.app_name} {settings.app_version}: 能量收集发送端的感知/发送调度"
    )
    parser.add_argument("command", choices=COMMANDS, help="要执行的子命令")
    parser.add_argument("--config", help="key = value 配置文件路径")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="内置参数组")
    parser.add_argument("--out", help="输出目录（覆盖 output_dir）")
    parser.add_argument("--seed", type=int, help="运行种子（覆盖 seed）")
    parser.add_argument(
        "--policy",
        choices=[kind.value for kind in PolicyKind],
        default=PolicyKind.OPTIMAL.value,
        help="simulate 使用的策略"
    )
    parser.add_argument("--trace", action="store_true", help="simulate 时输出逐时隙轨迹")
    parser.add_argument("--k-values", help="regions 比较的 k 列表，如 5,2")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    """解析参数并执行子命令，返回退出码"""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(
            path=args.config,
            preset=args.preset,
            overrides={"seed": args.seed, "output_dir": args.out}
        )
        logger.info(f"Running '{args.command}' with k={config.k} b_max={config.b_max} q={config.q} seed={config.seed}")

        if args.command == "solve":
            return cmd_solve(config)
        if args.command == "simulate":
            return cmd_simulate(config, PolicyKind(args.policy), args.trace)
        if args.command == "sweep":
            return cmd_sweep(config)
        if args.command == "verify":
            return cmd_verify(config)
        return cmd_regions(config, _parse_k_values(args.k_values))

    except SchedulerException as e:
        sys.stderr.write(orjson.dumps(format_error(e)).decode() + "\n")
        return e.exit_code
    except Exception as e:
        sys.stderr.write(orjson.dumps(format_unexpected_error(e)).decode() + "\n")
        return 1


def main() -> None:
    configure_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
