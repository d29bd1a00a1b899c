import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import ValidationError

from app.core.exceptions import ConfigValidationError
from app.models.schemas import RunConfig

logger = logging.getLogger(__name__)

# 内置参数组
PRESETS: Dict[str, Dict[str, Any]] = {
    "reference": {
        "lambda1": 0.9, "lambda0": 0.6, "q": 0.1, "k": 5,
        "rate_r": 3.0, "beta": 0.98, "b_max": 5,
    },
    "costly-sense": {
        "lambda1": 0.9, "lambda0": 0.6, "q": 0.1, "k": 2,
        "rate_r": 3.0, "beta": 0.98, "b_max": 5,
    },
    "throughput": {
        "lambda1": 0.7, "lambda0": 0.2, "q": 0.5, "k": 10,
        "rate_r": 2.0, "beta": 0.999, "b_max": 5,
        "q_values": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    },
}

_LIST_KEYS = {"q_values"}


def parse_config_text(text: str) -> Tuple[Dict[str, Any], Dict[str, int]]:
    """解析 key = value 文本，返回原始值和每个键所在行号"""
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    known = set(RunConfig.model_fields)

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigValidationError(f"expected 'key = value', got '{raw.strip()}'", line=number)

        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigValidationError("empty key", line=number)
        if key not in known:
            raise ConfigValidationError(f"unknown key '{key}'", line=number)
        if key in values:
            raise ConfigValidationError(f"duplicate key '{key}' (first on line {lines[key]})", line=number)

        if key in _LIST_KEYS:
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            values[key] = value
        lines[key] = number

    return values, lines


def build_config(values: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> RunConfig:
    """校验并构造 RunConfig，错误信息带行号"""
    lines = lines or {}
    try:
        return RunConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        if not error["loc"]:
            raise ConfigValidationError(error["msg"])
        key = str(error["loc"][0])
        raise ConfigValidationError(f"{key}: {error['msg']}", line=lines.get(key))


def load_config(
    path: Optional[str] = None,
    preset: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None
) -> RunConfig:
    """加载配置：预设 < 配置文件 < 命令行覆盖"""
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}

    if preset is not None:
        if preset not in PRESETS:
            raise ConfigValidationError(f"unknown preset '{preset}' (choose from {', '.join(sorted(PRESETS))})")
        values.update(PRESETS[preset])

    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigValidationError(f"config file not found: {path}")
        file_values, lines = parse_config_text(config_path.read_text(encoding="utf-8"))
        values.update(file_values)
        logger.info(f"Loaded config from {path} ({len(file_values)} keys)")

    if overrides:
        values.update({key: value for key, value in overrides.items() if value is not None})

    if not values:
        raise ConfigValidationError("no configuration given: use --config and/or --preset")

    return build_config(values, lines)


def _format_value(value: Any) -> str:
    if isinstance(value, list):
        return ",".join(_format_value(item) for item in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: RunConfig) -> List[str]:
    """输出生效配置（按键排序），重新加载后结果不变"""
    data = config.model_dump()
    data["epsilon"] = config.effective_epsilon
    return [f"{key} = {_format_value(data[key])}" for key in sorted(data)]


def dump_config_text(config: RunConfig) -> str:
    return "\n".join(dump_config(config)) + "\n"
