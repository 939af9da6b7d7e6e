"""
实验配置加载
读取 YAML 配置文件、逐项校验并构造 ExperimentConfig；读取 .env 中的运行环境变量
"""

import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv

from .errors import ConfigError, DomainError
from .policies import HORIZON, POLICY_KINDS, PolicyConfig
from .simulator import ExperimentConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = os.path.join(os.path.dirname(os.path.dirname(__file__)), "config.yml")

THREADS_ENV = "BANDITSIM_THREADS"
LOG_LEVEL_ENV = "BANDITSIM_LOG_LEVEL"

SEED_LIMIT = 2 ** 64

_MISSING = object()


class _Invalid(Exception):
    pass


def _int(minimum: int) -> Callable[[Any], int]:
    def check(value):
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            raise _Invalid(f"整数且 >= {minimum}")
        return value
    return check


def _seed(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < SEED_LIMIT:
        raise _Invalid("整数且 0 <= seed < 2^64")
    return value


def _real(low: float, low_open: bool = False, high: Optional[float] = None) -> Callable[[Any], float]:
    domain = f"实数且 {'>' if low_open else '>='} {low:g}" + (f" 且 <= {high:g}" if high is not None else "")

    def check(value):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise _Invalid(domain)
        value = float(value)
        if value < low or (low_open and value == low) or (high is not None and value > high):
            raise _Invalid(domain)
        return value
    return check


def _bool(value) -> bool:
    if not isinstance(value, bool):
        raise _Invalid("true 或 false")
    return value


def _optional_path(value) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, str) or not value.strip():
        raise _Invalid("文件路径字符串或 null")
    return value


def _optional_int(minimum: int) -> Callable[[Any], Optional[int]]:
    check_int = _int(minimum)

    def check(value):
        if value is None:
            return None
        try:
            return check_int(value)
        except _Invalid:
            raise _Invalid(f"整数且 >= {minimum}，或 null")
    return check


def _kind(value) -> str:
    if value not in POLICY_KINDS:
        raise _Invalid("{" + ", ".join(POLICY_KINDS) + "} 之一")
    return value


def _tau(value) -> Union[float, str]:
    if value == HORIZON:
        return HORIZON
    try:
        return _real(0.0)(value)
    except _Invalid:
        raise _Invalid(f"'{HORIZON}' 或实数且 >= 0")


# 各分节允许的键：(校验函数, 默认值)
SCHEMA: Dict[str, Dict[str, Tuple[Callable[[Any], Any], Any]]] = {
    "experiment": {
        "num_patients": (_int(1), 212),
        "replications": (_int(1), 500),
        "seed": (_seed, 0),
        "sigma_truth": (_real(0.0), 1.0),
        "truth_path": (_optional_path, None),
        "shared_truth": (_bool, False),
    },
    "model": {
        "num_physicians": (_int(1), 20),
        "num_facilities": (_int(0), 0),
        "prior_lambda": (_real(0.0, low_open=True), 1.0),
        "history_csv": (_optional_path, None),
    },
    "policy": {
        "kind": (_kind, "kg"),
        "tau": (_tau, HORIZON),
        "eta": (_real(0.0, low_open=True), 1.0),
    },
    "features": {
        "num_features": (_optional_int(0), _MISSING),
        "density": (_real(0.0, high=1.0), 31 / 2000),
        "context_csv": (_optional_path, None),
        "standardize": (_bool, False),
    },
}

PATH_KEYS = {("experiment", "truth_path"), ("model", "history_csv"), ("features", "context_csv")}


def _key_lines(text: str) -> Dict[str, int]:
    """dotted key -> 所在行号（从 1 开始）"""
    lines: Dict[str, int] = {}
    root = yaml.compose(text)
    if not isinstance(root, yaml.MappingNode):
        return lines

    for section_node, body in root.value:
        section = str(section_node.value)
        lines[section] = section_node.start_mark.line + 1
        if isinstance(body, yaml.MappingNode):
            for key_node, value_node in body.value:
                lines[f"{section}.{key_node.value}"] = key_node.start_mark.line + 1
    return lines


class ConfigLoader:
    """实验配置加载器"""

    def __init__(self, config_path: Optional[str] = None):
        """
        Args:
            config_path: 配置文件路径，缺省为仓库根目录下的 config.yml
        """
        self.config_path = str(config_path or DEFAULT_CONFIG_PATH)
        self.base_dir = Path(self.config_path).resolve().parent
        self._lines: Dict[str, int] = {}

    def _error(self, message: str, key: Optional[str] = None) -> ConfigError:
        line = None
        if key is not None:
            line = self._lines.get(key, self._lines.get(key.split(".")[0]))
        return ConfigError(message, key=key, line=line, path=self.config_path)

    def _read(self) -> dict:
        try:
            with open(self.config_path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"无法读取配置文件: {e}", path=self.config_path)

        try:
            self._lines = _key_lines(text)
            raw = yaml.safe_load(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            raise ConfigError(f"YAML 语法错误: {getattr(e, 'problem', e)}", line=line, path=self.config_path)

        if raw is None:
            return {}
        if not isinstance(raw, dict):
            raise ConfigError("顶层必须是包含 experiment/model/policy/features 的映射", path=self.config_path)
        return raw

    def _resolve_path(self, value: Optional[str]) -> Optional[str]:
        if value is None:
            return None
        path = Path(value)
        return str(path if path.is_absolute() else (self.base_dir / path).resolve())

    def load_dict(self) -> Dict[str, Dict[str, Any]]:
        """
        读取并校验配置，返回补全默认值后的分节字典

        Returns:
            {section: {key: value}}

        Raises:
            ConfigError: 未知分节或键、取值不在定义域内
        """
        raw = self._read()

        for section in raw:
            if section not in SCHEMA:
                raise self._error(
                    f"未知分节，可选: {', '.join(SCHEMA)}", key=str(section)
                )

        resolved: Dict[str, Dict[str, Any]] = {}
        for section, keys in SCHEMA.items():
            body = raw.get(section) or {}
            if not isinstance(body, dict):
                raise self._error("分节内容必须是键值映射", key=section)

            for key in body:
                if key not in keys:
                    raise self._error(f"未知配置项，可选: {', '.join(keys)}", key=f"{section}.{key}")

            values = {}
            for key, (check, default) in keys.items():
                if key not in body:
                    values[key] = default
                    continue
                try:
                    values[key] = check(body[key])
                except _Invalid as e:
                    raise self._error(f"取值 {body[key]!r} 无效，期望 {e}", key=f"{section}.{key}")
                if (section, key) in PATH_KEYS:
                    values[key] = self._resolve_path(values[key])
            resolved[section] = values

        features = resolved["features"]
        if features["num_features"] is _MISSING:
            # 给定 context_csv 时维度由文件决定
            features["num_features"] = None if features["context_csv"] else 31
        elif features["num_features"] is None and not features["context_csv"]:
            raise self._error("未给定 context_csv 时 num_features 必须为整数", key="features.num_features")

        return resolved

    def load(self, seed_override: Optional[int] = None) -> ExperimentConfig:
        """
        加载配置并构造 ExperimentConfig

        Args:
            seed_override: 命令行给定的种子，覆盖 experiment.seed

        Returns:
            ExperimentConfig
        """
        sections = self.load_dict()
        if seed_override is not None:
            try:
                sections["experiment"]["seed"] = _seed(seed_override)
            except _Invalid as e:
                raise ConfigError(f"--seed {seed_override} 无效，期望 {e}", key="experiment.seed")

        policy = sections["policy"]
        try:
            policy_config = PolicyConfig(policy["kind"], policy["tau"], policy["eta"])
        except DomainError as e:
            raise self._error(str(e), key="policy")

        try:
            config = ExperimentConfig(
                policy=policy_config,
                **sections["experiment"],
                **sections["model"],
                **sections["features"],
            )
        except DomainError as e:
            raise self._error(str(e))

        logger.info(f"📋 已加载配置: {self.config_path}")
        return config


def load_config(config_path: Optional[str] = None, seed_override: Optional[int] = None) -> ExperimentConfig:
    return ConfigLoader(config_path).load(seed_override)


def load_environment() -> None:
    load_dotenv()


def resolve_workers(cli_value: Optional[int] = None) -> int:
    """
    并行进程数：命令行 --workers 优先，其次 BANDITSIM_THREADS，最后为 CPU 核数

    环境变量缺失或不是正整数时使用默认值。
    """
    if cli_value is not None:
        if cli_value < 1:
            raise ConfigError(f"--workers 必须 >= 1，实际为 {cli_value}", key="workers")
        return cli_value

    raw = os.getenv(THREADS_ENV)
    if raw:
        try:
            value = int(raw)
            if value >= 1:
                return value
        except ValueError:
            pass
        logger.warning(f"⚠️  {THREADS_ENV}={raw!r} 不是正整数，使用默认值")
    return os.cpu_count() or 1


def resolve_log_level(verbose: bool = False) -> int:
    if verbose:
        return logging.DEBUG
    name = os.getenv(LOG_LEVEL_ENV, "INFO").upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO
