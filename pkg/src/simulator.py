"""
蒙特卡洛模拟框架
真实模型生成、病人上下文流、带在线更新的单次试验、多次重复与汇总
"""

import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache, partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import orjson
from scipy.special import expit
from tqdm import tqdm

from .bayes_glm import BeliefState, fit_history, init_prior, update
from .errors import ConfigError, DomainError, IngestError
from .model_core import (
    Action, ActionSpace, Dataset, EncodedInstance, PatientContext,
    assemble, assemble_matrix, feature_dimension, load_dataset
)
from .policies import PolicyConfig, argmax_with_ties, select_action

logger = logging.getLogger(__name__)

# 子随机数流编号：真实模型、上下文、结果、策略；共享真实模型单独占一个流
STREAM_TRUTH = 0
STREAM_CONTEXTS = 1
STREAM_OUTCOMES = 2
STREAM_POLICY = 3
STREAM_SHARED_TRUTH = 4

Z_95 = 1.959963984540054


def child_rng(seed: int, rep: int, stream: int) -> np.random.Generator:
    """由 (seed, rep, stream) 确定性派生的计数器型随机数流"""
    sequence = np.random.SeedSequence(int(seed), spawn_key=(int(rep), int(stream)))
    return np.random.Generator(np.random.Philox(sequence))


@dataclass(frozen=True)
class ExperimentConfig:
    """
    一次实验的完整配置

    num_features 为 None 时从 context_csv 推断特征维度。
    """

    num_patients: int = 212
    num_physicians: int = 20
    num_facilities: int = 0
    num_features: Optional[int] = 31
    density: float = 31 / 2000
    context_csv: Optional[str] = None
    standardize: bool = False
    prior_lambda: float = 1.0
    history_csv: Optional[str] = None
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    replications: int = 500
    seed: int = 0
    sigma_truth: float = 1.0
    truth_path: Optional[str] = None
    shared_truth: bool = False

    def __post_init__(self):
        for name in ("num_patients", "num_physicians", "replications"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"{name} 必须 >= 1，实际为 {getattr(self, name)}")
        if self.num_facilities < 0:
            raise DomainError(f"num_facilities 必须 >= 0，实际为 {self.num_facilities}")
        if self.num_features is None and self.context_csv is None:
            raise DomainError("未给定 context_csv 时必须指定 num_features")
        if self.num_features is not None and self.num_features < 0:
            raise DomainError(f"num_features 必须 >= 0，实际为 {self.num_features}")
        if not 0.0 <= self.density <= 1.0:
            raise DomainError(f"density 必须在 [0, 1] 内，实际为 {self.density}")
        if not self.prior_lambda > 0:
            raise DomainError(f"prior_lambda 必须 > 0，实际为 {self.prior_lambda}")
        if not self.sigma_truth >= 0:
            raise DomainError(f"sigma_truth 必须 >= 0，实际为 {self.sigma_truth}")

    @property
    def action_space(self) -> ActionSpace:
        return ActionSpace(self.num_physicians, self.num_facilities)

    def with_policy(self, policy: PolicyConfig) -> "ExperimentConfig":
        return replace(self, policy=policy)

    def to_dict(self) -> dict:
        """按配置文件的分节结构输出，足以完整复现一次运行"""
        return {
            "experiment": {
                "num_patients": self.num_patients,
                "replications": self.replications,
                "seed": self.seed,
                "sigma_truth": self.sigma_truth,
                "truth_path": self.truth_path,
                "shared_truth": self.shared_truth,
            },
            "model": {
                "num_physicians": self.num_physicians,
                "num_facilities": self.num_facilities,
                "prior_lambda": self.prior_lambda,
                "history_csv": self.history_csv,
            },
            "policy": asdict(self.policy),
            "features": {
                "num_features": self.num_features,
                "density": self.density,
                "context_csv": self.context_csv,
                "standardize": self.standardize,
            },
        }


@dataclass(frozen=True)
class TruthModel:
    w_star: np.ndarray

    def __post_init__(self):
        w = np.array(self.w_star, dtype=float)
        w.flags.writeable = False
        object.__setattr__(self, "w_star", w)

    @property
    def d(self) -> int:
        return int(self.w_star.shape[0])


@dataclass(frozen=True)
class Trajectory:
    """一次试验的逐病人记录；action_f 在未启用机构时为 0"""

    context_ids: Tuple[str, ...]
    action_p: np.ndarray
    action_f: np.ndarray
    outcomes: np.ndarray
    cum_success: np.ndarray

    @property
    def final_successes(self) -> int:
        return int(self.cum_success[-1]) if len(self.cum_success) else 0

    @property
    def success_rate(self) -> np.ndarray:
        """第 n 步的累计成功率 cum_success / (n + 1)"""
        return self.cum_success / np.arange(1, len(self.cum_success) + 1)


@dataclass(frozen=True)
class Summary:
    """箱线图统计（最终成功次数）与逐步成功率曲线"""

    median: float
    q25: float
    q75: float
    whisker_low: float
    whisker_high: float
    outliers: Tuple[float, ...]
    mean_rate: np.ndarray
    se_rate: np.ndarray
    final_rate_mean: float
    time_averaged_rate_mean: float


@dataclass(frozen=True)
class ExperimentResult:
    policy: str
    trajectories: Tuple[Trajectory, ...]

    @property
    def final_counts(self) -> np.ndarray:
        return np.array([t.final_successes for t in self.trajectories])

    @property
    def rate_matrix(self) -> np.ndarray:
        return np.vstack([t.success_rate for t in self.trajectories])

    @property
    def summary(self) -> Summary:
        return summarize(self.final_counts, self.rate_matrix)


@dataclass(frozen=True)
class PairwiseDifference:
    policy_a: str
    policy_b: str
    mean_diff: float
    se: float
    ci_low: float
    ci_high: float
    relative: float


@dataclass(frozen=True)
class ComparisonResult:
    results: Dict[str, ExperimentResult]
    differences: List[PairwiseDifference]


def _resolve_d_x(config: ExperimentConfig) -> int:
    if config.context_csv is None:
        return int(config.num_features)
    return _context_dataset(config.context_csv, config.standardize).schema.d_x


@lru_cache(maxsize=8)
def _context_dataset(path: str, standardize: bool) -> Dataset:
    return load_dataset(path, standardize=standardize)


def gen_truth(config: ExperimentConfig, rng: np.random.Generator, d_x: Optional[int] = None) -> TruthModel:
    """
    生成真实权重 w*：从 truth_path 原样读取，或逐坐标独立抽取 N(0, sigma_truth²)

    Args:
        config: 实验配置
        rng: 真实模型随机数流
        d_x: 病人特征维度，缺省时由配置推断

    Returns:
        TruthModel
    """
    d_x = _resolve_d_x(config) if d_x is None else d_x
    d = feature_dimension(d_x, config.action_space)

    if config.truth_path:
        truth = load_truth(config.truth_path)
        if truth.d != d:
            raise ConfigError(
                f"真实权重维度 {truth.d} 与特征维度 {d} 不一致", key="experiment.truth_path"
            )
        return truth

    if config.sigma_truth == 0:
        return TruthModel(np.zeros(d))
    return TruthModel(rng.normal(0.0, config.sigma_truth, size=d))


def gen_contexts(config: ExperimentConfig, rng: np.random.Generator) -> List[PatientContext]:
    """
    病人上下文流

    合成模式下每个二值特征独立以概率 density 取 1，共生成 num_patients 个病人；
    CSV 模式下按文件顺序回放。
    """
    if config.context_csv is None:
        flags = rng.random((config.num_patients, int(config.num_features))) < config.density
        return [PatientContext(f"p{n}", row.astype(float)) for n, row in enumerate(flags)]

    dataset = _context_dataset(config.context_csv, config.standardize)
    if config.num_features is not None and dataset.schema.d_x != config.num_features:
        raise IngestError(
            f"{config.context_csv} 有 {dataset.schema.d_x} 个特征列，"
            f"但配置中 num_features = {config.num_features}"
        )
    if len(dataset.contexts) < config.num_patients:
        raise IngestError(
            f"{config.context_csv} 只有 {len(dataset.contexts)} 个病人，"
            f"少于配置中的 num_patients = {config.num_patients}"
        )
    return dataset.contexts


def true_success_prob(truth: TruthModel, phi: Union[EncodedInstance, np.ndarray]) -> float:
    """σ(w*·φ)"""
    phi = phi.phi if isinstance(phi, EncodedInstance) else np.asarray(phi, dtype=float)
    if phi.shape[-1] != truth.d:
        raise DomainError(f"特征维度 {phi.shape[-1]} 与真实模型维度 {truth.d} 不一致")
    return float(expit(np.dot(truth.w_star, phi)))


def choose_oracle(
    truth: TruthModel,
    context: PatientContext,
    space: ActionSpace,
    rng: np.random.Generator
) -> Action:
    """作弊基线：直接选真实成功概率最大的动作，作为所有策略的上界"""
    scores = assemble_matrix(context, space) @ truth.w_star
    return space.actions[argmax_with_ties(scores, rng)]


def run_episode(
    config: ExperimentConfig,
    truth: TruthModel,
    contexts: Sequence[PatientContext],
    rng: np.random.Generator,
    outcome_uniforms: Optional[np.ndarray] = None,
    prior: Optional[BeliefState] = None
) -> Trajectory:
    """
    单次试验：每个病人选一个动作，抽取结果，做且只做一次模型更新

    Args:
        config: 实验配置
        truth: 真实模型
        contexts: 病人上下文，长度不少于 num_patients
        rng: 策略随机数流
        outcome_uniforms: 预先抽好的 (病人, 动作) 均匀随机数，缺省时从 rng 抽取
        prior: 起始信念，缺省为 init_prior

    Returns:
        Trajectory
    """
    n_patients = config.num_patients
    if len(contexts) < n_patients:
        raise DomainError(f"上下文只有 {len(contexts)} 个，少于 num_patients = {n_patients}")

    space = config.action_space
    d = feature_dimension(contexts[0].d_x, space)
    if truth.d != d:
        raise DomainError(f"真实模型维度 {truth.d} 与特征维度 {d} 不一致")

    if outcome_uniforms is None:
        outcome_uniforms = rng.random((n_patients, space.size))
    state = prior if prior is not None else init_prior(d, config.prior_lambda)
    oracle = partial(choose_oracle, truth)

    action_p = np.zeros(n_patients, dtype=int)
    action_f = np.zeros(n_patients, dtype=int)
    outcomes = np.zeros(n_patients, dtype=int)
    cum_success = np.zeros(n_patients, dtype=int)
    successes = 0

    for n in range(n_patients):
        context = contexts[n]
        p, f = select_action(
            config.policy, state, context, space, rng,
            step=n, horizon=n_patients, oracle=oracle
        )
        phi = assemble(context, p, f, space)
        y = 1 if outcome_uniforms[n, space.index((p, f))] < true_success_prob(truth, phi) else -1
        state = update(state, phi, y)

        successes += y == 1
        action_p[n], action_f[n] = p, f or 0
        outcomes[n], cum_success[n] = y, successes

    return Trajectory(
        tuple(c.id for c in contexts[:n_patients]),
        action_p, action_f, outcomes, cum_success
    )


def _history_prior(config: ExperimentConfig, d_x: int) -> Optional[BeliefState]:
    if not config.history_csv:
        return None

    schema = None
    if config.context_csv is not None:
        schema = _context_dataset(config.context_csv, config.standardize).schema
    history = load_dataset(config.history_csv, schema=schema, standardize=config.standardize)
    if history.schema.d_x != d_x:
        raise IngestError(f"{config.history_csv} 有 {history.schema.d_x} 个特征列，期望 {d_x}")
    if not history.observations:
        raise IngestError(f"{config.history_csv} 缺少 action_p / outcome 列，无法拟合先验")

    space = config.action_space
    return fit_history(init_prior(feature_dimension(d_x, space), config.prior_lambda), history.observations, space)


def run_replication(
    config: ExperimentConfig,
    rep: int,
    prior: Optional[BeliefState] = None
) -> Trajectory:
    """
    第 rep 次重复；真实模型、上下文、结果和策略各用独立派生的随机数流，
    因此不同策略在同一 rep 下看到的真实模型、病人和结果随机数完全相同
    """
    d_x = _resolve_d_x(config)
    if config.shared_truth:
        truth_rng = child_rng(config.seed, 0, STREAM_SHARED_TRUTH)
    else:
        truth_rng = child_rng(config.seed, rep, STREAM_TRUTH)
    truth = gen_truth(config, truth_rng, d_x)

    contexts = gen_contexts(config, child_rng(config.seed, rep, STREAM_CONTEXTS))
    uniforms = child_rng(config.seed, rep, STREAM_OUTCOMES).random(
        (config.num_patients, config.action_space.size)
    )
    return run_episode(config, truth, contexts, child_rng(config.seed, rep, STREAM_POLICY), uniforms, prior)


def run_experiment(
    config: ExperimentConfig,
    workers: int = 1,
    show_progress: bool = True
) -> ExperimentResult:
    """
    重复 R 次试验并按 rep 顺序汇总

    Args:
        config: 实验配置
        workers: 并行进程数，1 表示在当前进程内顺序执行
        show_progress: 是否显示进度条

    Returns:
        ExperimentResult
    """
    label = config.policy.label
    prior = _history_prior(config, _resolve_d_x(config))
    replications = config.replications

    logger.info(f"🎲 开始实验 [{label}]: N={config.num_patients}, M={config.num_physicians}, R={replications}")

    trajectories: List[Optional[Trajectory]] = [None] * replications
    progress_bar = tqdm(total=replications, desc=f"{label}", disable=not show_progress)

    if workers <= 1:
        for rep in range(replications):
            trajectories[rep] = run_replication(config, rep, prior)
            progress_bar.update(1)
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            future_to_rep = {
                executor.submit(run_replication, config, rep, prior): rep
                for rep in range(replications)
            }
            for future in as_completed(future_to_rep):
                trajectories[future_to_rep[future]] = future.result()
                progress_bar.update(1)

    progress_bar.close()

    result = ExperimentResult(label, tuple(trajectories))
    summary = result.summary
    logger.info(
        f"✅ [{label}] 完成: 最终成功率均值 {summary.final_rate_mean:.4f}, "
        f"成功次数中位数 {summary.median:g}"
    )
    return result


def summarize(final_counts: Sequence[float], rates: Optional[np.ndarray] = None) -> Summary:
    """
    箱线图统计与成功率曲线

    分位数使用包含端点的线性插值（numpy 默认规则）；须线延伸到 1.5·IQR 以内最远的数据点，
    其外的点记为离群值。

    Args:
        final_counts: 每次重复的最终成功次数
        rates: (重复次数 × 病人数) 的累计成功率矩阵

    Returns:
        Summary
    """
    counts = np.asarray(final_counts, dtype=float)
    if counts.size < 1:
        raise DomainError("至少需要一次重复")

    q25, median, q75 = np.quantile(counts, [0.25, 0.5, 0.75])
    iqr = q75 - q25
    low_fence, high_fence = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    inside = counts[(counts >= low_fence) & (counts <= high_fence)]
    outliers = tuple(sorted(float(c) for c in counts if c < low_fence or c > high_fence))

    if rates is None:
        mean_rate = se_rate = np.zeros(0)
        final_rate_mean = time_averaged = float("nan")
    else:
        rates = np.atleast_2d(np.asarray(rates, dtype=float))
        mean_rate = rates.mean(axis=0)
        if rates.shape[0] > 1:
            se_rate = rates.std(axis=0, ddof=1) / np.sqrt(rates.shape[0])
        else:
            se_rate = np.zeros(rates.shape[1])
        final_rate_mean = float(mean_rate[-1])
        time_averaged = float(rates.mean())

    return Summary(
        float(median), float(q25), float(q75),
        float(inside.min()), float(inside.max()), outliers,
        mean_rate, se_rate, final_rate_mean, time_averaged
    )


def paired_difference(a: ExperimentResult, b: ExperimentResult, num_patients: int) -> PairwiseDifference:
    """按 rep 配对的最终成功率差：均值、标准误、95% 正态区间和相对提升"""
    rate_a = a.final_counts / num_patients
    rate_b = b.final_counts / num_patients
    diff = rate_a - rate_b
    se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
    mean = float(diff.mean())
    baseline = float(rate_b.mean())
    relative = mean / baseline if baseline > 0 else float("nan")
    return PairwiseDifference(a.policy, b.policy, mean, se, mean - Z_95 * se, mean + Z_95 * se, relative)


def compare_policies(
    config: ExperimentConfig,
    policies: Sequence[PolicyConfig],
    workers: int = 1,
    show_progress: bool = True
) -> ComparisonResult:
    """
    在相同的种子下依次运行多个策略（配对比较），并给出两两差值表

    Args:
        config: 实验配置（其中的 policy 字段被忽略）
        policies: 参与比较的策略，至少两个
        workers: 并行进程数
        show_progress: 是否显示进度条

    Returns:
        ComparisonResult
    """
    if len(policies) < 2:
        raise DomainError("比较至少需要两个策略")

    results: Dict[str, ExperimentResult] = {}
    for policy in policies:
        label = policy.label
        if label in results:
            raise DomainError(f"策略 {label} 重复")
        results[label] = run_experiment(config.with_policy(policy), workers, show_progress)

    labels = list(results)
    differences = [
        paired_difference(results[a], results[b], config.num_patients)
        for i, a in enumerate(labels)
        for b in labels[i + 1:]
    ]
    return ComparisonResult(results, differences)


def load_truth(path: Union[str, Path]) -> TruthModel:
    """读取 {"w_star": [...]} 或纯数组形式的 JSON"""
    try:
        data = orjson.loads(Path(path).read_bytes())
    except (OSError, orjson.JSONDecodeError) as e:
        raise ConfigError(f"无法读取真实权重文件 {path}: {e}", key="experiment.truth_path")
    weights = data.get("w_star") if isinstance(data, dict) else data
    if not isinstance(weights, list):
        raise ConfigError(f"{path} 中没有 w_star 数组", key="experiment.truth_path")
    return TruthModel(np.array(weights, dtype=float))


def save_truth(truth: TruthModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps({"d": truth.d, "w_star": truth.w_star.tolist()}, option=orjson.OPT_INDENT_2))
    return path
