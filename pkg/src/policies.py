"""
动作选择策略
知识梯度（含后验重塑）、Thompson 采样、纯利用、纯探索
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Union

import numpy as np

from .bayes_glm import BeliefState, predict, predict_many, reshape, sample_weights, update
from .errors import DomainError
from .model_core import Action, ActionSpace, PatientContext, assemble_matrix

logger = logging.getLogger(__name__)

POLICY_KINDS = ("kg", "thompson", "exploit", "explore", "oracle")
HORIZON = "horizon"

# 打分并列的判定容差，吸收不同求和顺序带来的舍入差
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class PolicyConfig:
    """
    策略配置

    tau 为固定的非负数，或 "horizon" 表示在第 n 个病人处取 N − n − 1；
    tau 与 eta 只对 KG 策略生效。
    """

    kind: str = "kg"
    tau: Union[float, str] = HORIZON
    eta: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise DomainError(f"未知策略 {self.kind!r}，可选: {', '.join(POLICY_KINDS)}")
        if not self.eta > 0:
            raise DomainError(f"eta 必须 > 0，实际为 {self.eta}")
        if self.tau != HORIZON and not float(self.tau) >= 0:
            raise DomainError(f"tau 必须 >= 0 或为 'horizon'，实际为 {self.tau}")

    @property
    def label(self) -> str:
        if self.kind != "kg":
            return self.kind
        return f"kg(tau={self.tau},eta={self.eta:g})"

    def resolve_tau(self, step: int, horizon: Optional[int]) -> float:
        if self.tau != HORIZON:
            return float(self.tau)
        if horizon is None:
            raise DomainError("tau = 'horizon' 需要已知的病人总数 N")
        return float(max(horizon - step - 1, 0))


@dataclass(frozen=True)
class ScoredAction:
    action: Action
    exploit_score: float
    kg_value: float
    total: float


def _require_actions(space: ActionSpace) -> None:
    if space.size < 1:
        raise DomainError("动作空间为空")


def argmax_with_ties(scores: np.ndarray, rng: np.random.Generator) -> int:
    """返回最大分数的下标，并列时用 rng 均匀随机打破"""
    best = np.max(scores)
    tied = np.flatnonzero(scores >= best - TIE_TOLERANCE * max(1.0, abs(best)))
    if len(tied) == 1:
        return int(tied[0])
    return int(rng.choice(tied))


def _value(state: BeliefState, matrix: np.ndarray) -> float:
    """V(K) = max_a' p(y = +1 | x, a', K)"""
    return float(np.max(predict_many(state, matrix)[2]))


def _kg_values(reshaped: BeliefState, matrix: np.ndarray) -> np.ndarray:
    baseline = _value(reshaped, matrix)
    values = np.empty(matrix.shape[0])

    for i, phi in enumerate(matrix):
        p_plus = predict(reshaped, phi).p_success
        after_success = update(reshaped, phi, 1)
        after_failure = update(reshaped, phi, -1)
        values[i] = (
            p_plus * _value(after_success, matrix)
            + (1.0 - p_plus) * _value(after_failure, matrix)
            - baseline
        )
    return values


def kg_value(
    state: BeliefState,
    context: PatientContext,
    action: Action,
    space: ActionSpace,
    eta: float = 1.0
) -> float:
    """
    单步知识梯度 ν_a^KG：对两种可能结果取期望后的价值提升

    在重塑后的状态 K̃ = reshape(state, η) 上计算；假想的更新在此丢弃。

    Args:
        state: 信念状态
        context: 当前病人
        action: 待评估的动作
        space: 动作空间
        eta: 后验重塑系数

    Returns:
        知识梯度值
    """
    _require_actions(space)
    matrix = assemble_matrix(context, space)
    reshaped = reshape(state, eta)
    phi = matrix[space.index(action)]

    p_plus = predict(reshaped, phi).p_success
    value_plus = _value(update(reshaped, phi, 1), matrix)
    value_minus = _value(update(reshaped, phi, -1), matrix)
    return p_plus * value_plus + (1.0 - p_plus) * value_minus - _value(reshaped, matrix)


def score_actions(
    state: BeliefState,
    context: PatientContext,
    space: ActionSpace,
    tau: float,
    eta: float = 1.0
) -> List[ScoredAction]:
    """
    计算 KG 决策规则的完整打分表

    exploit_score 使用未重塑的状态；tau = 0 时跳过知识梯度的计算。
    """
    _require_actions(space)
    matrix = assemble_matrix(context, space)
    exploit = predict_many(state, matrix)[2]

    if tau == 0:
        kg = np.zeros(len(exploit))
    else:
        kg = _kg_values(reshape(state, eta), matrix)

    total = exploit + tau * kg
    return [
        ScoredAction(action, float(exploit[i]), float(kg[i]), float(total[i]))
        for i, action in enumerate(space.actions)
    ]


def choose_kg(
    state: BeliefState,
    context: PatientContext,
    space: ActionSpace,
    tau: float,
    eta: float,
    rng: np.random.Generator
) -> Action:
    """arg max_a p(y = +1 | x, a) + τ·ν_a^KG"""
    scored = score_actions(state, context, space, tau, eta)
    totals = np.array([s.total for s in scored])
    choice = scored[argmax_with_ties(totals, rng)]
    logger.debug(f"KG 选择 {choice.action}: exploit={choice.exploit_score:.4f}, kg={choice.kg_value:.3e}")
    return choice.action


def choose_thompson(
    state: BeliefState,
    context: PatientContext,
    space: ActionSpace,
    rng: np.random.Generator
) -> Action:
    """采样一次权重 ŵ，对所有动作用同一个样本打分"""
    _require_actions(space)
    matrix = assemble_matrix(context, space)
    w_hat = sample_weights(state, rng)
    # σ 单调，按 ŵ·φ 比较即可
    return space.actions[argmax_with_ties(matrix @ w_hat, rng)]


def choose_exploit(
    state: BeliefState,
    context: PatientContext,
    space: ActionSpace,
    rng: np.random.Generator
) -> Action:
    _require_actions(space)
    scores = predict_many(state, assemble_matrix(context, space))[2]
    return space.actions[argmax_with_ties(scores, rng)]


def choose_explore(space: ActionSpace, rng: np.random.Generator) -> Action:
    _require_actions(space)
    return space.actions[int(rng.integers(space.size))]


def select_action(
    policy: PolicyConfig,
    state: BeliefState,
    context: PatientContext,
    space: ActionSpace,
    rng: np.random.Generator,
    step: int = 0,
    horizon: Optional[int] = None,
    oracle: Optional[Callable[[PatientContext, ActionSpace, np.random.Generator], Action]] = None
) -> Action:
    """
    按策略配置分发到具体的选择函数

    Args:
        policy: 策略配置
        state: 当前信念状态
        context: 当前病人
        space: 动作空间
        rng: 策略随机数流
        step: 当前病人序号 n（从 0 开始）
        horizon: 病人总数 N，未知时为 None
        oracle: oracle 策略使用的选择函数（需要真实模型，由模拟器提供）

    Returns:
        选中的动作
    """
    if policy.kind == "kg":
        tau = policy.resolve_tau(step, horizon)
        return choose_kg(state, context, space, tau, policy.eta, rng)
    if policy.kind == "thompson":
        return choose_thompson(state, context, space, rng)
    if policy.kind == "exploit":
        return choose_exploit(state, context, space, rng)
    if policy.kind == "explore":
        return choose_explore(space, rng)
    if oracle is None:
        raise DomainError("oracle 策略需要真实模型")
    return oracle(context, space, rng)
