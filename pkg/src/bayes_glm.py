"""
在线贝叶斯逻辑回归
对角高斯 Laplace 近似后验：先验构造、单观测递推更新、调和预测概率、权重采样和后验重塑
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Tuple, Union

import numpy as np
import orjson
from scipy.optimize import bisect
from scipy.special import expit

from .errors import DomainError, NumericError
from .model_core import ActionSpace, EncodedInstance, Observation, assemble

logger = logging.getLogger(__name__)

BISECTION_XTOL = 1e-10
BISECTION_MAXITER = 200

PhiLike = Union[EncodedInstance, np.ndarray]


def _frozen(values) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.flags.writeable = False
    return array


def _as_phi(phi: PhiLike) -> np.ndarray:
    return phi.phi if isinstance(phi, EncodedInstance) else np.asarray(phi, dtype=float)


@dataclass(frozen=True)
class BeliefState:
    """知识状态 K^n = (m, q)：后验均值与后验精度（方差的倒数）"""

    m: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        m = _frozen(self.m)
        q = _frozen(self.q)
        if m.ndim != 1 or m.shape != q.shape:
            raise DomainError(f"m 与 q 的长度必须一致: {m.shape} vs {q.shape}")
        if not np.all(q > 0):
            raise DomainError("后验精度 q 必须全部为正")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "q", q)

    @property
    def d(self) -> int:
        return int(self.m.shape[0])

    def to_dict(self) -> dict:
        return {"d": self.d, "m": self.m.tolist(), "q": self.q.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "BeliefState":
        state = cls(data["m"], data["q"])
        if int(data.get("d", state.d)) != state.d:
            raise DomainError(f"d = {data['d']} 与向量长度 {state.d} 不一致")
        return state


@dataclass(frozen=True)
class PredictiveResult:
    mu_b: float
    sigma2_b: float
    p_success: float


def _check_dimension(state: BeliefState, phi: np.ndarray) -> None:
    if phi.shape[-1] != state.d:
        raise DomainError(f"特征维度 {phi.shape[-1]} 与信念状态维度 {state.d} 不一致")


def kappa(sigma2: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """κ(σ²) = (1 + πσ²/8)^(-1/2)"""
    return 1.0 / np.sqrt(1.0 + np.pi * np.asarray(sigma2) / 8.0)


def init_prior(d: int, lam: float = 1.0) -> BeliefState:
    """
    独立高斯先验 N(0, 1/λ)，覆盖包括偏置在内的全部坐标

    Args:
        d: 特征维度
        lam: 先验精度 λ，等价于 l2 正则系数

    Returns:
        BeliefState
    """
    if int(d) < 1:
        raise DomainError(f"维度 d 必须 >= 1，实际为 {d}")
    if not lam > 0:
        raise DomainError(f"先验精度 lambda 必须 > 0，实际为 {lam}")
    return BeliefState(np.zeros(int(d)), np.full(int(d), float(lam)))


def update(state: BeliefState, phi: PhiLike, y: int) -> BeliefState:
    """
    吸收一个观测 (φ, y) 后的 Laplace 递推更新

    MAP 解 m' 最小化 ½Σ q_j(w_j − m_j)² + log(1 + exp(−y·w·φ))。
    由驻点条件 m' = m + y·(φ/q)·ρ，其中 ρ = σ(−y·m'·φ)，问题化为 [0, 1] 上的标量方程
    ρ = σ(−y·(m·φ) − ρ·s)，s = Σ φ_j²/q_j，用二分法求唯一根。
    精度按众数处的曲率更新 q'_j = q_j + ζ(1 − ζ)φ_j²，ζ = σ(−m'·φ)。

    Args:
        state: 当前信念状态（不会被修改）
        phi: 特征向量
        y: 观测结果 -1 或 +1

    Returns:
        新的 BeliefState
    """
    phi = _as_phi(phi)
    _check_dimension(state, phi)
    if y not in (-1, 1):
        raise DomainError(f"y 必须为 -1 或 +1，实际为 {y}")

    scaled = phi / state.q
    s = float(np.dot(phi, scaled))
    margin = float(y * np.dot(state.m, phi))

    def residual(rho: float) -> float:
        return rho - expit(-margin - rho * s)

    try:
        rho = bisect(residual, 0.0, 1.0, xtol=BISECTION_XTOL, maxiter=BISECTION_MAXITER)
    except (RuntimeError, ValueError) as e:
        raise NumericError(f"二分法求 MAP 失败 (margin={margin:.6g}, s={s:.6g}): {e}")

    m_new = state.m + y * scaled * rho
    zeta = expit(-float(np.dot(m_new, phi)))
    q_new = state.q + zeta * (1.0 - zeta) * phi ** 2
    return BeliefState(m_new, q_new)


def predict(state: BeliefState, phi: PhiLike) -> PredictiveResult:
    """
    对权重边缘化后的预测成功概率 σ(κ(σ_b²)·μ_b)

    Args:
        state: 信念状态
        phi: 特征向量

    Returns:
        PredictiveResult
    """
    phi = _as_phi(phi)
    _check_dimension(state, phi)
    mu_b = float(np.dot(state.m, phi))
    sigma2_b = float(np.dot(phi ** 2, 1.0 / state.q))
    p_success = float(expit(kappa(sigma2_b) * mu_b))
    return PredictiveResult(mu_b, sigma2_b, p_success)


def predict_many(state: BeliefState, matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """predict 的批量版本，对矩阵每一行返回 (mu_b, sigma2_b, p_success)"""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    _check_dimension(state, matrix)
    mu_b = matrix @ state.m
    sigma2_b = (matrix ** 2) @ (1.0 / state.q)
    return mu_b, sigma2_b, expit(kappa(sigma2_b) * mu_b)


def sample_weights(state: BeliefState, rng: np.random.Generator) -> np.ndarray:
    """从后验中独立采样 w_j ~ N(m_j, 1/q_j)"""
    return rng.normal(state.m, 1.0 / np.sqrt(state.q))


def reshape(state: BeliefState, eta: float) -> BeliefState:
    """
    后验重塑：方差乘以 η²，即 q' = q / η²

    只用于知识梯度的计算，不能作为模型状态保存。
    """
    if not eta > 0:
        raise DomainError(f"eta 必须 > 0，实际为 {eta}")
    if eta == 1.0:
        return state
    return BeliefState(state.m, state.q / (eta * eta))


def fit_history(
    state: BeliefState,
    observations: Iterable[Observation],
    space: ActionSpace
) -> BeliefState:
    """
    用一段按时间排序的历史观测依次更新信念，得到有信息的先验

    Args:
        state: 起始状态（通常为 init_prior 的结果）
        observations: 历史观测
        space: 动作空间

    Returns:
        吸收全部历史观测后的 BeliefState
    """
    count = 0
    for observation in observations:
        p, f = observation.action
        phi = assemble(observation.context, p, f, space)
        state = update(state, phi, observation.outcome)
        count += 1
    logger.info(f"✅ 历史数据拟合完成，共吸收 {count} 个观测")
    return state


def save_belief(state: BeliefState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(state.to_dict(), option=orjson.OPT_INDENT_2))
    return path


def load_belief(path: Union[str, Path]) -> BeliefState:
    try:
        data = orjson.loads(Path(path).read_bytes())
    except orjson.JSONDecodeError as e:
        raise DomainError(f"信念状态文件 {path} 不是合法 JSON: {e}")
    if not isinstance(data, dict) or "m" not in data or "q" not in data:
        raise DomainError(f"信念状态文件 {path} 缺少 m 或 q 字段")
    return BeliefState.from_dict(data)
