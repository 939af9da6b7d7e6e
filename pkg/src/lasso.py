"""
L1 正则逻辑回归路径
IRLS + 软阈值坐标下降，热启动沿 λ 网格求解；k 折交叉验证与 1-SE 规则选择特征
"""

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit
from sklearn.model_selection import KFold, StratifiedKFold
from tqdm import tqdm

from .errors import DomainError, NumericError

logger = logging.getLogger(__name__)

CONVERGENCE_TOLERANCE = 1e-7
MAX_OUTER_ITERATIONS = 100
MAX_INNER_SWEEPS = 1000
MIN_IRLS_WEIGHT = 1e-5
FOLD_RETRIES = 20


@dataclass(frozen=True)
class LassoPath:
    """
    正则化路径

    lambdas 严格递减；coefs[i] 为第 i 个 λ 下的罚项系数，截距单独存放且不受罚；
    train_deviance 为训练集上的平均二项偏差。
    """

    lambdas: np.ndarray
    intercepts: np.ndarray
    coefs: np.ndarray
    train_deviance: np.ndarray
    feature_names: Tuple[str, ...]
    cv_mean: Optional[np.ndarray] = None
    cv_se: Optional[np.ndarray] = None
    degenerate: bool = False

    @property
    def nnz(self) -> np.ndarray:
        return np.count_nonzero(self.coefs, axis=1)

    def support(self, index: int) -> List[str]:
        return [self.feature_names[j] for j in np.flatnonzero(self.coefs[index])]


@dataclass(frozen=True)
class CVSelection:
    path: LassoPath
    lambda_min: float
    lambda_1se: float
    index_min: int
    index_1se: int
    selected_features: List[str]


def binomial_deviance(X: np.ndarray, y: np.ndarray, intercept: float, coef: np.ndarray) -> float:
    """平均二项偏差 −(2/n)·Σ[y·η − log(1 + e^η)]"""
    eta = intercept + X @ coef
    return float(2.0 * np.mean(np.logaddexp(0.0, eta) - y * eta))


def _soft_threshold(value: float, threshold: float) -> float:
    if value > threshold:
        return value - threshold
    if value < -threshold:
        return value + threshold
    return 0.0


def _coordinate_sweep(
    X: np.ndarray,
    weights: np.ndarray,
    residual: np.ndarray,
    coef: np.ndarray,
    scale: np.ndarray,
    lam: float,
    columns: Sequence[int]
) -> float:
    """对给定列做一轮坐标更新（原地修改 coef 和 residual），返回最大系数变化"""
    n = X.shape[0]
    max_change = 0.0
    for j in columns:
        if scale[j] == 0:
            continue
        column = X[:, j]
        rho = float((weights * column) @ residual) / n + scale[j] * coef[j]
        new = _soft_threshold(rho, lam) / scale[j]
        diff = new - coef[j]
        if diff != 0.0:
            residual -= diff * column
            coef[j] = new
            max_change = max(max_change, abs(diff))
    return max_change


def _fit_single(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    intercept: float,
    coef: np.ndarray
) -> Tuple[float, np.ndarray, bool]:
    """
    固定 λ 下最小化 平均负对数似然 + λ‖w‖₁

    外层 IRLS 构造加权最小二乘近似，内层用活动集坐标下降求解；从传入的解热启动。
    """
    n, p = X.shape
    coef = coef.copy()
    all_columns = range(p)

    for _ in range(MAX_OUTER_ITERATIONS):
        eta = intercept + X @ coef
        prob = expit(eta)
        weights = np.clip(prob * (1.0 - prob), MIN_IRLS_WEIGHT, None)
        residual = (y - prob) / weights
        scale = (weights @ (X ** 2)) / n

        old_intercept, old_coef = intercept, coef.copy()
        for _ in range(MAX_INNER_SWEEPS):
            shift = float(weights @ residual) / float(weights.sum())
            intercept += shift
            residual -= shift
            change = max(abs(shift), _coordinate_sweep(X, weights, residual, coef, scale, lam, all_columns))
            if change < CONVERGENCE_TOLERANCE:
                break

            active = np.flatnonzero(coef)
            for _ in range(MAX_INNER_SWEEPS):
                shift = float(weights @ residual) / float(weights.sum())
                intercept += shift
                residual -= shift
                inner = max(abs(shift), _coordinate_sweep(X, weights, residual, coef, scale, lam, active))
                if inner < CONVERGENCE_TOLERANCE:
                    break

        outer_change = max(abs(intercept - old_intercept), float(np.max(np.abs(coef - old_coef), initial=0.0)))
        if outer_change < CONVERGENCE_TOLERANCE:
            return intercept, coef, True

    return intercept, coef, False


def _validate_design(X: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise DomainError(f"X 行数与 y 长度不一致: {X.shape} vs {y.shape}")
    if X.shape[0] == 0:
        raise DomainError("设计矩阵为空")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DomainError("y 只能取 0 或 1")

    constant = np.flatnonzero(np.all(X == X[0], axis=0) & (X[0] != 0))
    if len(constant):
        logger.warning(f"⚠️ 第 {constant.tolist()} 列为非零常数，与截距重复，其系数将保持为 0")
    return np.asfortranarray(X), y


def lasso_path(
    X: np.ndarray,
    y: np.ndarray,
    n_lambda: int = 25,
    lambda_min_ratio: Optional[float] = None,
    feature_names: Optional[Sequence[str]] = None,
    lambdas: Optional[np.ndarray] = None
) -> LassoPath:
    """
    沿对数等距的 λ 网格求 L1 逻辑回归路径

    λ_max = (1/n)·max_j |x_jᵀ(y − ȳ)|，网格从 λ_max 递减到 λ_max·lambda_min_ratio。

    Args:
        X: 设计矩阵 (n × p)，不含截距列
        y: 0/1 响应
        n_lambda: 网格点数
        lambda_min_ratio: 最小 λ 与 λ_max 之比，缺省时 n < p 取 0.01，否则取 1e-4
        feature_names: 列名
        lambdas: 直接指定网格（交叉验证各折沿用全数据网格）

    Returns:
        LassoPath；y 全部相同时返回仅含截距的退化路径，degenerate = True
    """
    X, y = _validate_design(X, y)
    n, p = X.shape
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j}" for j in range(p))
    if len(names) != p:
        raise DomainError(f"feature_names 长度 {len(names)} 与列数 {p} 不一致")
    if int(n_lambda) < 1:
        raise DomainError(f"n_lambda 必须 >= 1，实际为 {n_lambda}")
    if lambda_min_ratio is None:
        lambda_min_ratio = 0.01 if n < p else 1e-4
    if not 0 < lambda_min_ratio < 1:
        raise DomainError(f"lambda_min_ratio 必须在 (0, 1) 内，实际为 {lambda_min_ratio}")

    y_mean = float(y.mean())
    lambda_max = float(np.max(np.abs(X.T @ (y - y_mean)), initial=0.0)) / n
    degenerate = y_mean in (0.0, 1.0) or lambda_max == 0.0

    if lambdas is not None:
        grid = np.asarray(lambdas, dtype=float)
        if np.any(np.diff(grid) >= 0):
            raise DomainError("lambdas 必须严格递减")
    elif degenerate:
        grid = np.geomspace(1.0, lambda_min_ratio, int(n_lambda)) if n_lambda > 1 else np.ones(1)
    else:
        grid = lambda_max * (np.geomspace(1.0, lambda_min_ratio, int(n_lambda)) if n_lambda > 1 else np.ones(1))

    clipped = min(max(y_mean, MIN_IRLS_WEIGHT), 1.0 - MIN_IRLS_WEIGHT)
    intercept = float(np.log(clipped / (1.0 - clipped)))
    coef = np.zeros(p)

    if y_mean in (0.0, 1.0):
        logger.warning("⚠️ 响应全部相同，返回仅含截距的退化路径")
        k = len(grid)
        deviance = binomial_deviance(X, y, intercept, coef)
        return LassoPath(
            grid, np.full(k, intercept), np.zeros((k, p)), np.full(k, deviance),
            names, degenerate=True
        )

    intercepts, coefs, deviances = [], [], []
    for lam in grid:
        intercept, coef, converged = _fit_single(X, y, float(lam), intercept, coef)
        if not converged:
            logger.warning(f"⚠️ λ = {lam:.4g} 时 IRLS 未在 {MAX_OUTER_ITERATIONS} 轮内收敛")
        if not np.all(np.isfinite(coef)):
            raise NumericError(f"λ = {lam:.4g} 时系数发散")
        intercepts.append(intercept)
        coefs.append(coef.copy())
        deviances.append(binomial_deviance(X, y, intercept, coef))

    return LassoPath(
        grid, np.array(intercepts), np.vstack(coefs), np.array(deviances),
        names, degenerate=degenerate
    )


def _seed_from(rng: Union[None, int, np.random.Generator]) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2 ** 31 - 1))
    return int(rng or 0)


def stratified_folds(y: np.ndarray, k_folds: int, seed: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """
    按结果分层的 k 折划分；保证每个训练集同时包含两类

    Returns:
        (训练下标, 测试下标) 列表
    """
    y = np.asarray(y)
    n = len(y)
    if int(k_folds) < 2:
        raise DomainError(f"k_folds 必须 >= 2，实际为 {k_folds}")
    if k_folds > n:
        raise DomainError(f"k_folds = {k_folds} 超过样本数 {n}")

    counts = np.bincount(y.astype(int), minlength=2)
    if counts.min() < 2:
        raise DomainError(f"少数类只有 {counts.min()} 个样本，无法保证每折训练集包含两类")

    for attempt in range(FOLD_RETRIES):
        if k_folds <= counts.max():
            splitter = StratifiedKFold(n_splits=k_folds, shuffle=True, random_state=seed + attempt)
        else:
            splitter = KFold(n_splits=k_folds, shuffle=True, random_state=seed + attempt)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            folds = list(splitter.split(np.zeros(n), y))
        if all(len(np.unique(y[train])) == 2 for train, _ in folds):
            return folds
        logger.debug(f"第 {attempt + 1} 次划分存在单类训练集，重新分层")

    raise DomainError("无法构造每折训练集都包含两类的划分")


def cv_select(
    X: np.ndarray,
    y: np.ndarray,
    n_lambda: int = 25,
    k_folds: int = 10,
    rng: Union[None, int, np.random.Generator] = None,
    feature_names: Optional[Sequence[str]] = None,
    lambda_min_ratio: Optional[float] = None,
    max_workers: Optional[int] = None,
    show_progress: bool = False
) -> CVSelection:
    """
    k 折交叉验证选择 λ

    lambda_min 为平均留出偏差最小处；lambda_1se 为偏差不超过最小值加一个标准误的最大 λ；
    selected_features 为全数据路径在 lambda_1se 处的非零系数列。

    Args:
        X: 设计矩阵
        y: 0/1 响应
        n_lambda: 网格点数
        k_folds: 折数
        rng: 随机种子或 Generator，决定折的划分
        feature_names: 列名
        lambda_min_ratio: 见 lasso_path
        max_workers: 各折并行的线程数
        show_progress: 是否显示进度条

    Returns:
        CVSelection
    """
    X, y = _validate_design(X, y)
    full = lasso_path(X, y, n_lambda, lambda_min_ratio, feature_names)
    if y.mean() in (0.0, 1.0):
        return CVSelection(full, float(full.lambdas[0]), float(full.lambdas[0]), 0, 0, [])

    folds = stratified_folds(y, k_folds, _seed_from(rng))

    def held_out_deviance(fold: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        train, test = fold
        path = lasso_path(X[train], y[train], lambdas=full.lambdas, feature_names=full.feature_names)
        return np.array([
            binomial_deviance(X[test], y[test], path.intercepts[i], path.coefs[i])
            for i in range(len(full.lambdas))
        ])

    logger.info(f"📊 {k_folds} 折交叉验证, {len(full.lambdas)} 个 λ")
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        # map 按提交顺序返回，归约顺序与完成顺序无关
        deviances = np.vstack(list(tqdm(
            executor.map(held_out_deviance, folds), total=len(folds), desc="CV", disable=not show_progress
        )))

    cv_mean = deviances.mean(axis=0)
    cv_se = deviances.std(axis=0, ddof=1) / np.sqrt(len(folds))

    index_min = int(np.argmin(cv_mean))
    threshold = cv_mean[index_min] + cv_se[index_min]
    index_1se = int(np.flatnonzero(cv_mean <= threshold)[0])

    path = LassoPath(
        full.lambdas, full.intercepts, full.coefs, full.train_deviance,
        full.feature_names, cv_mean, cv_se, full.degenerate
    )
    selected = path.support(index_1se)
    logger.info(
        f"✅ lambda_min = {path.lambdas[index_min]:.4g}, lambda_1se = {path.lambdas[index_1se]:.4g}, "
        f"选中 {len(selected)} 个特征"
    )
    return CVSelection(
        path, float(path.lambdas[index_min]), float(path.lambdas[index_1se]),
        index_min, index_1se, selected
    )


def write_selection(selection: CVSelection, path: Union[str, Path]) -> Tuple[Path, Path]:
    """写出 lambda,cv_mean,cv_se,nnz,is_min,is_1se 路径表，并在同目录写 selected.txt"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lasso = selection.path
    indices = np.arange(len(lasso.lambdas))
    pd.DataFrame({
        "lambda": lasso.lambdas,
        "cv_mean": lasso.cv_mean,
        "cv_se": lasso.cv_se,
        "nnz": lasso.nnz,
        "is_min": (indices == selection.index_min).astype(int),
        "is_1se": (indices == selection.index_1se).astype(int),
    }).to_csv(path, index=False)

    selected_path = path.parent / "selected.txt"
    selected_path.write_text("".join(f"{name}\n" for name in selection.selected_features), encoding="utf-8")
    return path, selected_path
