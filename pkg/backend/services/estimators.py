"""
回归估计服务 - 全局最小范数最小二乘、概念空间稀疏约束的局部(TTT)估计、岭回归与k近邻回归
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from services.errors import BudgetError, ConfigError
from services.neighborhood import Neighborhood
from services.numeric_core import FloatArray, bootstrap_ci, make_rng

logger = logging.getLogger(__name__)

SearchMode = Literal["exhaustive", "greedy"]

# 穷举支撑集的上限
EXHAUSTIVE_BUDGET = 10 ** 6


@dataclass
class GlobalModel:
    """全局线性模型"""

    weights: FloatArray
    residual: float = 0.0
    rank: int = 0

    def predict(self, features) -> FloatArray:
        return np.asarray(features, dtype=np.float64) @ self.weights


@dataclass
class LocalModel:
    """局部稀疏模型：Pᵀv 只在 support 上非零"""

    weights: FloatArray
    support: tuple[int, ...]
    residual: float = 0.0
    neighborhood: Optional[Neighborhood] = None
    path: list[float] = field(default_factory=list)

    def predict(self, features) -> FloatArray:
        return np.asarray(features, dtype=np.float64) @ self.weights


@dataclass
class InterferenceResult:
    """全局训练在不可全局学习实例上的干扰误差"""

    error: float
    expected: float
    rank: int


@dataclass
class ErrorReport:
    """TTT 误差随邻域大小的曲线"""

    k_values: list[int]
    errors: list[FloatArray]
    noise_floor: float = 0.0
    seed: Optional[int] = None

    @property
    def mean_errors(self) -> FloatArray:
        return np.array([float(np.mean(e)) for e in self.errors])

    def loglog_slope(self) -> float:
        """log(平均误差) 对 log(k) 的最小二乘斜率"""
        means = self.mean_errors
        if np.any(means <= 0):
            raise ConfigError("误差为零时无法计算对数斜率")
        slope, _ = np.polyfit(np.log(self.k_values), np.log(means), 1)
        return float(slope)

    def to_frame(self, resamples: int = 1000, level: float = 0.90) -> pd.DataFrame:
        rows = []
        for k, errors in zip(self.k_values, self.errors):
            low, high = bootstrap_ci(errors, resamples, level, make_rng(self.seed or 0, k))
            rows.append({"k": k, "mean": float(np.mean(errors)), "ci_low": low,
                         "ci_high": high, "trials": len(errors), "seed": self.seed})
        return pd.DataFrame(rows)


def _svd_cutoff(singular_values: FloatArray, shape: tuple[int, int]) -> float:
    if singular_values.size == 0:
        return 0.0
    return max(shape) * np.finfo(np.float64).eps * float(singular_values[0])


def minnorm_solve(design, targets) -> tuple[FloatArray, int]:
    """
    SVD 伪逆求最小范数最小二乘解

    奇异值截断阈值为 max(行, 列)·机器精度·σ_max。

    Returns:
        (解向量, 数值秩)
    """
    design = np.asarray(design, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if design.size == 0:
        return np.zeros(design.shape[1]), 0
    u, singular, vt = np.linalg.svd(design, full_matrices=False)
    keep = singular > _svd_cutoff(singular, design.shape)
    rank = int(np.count_nonzero(keep))
    coefficients = (u[:, keep].T @ targets) / singular[keep]
    return vt[keep].T @ coefficients, rank


def fit_global_minnorm(features, labels) -> GlobalModel:
    """全局最小范数最小二乘（秩亏时由伪逆处理）"""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    weights, rank = minnorm_solve(features, labels)
    residual = labels - features @ weights
    return GlobalModel(weights=weights, residual=float(residual @ residual / max(len(labels), 1)),
                       rank=rank)


def fit_ridge(features, labels, lam: float) -> GlobalModel:
    """岭回归 (XᵀX + kλI)⁻¹Xᵀy，k 为样本数"""
    if lam < 0:
        raise ConfigError(f"λ 不能为负: {lam}")
    if lam == 0:
        return fit_global_minnorm(features, labels)
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    k, d = features.shape
    gram = features.T @ features + k * lam * np.eye(d)
    weights = linalg.solve(gram, features.T @ labels, assume_a="pos")
    residual = labels - features @ weights
    return GlobalModel(weights=weights, residual=float(residual @ residual / k), rank=d)


def knn_regress(neighborhood: Neighborhood, labels) -> float:
    """邻域标签的均匀平均"""
    if neighborhood.k == 0:
        raise ConfigError("邻域为空")
    return float(np.mean(np.asarray(labels, dtype=np.float64)[neighborhood.members]))


def restricted_solve(features, labels, p_local, support: Sequence[int],
                     candidates: Sequence[int]) -> tuple[FloatArray, float]:
    """
    给定概念支撑集 S 的受限最小二乘

    可行集为 {v : p_mᵀv = 0, m ∈ 候选集 \\ S}，在该零空间的一组基上求最小范数解。

    Returns:
        (v, 均方残差)
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64).ravel()
    chosen = set(support)
    excluded = [m for m in candidates if m not in chosen]
    d2 = features.shape[1]
    if excluded:
        basis = linalg.null_space(np.asarray(p_local)[:, excluded].T)
    else:
        basis = np.eye(d2)
    if basis.shape[1] == 0:
        weights = np.zeros(d2)
    else:
        coefficients, _ = minnorm_solve(features @ basis, labels)
        weights = basis @ coefficients
    residual = labels - features @ weights
    return weights, float(residual @ residual / max(len(labels), 1))


def fit_ttt_sparse(features, labels, p_local, s_prime: int, mode: SearchMode = "greedy",
                   neighborhood: Optional[Neighborhood] = None,
                   column_tol: float = 1e-12) -> LocalModel:
    """
    概念空间稀疏约束的局部估计

    min_v (1/k)‖Ψv − y‖²  s.t.  ‖P_localᵀ v‖₀ ≤ s'

    Args:
        features: 邻域特征 Ψ (k×d₂)
        labels: 邻域标签
        p_local: 局部重组矩阵 (d₂×d₁)；全零列对应邻域中不活跃的概念，不构成约束
        s_prime: 概念空间稀疏度
        mode: exhaustive（穷举支撑集）或 greedy（前向选择）
        neighborhood: 可选，记录在结果中

    Returns:
        LocalModel
    """
    if s_prime < 1:
        raise ConfigError(f"s' 必须 ≥ 1: {s_prime}")
    p_local = np.asarray(p_local, dtype=np.float64)
    d1 = p_local.shape[1]
    candidates = [m for m in range(d1) if np.linalg.norm(p_local[:, m]) > column_tol]
    size = min(s_prime, len(candidates))

    if mode == "exhaustive":
        if math.comb(d1, min(s_prime, d1)) > EXHAUSTIVE_BUDGET:
            raise BudgetError(
                f"穷举 C({d1},{s_prime}) 个支撑集超出预算 {EXHAUSTIVE_BUDGET}，请改用 greedy 模式"
            )
        best: Optional[tuple[float, tuple[int, ...], FloatArray]] = None
        for support in itertools.combinations(candidates, size):
            weights, residual = restricted_solve(features, labels, p_local, support, candidates)
            if best is None or residual < best[0] - 1e-15:
                best = (residual, support, weights)
        if best is None:
            weights, residual = restricted_solve(features, labels, p_local, (), candidates)
            best = (residual, (), weights)
        residual, support, weights = best
        return LocalModel(weights=weights, support=tuple(support), residual=residual,
                          neighborhood=neighborhood, path=[residual])

    if mode != "greedy":
        raise ConfigError(f"未知的搜索模式: {mode}")

    # 前向选择：每步加入使受限残差下降最多的概念
    support: list[int] = []
    weights, residual = restricted_solve(features, labels, p_local, support, candidates)
    path = [residual]
    for _ in range(size):
        step_best = None
        for m in candidates:
            if m in support:
                continue
            trial_weights, trial_residual = restricted_solve(
                features, labels, p_local, support + [m], candidates)
            if step_best is None or trial_residual < step_best[0] - 1e-15:
                step_best = (trial_residual, m, trial_weights)
        if step_best is None:
            break
        residual, chosen, weights = step_best
        support.append(chosen)
        path.append(residual)
    return LocalModel(weights=weights, support=tuple(sorted(support)), residual=residual,
                      neighborhood=neighborhood, path=path)


def evaluate_interference(instance) -> InterferenceResult:
    """
    不可全局学习实例上全局最小范数模型的总体误差

    设计矩阵的行为各单元特征 p_m，目标恒为 1，
    误差 = (1/d₁)‖1 − Π1‖²，期望值 1 − d₂/d₁。
    """
    design = instance.cell_features()
    d1, d2 = design.shape
    ones = np.ones(d1)
    weights, rank = minnorm_solve(design, ones)
    residual = ones - design @ weights
    return InterferenceResult(error=float(residual @ residual / d1),
                              expected=1.0 - d2 / d1, rank=rank)


def ttt_cell_errors(instance, neighborhood_size: int = 1) -> FloatArray:
    """
    每个单元上的 TTT 平方误差

    单元 m 的邻域由该单元的样本组成，局部重组矩阵 P_m = p_m e_mᵀ。
    """
    design = instance.cell_features()
    errors = np.empty(instance.d1)
    for m in range(instance.d1):
        local_features = np.repeat(design[m:m + 1], neighborhood_size, axis=0)
        local_labels = np.ones(neighborhood_size)
        model = fit_ttt_sparse(local_features, local_labels, instance.cell_projection(m),
                               s_prime=1, mode="exhaustive")
        prediction = float(design[m] @ model.weights)
        errors[m] = (prediction - 1.0) ** 2
    return errors


def ttt_rate_curve(world, k_values: Sequence[int], s_prime: int, trials: int,
                   rng: np.random.Generator, mode: SearchMode = "greedy",
                   seed: Optional[int] = None) -> ErrorReport:
    """
    TTT 超额预测误差 (预测 − f(x★))² 随邻域大小 k 的变化

    每次试验：随机选一个概念池，抽取测试点与 max(k) 个同池邻居；
    较小的 k 取同一批邻居的前 k 个，使不同 k 之间成对可比。
    """
    k_values = [int(k) for k in k_values]
    if any(b <= a for a, b in zip(k_values, k_values[1:])):
        raise ConfigError(f"k 序列必须严格递增: {k_values}")
    k_max = k_values[-1]
    errors = [np.empty(trials) for _ in k_values]

    for t in range(trials):
        pool = int(rng.integers(len(world.pools)))
        test = world.sample(1, rng, pool=pool)
        neighbors = world.sample(k_max, rng, pool=pool)
        p_local = world.local_projection(world.pools[pool])
        for j, k in enumerate(k_values):
            model = fit_ttt_sparse(neighbors.features[:k], neighbors.labels[:k], p_local,
                                   s_prime, mode=mode)
            prediction = float(test.features[0] @ model.weights)
            errors[j][t] = (prediction - float(test.targets[0])) ** 2
        logger.debug("速率曲线试验 %d/%d 完成", t + 1, trials)

    return ErrorReport(k_values=k_values, errors=errors, noise_floor=world.noise_var,
                       seed=seed)
