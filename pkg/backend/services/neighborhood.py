"""
近邻服务 - 相似度、精确 k 近邻/半径检索与邻域几何诊断
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional

import numpy as np
import pandas as pd

from services.errors import ConfigError, RetrievalError, UndefinedSimilarityError
from services.numeric_core import FloatArray

logger = logging.getLogger(__name__)

SpaceTag = Literal["feature", "reconstruction", "concept"]
Metric = Literal["cosine", "l2"]

# 查询块大小，控制批量检索时相似度矩阵的内存
_QUERY_BLOCK = 256


@dataclass(frozen=True)
class Neighborhood:
    """测试点的邻域：成员按相似度降序，同分按数据集下标升序"""

    members: np.ndarray
    similarities: np.ndarray
    space: SpaceTag = "feature"
    query_id: Optional[int] = None
    radius: Optional[float] = None

    @property
    def k(self) -> int:
        return int(self.members.size)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "query_id": self.query_id if self.query_id is not None else -1,
            "member_id": self.members.astype(np.int64),
            "similarity": self.similarities,
            "space": self.space,
        })


@dataclass
class GeometryReport:
    """邻域几何与浓度诊断结果"""

    feature_cosines: np.ndarray = field(default_factory=lambda: np.zeros(0))
    concept_cosines: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_ang: float = 0.0
    lambda_samples: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eta_delta: float = 0.0

    def lambda_quantile(self, q: float = 0.95) -> float:
        if self.lambda_samples.size == 0:
            return 0.0
        return float(np.quantile(self.lambda_samples, q))


def cosine_similarity(a, b) -> float:
    """两个向量的余弦相似度，结果截断到 [-1, 1]"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    norm_a = np.linalg.norm(a)
    norm_b = np.linalg.norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise UndefinedSimilarityError("零向量的余弦相似度无定义")
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def cosine_similarities(query, points) -> FloatArray:
    """
    查询向量与每一行的余弦相似度

    数据集中的零行相似度记为 0（无方向）；查询为零向量时报错。
    """
    query = np.asarray(query, dtype=np.float64).ravel()
    points = np.asarray(points, dtype=np.float64)
    query_norm = np.linalg.norm(query)
    if query_norm == 0.0:
        raise UndefinedSimilarityError("查询向量为零向量")
    row_norms = np.linalg.norm(points, axis=1)
    safe = np.where(row_norms > 0.0, row_norms, 1.0)
    sims = (points @ query) / (safe * query_norm)
    sims[row_norms == 0.0] = 0.0
    return np.clip(sims, -1.0, 1.0)


def _scores(query, points, metric: Metric) -> FloatArray:
    if metric == "cosine":
        return cosine_similarities(query, points)
    diff = np.asarray(points, dtype=np.float64) - np.asarray(query, dtype=np.float64).ravel()
    return -np.sqrt(np.einsum("ij,ij->i", diff, diff))


def _check_dataset(points, k: int) -> int:
    n = len(points)
    if n == 0:
        raise RetrievalError("训练集为空，无法检索近邻")
    if k < 1 or k > n:
        raise RetrievalError(f"k={k} 超出训练集规模 {n}")
    return n


def knn(query, points, k: int, space: SpaceTag = "feature", metric: Metric = "cosine",
        query_id: Optional[int] = None) -> Neighborhood:
    """
    精确 k 近邻

    Args:
        query: 查询向量（与 points 处于同一表示空间）
        points: 训练集在该空间的表示，N×d
        k: 近邻数
        space: 表示空间标签
        metric: cosine（余弦）或 l2（欧氏距离，相似度取负距离）

    Returns:
        Neighborhood，成员按相似度降序、同分按下标升序
    """
    n = _check_dataset(points, k)
    scores = _scores(query, points, metric)
    order = np.lexsort((np.arange(n), -scores))[:k]
    return Neighborhood(members=order, similarities=scores[order], space=space,
                        query_id=query_id)


def knn_batch(queries, points, k: int, metric: Metric = "cosine") -> np.ndarray:
    """批量精确 k 近邻，返回 (查询数 × k) 的下标矩阵"""
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    _check_dataset(points, k)

    if metric == "cosine":
        row_norms = np.linalg.norm(points, axis=1)
        normalized = points / np.where(row_norms > 0.0, row_norms, 1.0)[:, None]
    else:
        sq_norms = np.einsum("ij,ij->i", points, points)

    result = np.empty((queries.shape[0], k), dtype=np.int64)
    for start in range(0, queries.shape[0], _QUERY_BLOCK):
        block = queries[start:start + _QUERY_BLOCK]
        if metric == "cosine":
            q_norms = np.linalg.norm(block, axis=1)
            if np.any(q_norms == 0.0):
                raise UndefinedSimilarityError("查询向量为零向量")
            scores = (block / q_norms[:, None]) @ normalized.T
        else:
            # 负平方距离，与负距离排序一致
            scores = 2.0 * block @ points.T - sq_norms[None, :]
        # 稳定排序保证同分时下标小者优先
        result[start:start + block.shape[0]] = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return result


def radius_neighborhood(query, points, r: float, space: SpaceTag = "feature",
                        query_id: Optional[int] = None, atol: float = 1e-12) -> Neighborhood:
    """相似度不低于 1 − r 的全部训练点（k 由半径决定）"""
    if r < 0:
        raise ConfigError(f"半径不能为负: {r}")
    points = np.asarray(points, dtype=np.float64)
    if len(points) == 0:
        return Neighborhood(members=np.zeros(0, dtype=np.int64), similarities=np.zeros(0),
                            space=space, query_id=query_id, radius=r)
    sims = cosine_similarities(query, points)
    inside = np.flatnonzero(sims >= 1.0 - r - atol)
    order = inside[np.lexsort((inside, -sims[inside]))]
    return Neighborhood(members=order, similarities=sims[order], space=space,
                        query_id=query_id, radius=r)


def containment_slack(query_feature, query_concept, features, concepts, r: float) -> float:
    """
    邻域包含松弛 η_ang

    最小的 η ≥ 0，使特征空间半径 r 邻域中的每个点都落在概念空间半径 r+η 邻域内。
    """
    neighborhood = radius_neighborhood(query_feature, features, r)
    if neighborhood.k == 0:
        return 0.0
    concept_sims = cosine_similarities(query_concept, np.asarray(concepts)[neighborhood.members])
    return float(max(0.0, np.max(1.0 - concept_sims) - r))


def sparse_dual_norm(z, m: int) -> float:
    """稀疏对偶范数：绝对值最大的 m 个分量的 L2 范数"""
    z = np.asarray(z, dtype=np.float64).ravel()
    if m < 1 or m > z.size:
        raise ConfigError(f"m 必须满足 1 ≤ m ≤ {z.size}，实际 {m}")
    squares = np.sort(z * z)[::-1]
    return float(np.sqrt(np.sum(squares[:m])))


def concentration_diagnostics(neighborhood: Neighborhood, concepts, noise_std: float,
                              s_prime: int, trials: int, rng: np.random.Generator,
                              misspecification=None, value_bound: float = 1.0,
                              query_concept=None, query_feature=None,
                              features=None) -> GeometryReport:
    """
    邻域噪声浓度诊断

    1. 重复抽取噪声 ε，记录 ‖(1/k)Φᵀε‖*_{2,2s'} 的样本 Λ̂
    2. 给定失配向量 Δ 时计算 η̂_Δ = √(2s')·C_∞·√(‖Δ‖²/k)
    3. 若提供查询点，记录邻居在两个空间中的余弦
    """
    if neighborhood.k == 0:
        raise RetrievalError("邻域为空，无法计算浓度诊断")
    local = np.asarray(concepts, dtype=np.float64)[neighborhood.members]
    k = neighborhood.k
    order = 2 * s_prime

    lambda_samples = np.empty(trials)
    for t in range(trials):
        noise = noise_std * rng.standard_normal(k)
        lambda_samples[t] = sparse_dual_norm(local.T @ noise / k, min(order, local.shape[1]))

    eta_delta = 0.0
    if misspecification is not None:
        delta = np.asarray(misspecification, dtype=np.float64).ravel()
        eta_delta = float(np.sqrt(order) * value_bound * np.sqrt(delta @ delta / k))

    report = GeometryReport(lambda_samples=lambda_samples, eta_delta=eta_delta)
    if query_concept is not None:
        report.concept_cosines = cosine_similarities(query_concept, local)
    if query_feature is not None and features is not None:
        report.feature_cosines = cosine_similarities(
            query_feature, np.asarray(features)[neighborhood.members])
    return report


def neighborhood_concept_cosine(query_feature, query_concept, features, concepts,
                                k: int) -> tuple[float, float]:
    """
    分别在特征空间与概念空间选取 k 近邻，
    返回两组邻居在概念空间中与查询点的平均余弦
    """
    by_feature = knn(query_feature, features, k, space="feature")
    by_concept = knn(query_concept, concepts, k, space="concept")
    concepts = np.asarray(concepts)
    mean_feature = float(np.mean(cosine_similarities(query_concept, concepts[by_feature.members])))
    mean_concept = float(np.mean(cosine_similarities(query_concept, concepts[by_concept.members])))
    return mean_feature, mean_concept


def write_neighborhoods_csv(neighborhoods: Iterable[Neighborhood], path: str | Path) -> Path:
    """导出邻域为 CSV（query_id, member_id, similarity, space）"""
    frames = [nb.to_frame() for nb in neighborhoods]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["query_id", "member_id", "similarity", "space"])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.17g")
    logger.info("邻域已导出: %s (%d 行)", path, len(table))
    return path
