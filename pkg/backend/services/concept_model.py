"""
概念世界服务 - 稀疏概念向量、叠加特征映射、不可全局学习实例与假设检查
"""

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg

from services.errors import ConfigError
from services.estimators import EXHAUSTIVE_BUDGET, fit_ttt_sparse
from services.neighborhood import containment_slack, radius_neighborhood
from services.numeric_core import FloatArray, make_rng

logger = logging.getLogger(__name__)

# 概念取值 |v| ∈ [0.5, 1]，对应 C_{Φ,∞} = 1
VALUE_LOW = 0.5
VALUE_BOUND = 1.0

# GRE 常数穷举支撑集的上限
KAPPA_EXHAUSTIVE_LIMIT = 10 ** 4


class WorldSpec(BaseModel):
    """可回放的合成世界配置"""

    model_config = ConfigDict(extra="forbid")

    d1: int = Field(256, ge=1, description="概念维度")
    d2: int = Field(64, ge=1, description="特征维度")
    s: int = Field(4, ge=1, description="概念稀疏度")
    law: Literal["uniform", "clustered"] = "clustered"
    noise_var: float = Field(0.0, ge=0.0)
    w_law: Literal["gaussian", "ones", "pool_sparse"] = "gaussian"
    projection: Literal["superposition", "identity"] = "superposition"
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_dims(self) -> "WorldSpec":
        if self.s > self.d1:
            raise ValueError(f"稀疏度 s={self.s} 不能超过 d1={self.d1}")
        if self.projection == "identity" and self.d2 != self.d1:
            raise ValueError("identity 投影要求 d2 = d1")
        return self

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.model_dump_json(indent=2), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "WorldSpec":
        try:
            return cls.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
        except ValueError as e:
            raise ConfigError(f"世界配置无效 {path}: {e}") from e


@dataclass(frozen=True)
class SparseVector:
    """按下标升序存储的稀疏概念向量 Φ(x)"""

    dim: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.indices.shape != self.values.shape:
            raise ConfigError("下标与取值长度不一致")
        if self.indices.size:
            if np.any(np.diff(self.indices) <= 0):
                raise ConfigError("稀疏向量下标必须严格递增")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ConfigError(f"稀疏向量下标越界 (dim={self.dim})")

    @classmethod
    def from_dense(cls, dense, atol: float = 0.0) -> "SparseVector":
        dense = np.asarray(dense, dtype=np.float64).ravel()
        idx = np.flatnonzero(np.abs(dense) > atol)
        return cls(dim=dense.size, indices=idx, values=dense[idx])

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> FloatArray:
        dense = np.zeros(self.dim)
        dense[self.indices] = self.values
        return dense


@dataclass
class Sample:
    """单个样本 (Φ(x), Ψ(x), y)"""

    concept: SparseVector
    feature: FloatArray
    label: float
    cell_id: Optional[int] = None


@dataclass
class Dataset:
    """
    按行存储的样本集合

    concepts: N×d₁ 稠密概念矩阵（每行 s-稀疏）
    features: N×d₂ 特征 Ψ = Φ Pᵀ
    labels:   带噪标签
    targets:  无噪目标 f(x) = ⟨Φ(x), w★⟩
    pool_ids: 聚类律下的概念池编号，均匀律为 -1
    """

    concepts: FloatArray
    features: FloatArray
    labels: FloatArray
    targets: FloatArray
    pool_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.size)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.concepts[idx], self.features[idx], self.labels[idx],
                       self.targets[idx], self.pool_ids[idx])

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            cell = int(self.pool_ids[i])
            yield Sample(concept=SparseVector.from_dense(self.concepts[i]),
                         feature=self.features[i], label=float(self.labels[i]),
                         cell_id=cell if cell >= 0 else None)


def concept_pools(d1: int, s: int) -> list[np.ndarray]:
    """大小 4s、步长 2s 的重叠概念池（下标对 d₁ 取模）"""
    size = 4 * s
    if size >= d1:
        return [np.arange(d1)]
    stride = 2 * s
    return [np.sort((start + np.arange(size)) % d1) for start in range(0, d1, stride)]


def make_superposition_map(d1: int, d2: int, rng: np.random.Generator) -> FloatArray:
    """d₂×d₁ 叠加映射，每列在单位球面上均匀分布"""
    if d1 < 1 or d2 < 1:
        raise ConfigError(f"维度必须为正: d1={d1}, d2={d2}")
    columns = rng.standard_normal((d2, d1))
    norms = np.linalg.norm(columns, axis=0)
    # 零列概率为零，仍重新抽取
    while np.any(norms == 0.0):
        bad = norms == 0.0
        columns[:, bad] = rng.standard_normal((d2, int(bad.sum())))
        norms = np.linalg.norm(columns, axis=0)
    return columns / norms


def _ground_truth(spec: WorldSpec, rng: np.random.Generator) -> FloatArray:
    if spec.w_law == "ones":
        return np.ones(spec.d1)
    if spec.w_law == "gaussian":
        return rng.standard_normal(spec.d1)
    # pool_sparse: 每个步长 2s 的块中前 ⌈s/2⌉ 个概念非零
    weights = np.zeros(spec.d1)
    head = math.ceil(spec.s / 2)
    for start in range(0, spec.d1, 2 * spec.s):
        idx = np.arange(start, min(start + head, spec.d1))
        signs = rng.choice([-1.0, 1.0], size=idx.size)
        weights[idx] = signs * rng.uniform(1.0, 2.0, size=idx.size)
    return weights


@dataclass
class ConceptWorld:
    """合成世界：叠加映射 P、真值 w★、概念采样律与噪声"""

    spec: WorldSpec
    projection: FloatArray
    w_star: FloatArray
    pools: list[np.ndarray] = field(default_factory=list)

    @property
    def d1(self) -> int:
        return self.spec.d1

    @property
    def d2(self) -> int:
        return self.spec.d2

    @property
    def s(self) -> int:
        return self.spec.s

    @property
    def noise_var(self) -> float:
        return self.spec.noise_var

    def local_projection(self, active) -> FloatArray:
        """保留活跃概念对应的列，其余列置零"""
        local = np.zeros_like(self.projection)
        active = np.asarray(active, dtype=np.int64)
        local[:, active] = self.projection[:, active]
        return local

    def sample(self, n: int, rng: np.random.Generator, pool: Optional[int] = None) -> Dataset:
        """
        独立抽取 n 个样本

        Args:
            n: 样本数
            rng: 随机数生成器
            pool: 聚类律下固定的概念池编号；缺省时每个样本随机选池
        """
        if n < 1:
            raise ConfigError(f"样本数必须 ≥ 1: {n}")
        d1, s = self.d1, self.s
        concepts = np.zeros((n, d1))
        pool_ids = np.full(n, -1, dtype=np.int64)
        for i in range(n):
            if self.spec.law == "clustered":
                chosen_pool = pool if pool is not None else int(rng.integers(len(self.pools)))
                candidates = self.pools[chosen_pool]
                pool_ids[i] = chosen_pool
            else:
                candidates = np.arange(d1)
            support = rng.choice(candidates, size=min(s, candidates.size), replace=False)
            values = rng.uniform(VALUE_LOW, VALUE_BOUND, size=support.size)
            values *= rng.choice([-1.0, 1.0], size=support.size)
            concepts[i, support] = np.clip(values, -VALUE_BOUND, VALUE_BOUND)

        features = concepts @ self.projection.T
        targets = concepts @ self.w_star
        noise = math.sqrt(self.noise_var) * rng.standard_normal(n) if self.noise_var else np.zeros(n)
        return Dataset(concepts=concepts, features=features, labels=targets + noise,
                       targets=targets, pool_ids=pool_ids)


def build_world(spec: WorldSpec, rng: Optional[np.random.Generator] = None) -> ConceptWorld:
    """按配置构造世界；缺省使用 spec.seed 派生的随机流"""
    rng = rng if rng is not None else make_rng(spec.seed)
    if spec.projection == "identity":
        projection = np.eye(spec.d1)
    else:
        projection = make_superposition_map(spec.d1, spec.d2, rng)
    w_star = _ground_truth(spec, rng)
    pools = concept_pools(spec.d1, spec.s) if spec.law == "clustered" else [np.arange(spec.d1)]
    logger.debug("构造世界 d1=%d d2=%d s=%d law=%s", spec.d1, spec.d2, spec.s, spec.law)
    return ConceptWorld(spec=spec, projection=projection, w_star=w_star, pools=pools)


def sample_dataset(world: ConceptWorld, n: int, rng: np.random.Generator) -> Dataset:
    """从世界中独立抽取 n 个训练样本"""
    return world.sample(n, rng)


@dataclass
class NonLearnableInstance:
    """
    不可全局学习实例

    d₁ 个等概率单元，单元 m 的概念为 e_m、特征为 p_m（单位球面），目标恒为 1。
    """

    projection: FloatArray

    @property
    def d1(self) -> int:
        return int(self.projection.shape[1])

    @property
    def d2(self) -> int:
        return int(self.projection.shape[0])

    @property
    def w_star(self) -> FloatArray:
        return np.ones(self.d1)

    def cell_features(self) -> FloatArray:
        """每个单元一行特征，d₁×d₂"""
        return self.projection.T.copy()

    def cell_projection(self, m: int) -> FloatArray:
        """单元 m 的局部重组矩阵 P_m = p_m e_mᵀ"""
        if not 0 <= m < self.d1:
            raise ConfigError(f"单元编号越界: {m}")
        local = np.zeros_like(self.projection)
        local[:, m] = self.projection[:, m]
        return local

    def to_dataset(self) -> Dataset:
        """每个单元恰好一个样本"""
        ones = np.ones(self.d1)
        return Dataset(concepts=np.eye(self.d1), features=self.cell_features(), labels=ones,
                       targets=ones.copy(), pool_ids=np.arange(self.d1))


def make_nonlearnable_instance(d1: int, d2: int, rng: np.random.Generator) -> NonLearnableInstance:
    if d2 < 1 or d2 > d1:
        raise ConfigError(f"不可学习实例要求 1 ≤ d2 ≤ d1，实际 d1={d1}, d2={d2}")
    return NonLearnableInstance(projection=make_superposition_map(d1, d2, rng))


def _min_ratio_on_support(gram: FloatArray, p_local: FloatArray, support, excluded,
                          tol: float = 1e-10) -> Optional[float]:
    """
    固定支撑集上 (1/k)‖Ψv‖² / ‖P_localᵀv‖² 的精确最小值

    可行集为排除列的零空间；分母为零的方向被剔除，
    其余方向先对分母零空间分量取 Schur 补，再解广义特征值问题。
    """
    d2 = gram.shape[0]
    basis = linalg.null_space(p_local[:, excluded].T) if len(excluded) else np.eye(d2)
    if basis.shape[1] == 0:
        return None
    a = basis.T @ gram @ basis
    projected = p_local[:, list(support)].T @ basis
    m = projected.T @ projected
    eigvals, eigvecs = linalg.eigh(m)
    scale = max(float(eigvals[-1]), 1.0)
    live = eigvals > tol * scale
    if not np.any(live):
        return None
    r_basis, n_basis = eigvecs[:, live], eigvecs[:, ~live]
    a_rr = r_basis.T @ a @ r_basis
    m_rr = r_basis.T @ m @ r_basis
    if n_basis.shape[1]:
        a_rn = r_basis.T @ a @ n_basis
        a_nn = n_basis.T @ a @ n_basis
        a_rr = a_rr - a_rn @ np.linalg.pinv(a_nn) @ a_rn.T
    a_rr = 0.5 * (a_rr + a_rr.T)
    return float(max(linalg.eigh(a_rr, m_rr, eigvals_only=True)[0], 0.0))


def restricted_eigenvalue(features, p_local, order: int, rng: np.random.Generator,
                          samples: int = 100) -> tuple[float, bool]:
    """
    广义受限特征值 κ

    在概念空间 order-稀疏方向上最小化 (1/k)‖Ψv‖² / ‖P_localᵀv‖²。
    支撑集数目不超过上限（且 order ≤ 4）时穷举，否则随机抽取 samples 个支撑集。

    Returns:
        (κ, 是否精确)
    """
    features = np.asarray(features, dtype=np.float64)
    p_local = np.asarray(p_local, dtype=np.float64)
    k = features.shape[0]
    gram = features.T @ features / k
    candidates = np.flatnonzero(np.linalg.norm(p_local, axis=0) > 1e-12)
    size = min(order, candidates.size)
    if size == 0:
        return 0.0, True

    total = math.comb(candidates.size, size)
    exact = order <= 4 and total <= KAPPA_EXHAUSTIVE_LIMIT
    if exact:
        supports = (tuple(c) for c in itertools.combinations(candidates, size))
    else:
        supports = (tuple(np.sort(rng.choice(candidates, size=size, replace=False)))
                    for _ in range(samples))

    kappa = math.inf
    for support in supports:
        chosen = set(support)
        excluded = [m for m in candidates if m not in chosen]
        value = _min_ratio_on_support(gram, p_local, support, excluded)
        if value is not None:
            kappa = min(kappa, value)
    return (kappa if math.isfinite(kappa) else 0.0), exact


@dataclass
class AssumptionReport:
    """局部假设的测量值"""

    eta_ang: float
    eta_spa: float
    eta_rep: float
    kappa: float
    kappa_exact: bool
    k: int
    active_concepts: int
    support: tuple[int, ...] = ()

    def holds(self, tolerance: float = 1e-8) -> dict[str, bool]:
        return {
            "sparse_local_model": self.eta_spa <= tolerance,
            "representation": self.eta_rep <= tolerance,
            "restricted_eigenvalue": self.kappa > tolerance,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def check_assumptions(world, dataset: Dataset, query_feature, query_concept, r: float,
                      s_prime: int, rng: np.random.Generator, tolerance: float = 1e-10,
                      kappa_samples: int = 100) -> AssumptionReport:
    """
    测量测试点邻域上的局部假设

    Args:
        world: ConceptWorld 或 NonLearnableInstance（需提供 projection 与 w_star）
        dataset: 训练集
        query_feature / query_concept: 测试点的 Ψ 与 Φ
        r: 特征空间邻域半径
        s_prime: 局部稀疏度
        tolerance: 判断概念是否活跃的阈值

    Returns:
        AssumptionReport（η_ang, η_spa, η_rep, κ）
    """
    d1 = world.projection.shape[1]
    if s_prime < 1 or s_prime > d1:
        raise ConfigError(f"s' 必须满足 1 ≤ s' ≤ d1={d1}，实际 {s_prime}")

    neighborhood = radius_neighborhood(query_feature, dataset.features, r)
    members = neighborhood.members
    local_concepts = dataset.concepts[members]
    query_concept = np.asarray(query_concept, dtype=np.float64).ravel()
    active_mask = np.any(np.abs(local_concepts) > tolerance, axis=0) | (np.abs(query_concept) > tolerance)
    active = np.flatnonzero(active_mask)
    p_local = np.zeros_like(world.projection)
    p_local[:, active] = world.projection[:, active]

    eta_ang = containment_slack(query_feature, query_concept, dataset.features,
                                dataset.concepts, r)

    eta_spa, support = 0.0, ()
    kappa, kappa_exact = 0.0, True
    if neighborhood.k:
        feasible_exhaustive = (math.comb(d1, min(s_prime, d1)) <= EXHAUSTIVE_BUDGET
                               and math.comb(active.size, min(s_prime, active.size))
                               <= KAPPA_EXHAUSTIVE_LIMIT)
        model = fit_ttt_sparse(dataset.features[members], dataset.labels[members], p_local,
                               s_prime, mode="exhaustive" if feasible_exhaustive else "greedy")
        eta_spa, support = model.residual, model.support
        kappa, kappa_exact = restricted_eigenvalue(dataset.features[members], p_local,
                                                   2 * s_prime, rng, kappa_samples)

    # 局部真值在 P_local 行空间外的分量
    w_local = np.zeros(d1)
    w_local[active] = np.asarray(world.w_star)[active]
    eta_rep = 0.0
    if active.size:
        row_basis = linalg.orth(p_local.T)
        residual = w_local - row_basis @ (row_basis.T @ w_local)
        eta_rep = float(np.linalg.norm(residual))

    report = AssumptionReport(eta_ang=eta_ang, eta_spa=eta_spa, eta_rep=eta_rep, kappa=kappa,
                              kappa_exact=kappa_exact, k=neighborhood.k,
                              active_concepts=int(active.size), support=tuple(support))
    logger.debug("假设检查: %s", report)
    return report


def label_by_target(targets, edges) -> np.ndarray:
    """按目标值所在分位区间划分类别"""
    return np.searchsorted(np.asarray(edges), np.asarray(targets), side="right").astype(np.int64)


def class_edges(targets, n_classes: int) -> FloatArray:
    """把目标值划成 n_classes 个等频区间的内部分位点"""
    if n_classes < 2:
        raise ConfigError(f"类别数必须 ≥ 2: {n_classes}")
    return np.quantile(np.asarray(targets, dtype=np.float64),
                       np.linspace(0.0, 1.0, n_classes + 1)[1:-1])


def synthetic_classification(world: ConceptWorld, n_train: int, n_test: int, n_classes: int,
                             rng: np.random.Generator
                             ) -> tuple[Dataset, np.ndarray, Dataset, np.ndarray]:
    """
    由世界的线性目标派生分类任务

    类别为 f(x) = ⟨Φ(x), w★⟩ 在训练集上的 n_classes 分位区间，测试集沿用训练集的分位点。
    """
    if n_classes < 2:
        raise ConfigError(f"类别数必须 ≥ 2: {n_classes}")
    train = world.sample(n_train, rng)
    test = world.sample(n_test, rng)
    edges = class_edges(train.targets, n_classes)
    return train, label_by_target(train.targets, edges), test, label_by_target(test.targets, edges)
