"""
分类头服务 - 多项逻辑回归头、TTT 微调、多数投票、专家混合与温度校准
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import optimize, special
from sklearn.cluster import KMeans

from services.datasets import read_container, write_container
from services.errors import ConfigError, DataFormatError
from services.neighborhood import Metric, knn
from services.numeric_core import Adam, FloatArray, ParamDict

logger = logging.getLogger(__name__)

TEMPERATURE_BOUNDS = (0.05, 20.0)


class HeadTrainingConfig(BaseModel):
    """全局分类头训练参数"""

    model_config = ConfigDict(extra="forbid")

    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(128, ge=1)
    epochs: int = Field(10, ge=1)
    weight_decay: float = Field(0.0, ge=0)


class TttConfig(BaseModel):
    """测试时训练参数（全批量 Adam）"""

    model_config = ConfigDict(extra="forbid")

    k: int = Field(50, ge=1, description="邻域大小")
    steps: int = Field(80, ge=0)
    lr: float = Field(0.02, gt=0)
    vote_k: int = Field(5, ge=1, description="多数投票邻域大小")
    metric: Metric = "cosine"


class MoeConfig(BaseModel):
    """专家混合参数"""

    model_config = ConfigDict(extra="forbid")

    n_experts: int = Field(10, ge=1)
    k: int = Field(50, ge=1, description="每个专家的微调邻域大小")
    steps: int = Field(80, ge=0)
    lr: float = Field(0.02, gt=0)
    max_iter: int = Field(100, ge=1)


@dataclass
class LinearHead:
    """线性分类头 logits = W x + b"""

    weights: FloatArray
    bias: FloatArray

    @classmethod
    def zeros(cls, n_classes: int, dim: int) -> "LinearHead":
        return cls(weights=np.zeros((n_classes, dim)), bias=np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])

    def logits(self, features) -> FloatArray:
        return np.atleast_2d(np.asarray(features, dtype=np.float64)) @ self.weights.T + self.bias

    def probabilities(self, features) -> FloatArray:
        return special.softmax(self.logits(features), axis=1)

    def predict(self, features) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def params(self) -> ParamDict:
        return {"weights": self.weights, "bias": self.bias}

    def copy(self) -> "LinearHead":
        return LinearHead(weights=self.weights.copy(), bias=self.bias.copy())


def _check_labels(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataFormatError("标签为空")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise DataFormatError("类别标签必须为整数")
        labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise DataFormatError(f"标签超出范围 [0, {n_classes})")
    return labels


def cross_entropy(logits, labels) -> tuple[float, FloatArray]:
    """
    平均交叉熵及其对 logits 的梯度 (softmax − onehot)/N

    使用 log-sum-exp 保证数值稳定。
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(labels, logits.shape[1])
    n = logits.shape[0]
    log_norm = special.logsumexp(logits, axis=1)
    loss = float(np.mean(log_norm - logits[np.arange(n), labels]))
    dlogits = np.exp(logits - log_norm[:, None])
    dlogits[np.arange(n), labels] -= 1.0
    return loss, dlogits / n


def cross_entropy_per_point(logits, labels) -> FloatArray:
    """逐点交叉熵"""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = _check_labels(labels, logits.shape[1])
    return special.logsumexp(logits, axis=1) - logits[np.arange(logits.shape[0]), labels]


def softmax_xent_grad(head: LinearHead, features, labels) -> tuple[float, ParamDict]:
    """线性头的平均交叉熵与参数梯度"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    loss, dlogits = cross_entropy(head.logits(features), labels)
    return loss, {"weights": dlogits.T @ features, "bias": dlogits.sum(axis=0)}


def _adam_fit(head: LinearHead, features, labels, lr: float, steps: int,
              batches=None, weight_decay: float = 0.0) -> LinearHead:
    optimizer = Adam(head.params(), lr=lr, weight_decay=weight_decay)
    params = head.params()
    for step in range(steps):
        idx = batches[step] if batches is not None else slice(None)
        _, grads = softmax_xent_grad(LinearHead(**params), features[idx], labels[idx])
        params = optimizer.step(params, grads)
    return LinearHead(**params)


def train_global_head(features, labels, n_classes: int, config: HeadTrainingConfig,
                      rng: np.random.Generator) -> LinearHead:
    """
    小批量 Adam 训练全局线性头

    参数从零初始化，批次顺序由 rng 决定，因此给定种子时结果可复现。
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] == 0:
        raise DataFormatError("训练集为空")
    labels = _check_labels(labels, n_classes)
    n = features.shape[0]
    batches = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        batches.extend(order[i:i + config.batch_size] for i in range(0, n, config.batch_size))
    head = _adam_fit(LinearHead.zeros(n_classes, features.shape[1]), features, labels,
                     config.lr, len(batches), batches, config.weight_decay)
    logger.info("全局分类头训练完成: %d 样本, %d 步", n, len(batches))
    return head


def ttt_finetune(base: LinearHead, features, labels, config: TttConfig) -> LinearHead:
    """在邻域上全批量微调基础头的副本，基础头本身不变"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] == 0:
        raise DataFormatError("邻域为空")
    labels = _check_labels(labels, base.n_classes)
    if config.steps == 0:
        return base.copy()
    return _adam_fit(base.copy(), features, labels, config.lr, config.steps)


def majority_vote(labels) -> int:
    """邻居标签的众数，平票时取最小类别"""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataFormatError("邻域标签为空")
    return int(np.argmax(np.bincount(labels.astype(np.int64))))


@dataclass
class MlpFeatureHead:
    """
    单隐层 ReLU 网络

    隐层输出作为 TTT 的特征空间，输出层即全局线性头。
    """

    hidden_weights: FloatArray
    hidden_bias: FloatArray
    head: LinearHead

    @property
    def width(self) -> int:
        return int(self.hidden_weights.shape[0])

    def features(self, inputs) -> FloatArray:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        return np.maximum(inputs @ self.hidden_weights.T + self.hidden_bias, 0.0)

    def logits(self, inputs) -> FloatArray:
        return self.head.logits(self.features(inputs))

    def predict(self, inputs) -> np.ndarray:
        return np.argmax(self.logits(inputs), axis=1)


def mlp_loss_and_grads(params: ParamDict, inputs, labels) -> tuple[float, ParamDict]:
    """单隐层网络的交叉熵与手推梯度"""
    pre = inputs @ params["hidden_weights"].T + params["hidden_bias"]
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ params["weights"].T + params["bias"]
    loss, dlogits = cross_entropy(logits, labels)
    dhidden = (dlogits @ params["weights"]) * (pre > 0.0)
    return loss, {
        "weights": dlogits.T @ hidden,
        "bias": dlogits.sum(axis=0),
        "hidden_weights": dhidden.T @ inputs,
        "hidden_bias": dhidden.sum(axis=0),
    }


def train_mlp_head(inputs, labels, n_classes: int, width: int, config: HeadTrainingConfig,
                   rng: np.random.Generator) -> MlpFeatureHead:
    """全局训练宽度为 width 的单隐层特征头（He 初始化）"""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.shape[0] == 0:
        raise DataFormatError("训练集为空")
    if width < 1:
        raise ConfigError(f"隐层宽度必须 ≥ 1: {width}")
    labels = _check_labels(labels, n_classes)
    n, d = inputs.shape
    params = {
        "hidden_weights": rng.standard_normal((width, d)) * np.sqrt(2.0 / d),
        "hidden_bias": np.zeros(width),
        "weights": rng.standard_normal((n_classes, width)) * np.sqrt(1.0 / width),
        "bias": np.zeros(n_classes),
    }
    optimizer = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = mlp_loss_and_grads(params, inputs[idx], labels[idx])
            params = optimizer.step(params, grads)
        logger.debug("MLP 宽度 %d 第 %d 轮完成", width, epoch + 1)
    return MlpFeatureHead(hidden_weights=params["hidden_weights"],
                          hidden_bias=params["hidden_bias"],
                          head=LinearHead(weights=params["weights"], bias=params["bias"]))


@dataclass
class RandomReluMap:
    """固定的随机 ReLU 特征映射"""

    matrix: FloatArray
    bias: FloatArray

    def transform(self, inputs) -> FloatArray:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        return np.maximum(inputs @ self.matrix.T + self.bias, 0.0)


def random_relu_features(dim: int, width: int, rng: np.random.Generator) -> RandomReluMap:
    if width < 1:
        raise ConfigError(f"特征宽度必须 ≥ 1: {width}")
    return RandomReluMap(matrix=rng.standard_normal((width, dim)) / np.sqrt(dim),
                         bias=rng.uniform(-0.5, 0.5, size=width))


@dataclass
class MoeModel:
    """按最近质心路由的专家混合"""

    centroids: FloatArray
    experts: list[LinearHead]
    base: LinearHead

    @property
    def n_experts(self) -> int:
        return len(self.experts)


def train_moe(features, labels, base: LinearHead, config: MoeConfig,
              rng: np.random.Generator) -> MoeModel:
    """
    k-means 聚类训练集，每个专家在其质心的最近邻上微调基础头

    空簇由 scikit-learn 的 Lloyd 迭代重新放置到离所属质心最远的样本。
    """
    features = np.asarray(features, dtype=np.float64)
    labels = _check_labels(labels, base.n_classes)
    n = features.shape[0]
    n_experts = config.n_experts
    if n_experts > n:
        raise ConfigError(f"专家数 {n_experts} 超过样本数 {n}")
    kmeans = KMeans(n_clusters=n_experts, init="k-means++", n_init=1,
                    max_iter=config.max_iter, random_state=int(rng.integers(2 ** 31 - 1)))
    kmeans.fit(features)
    centroids = kmeans.cluster_centers_

    ttt = TttConfig(k=min(config.k, n), steps=config.steps, lr=config.lr)
    experts = []
    for centroid in centroids:
        members = knn(centroid, features, ttt.k, metric="l2").members
        experts.append(ttt_finetune(base, features[members], labels[members], ttt))
    logger.info("专家混合训练完成: %d 个专家", n_experts)
    return MoeModel(centroids=centroids, experts=experts, base=base)


def route(moe: MoeModel, features) -> np.ndarray:
    """每个输入最近质心（L2）的编号，同距离取最小编号"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    diff = features[:, None, :] - moe.centroids[None, :, :]
    return np.argmin(np.einsum("ijk,ijk->ij", diff, diff), axis=1)


def route_and_predict(moe: MoeModel, features) -> np.ndarray:
    """由路由到的专家给出 argmax 预测"""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    assignments = route(moe, features)
    predictions = np.empty(features.shape[0], dtype=np.int64)
    for expert_id in np.unique(assignments):
        rows = assignments == expert_id
        predictions[rows] = moe.experts[expert_id].predict(features[rows])
    return predictions


@dataclass
class PredictiveComparison:
    """两个模型预测分布的逐点比较"""

    ref_top: FloatArray
    other_top: FloatArray
    temperatures: FloatArray
    at_bound: np.ndarray

    @property
    def mean_rel_tv(self) -> FloatArray:
        """逐秩的总体相对总变差（先对点取平均再求比值）"""
        return relative_tv(self.ref_top, self.other_top)


def _kl(p_ref: FloatArray, logits_other: FloatArray, tau: float) -> float:
    log_q = special.log_softmax(logits_other / tau)
    support = p_ref > 0
    return float(np.sum(p_ref[support] * (np.log(p_ref[support]) - log_q[support])))


def fit_temperature(ref_logits, other_logits) -> tuple[float, bool]:
    """
    单点温度 τ：在 [0.05, 20] 上最小化 KL(p_ref ‖ softmax(logits_other/τ))

    Returns:
        (τ, 是否落在边界)
    """
    p_ref = special.softmax(np.asarray(ref_logits, dtype=np.float64))
    other = np.asarray(other_logits, dtype=np.float64)
    result = optimize.minimize_scalar(lambda tau: _kl(p_ref, other, tau),
                                      bounds=TEMPERATURE_BOUNDS, method="bounded",
                                      options={"xatol": 1e-8})
    tau = float(np.clip(result.x, *TEMPERATURE_BOUNDS))
    at_bound = min(tau - TEMPERATURE_BOUNDS[0], TEMPERATURE_BOUNDS[1] - tau) < 1e-3
    return tau, at_bound


def relative_tv(a, b) -> FloatArray:
    """
    逐秩相对总变差 E|a − b| / ((E a + E b)/2)，分母为零时记 0

    Args:
        a, b: n×t 的逐点前 t 个概率；一维输入视为单个点
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    spread = np.mean(np.abs(a - b), axis=0)
    mean = 0.5 * (a.mean(axis=0) + b.mean(axis=0))
    safe = np.where(mean > 0, mean, 1.0)
    return np.where(mean > 0, spread / safe, 0.0)


def calibrate_and_compare(ref_logits, other_logits, t: int) -> PredictiveComparison:
    """
    逐点温度校准后比较两个模型的前 t 个概率

    Args:
        ref_logits: 参考模型 logits (n×C)
        other_logits: 被校准模型 logits (n×C)
        t: 比较的秩位数
    """
    ref_logits = np.atleast_2d(np.asarray(ref_logits, dtype=np.float64))
    other_logits = np.atleast_2d(np.asarray(other_logits, dtype=np.float64))
    if ref_logits.shape != other_logits.shape:
        raise DataFormatError(f"logits 形状不一致: {ref_logits.shape} vs {other_logits.shape}")
    n, n_classes = ref_logits.shape
    if not 1 <= t <= n_classes:
        raise ConfigError(f"t 必须满足 1 ≤ t ≤ {n_classes}")

    temperatures = np.empty(n)
    at_bound = np.zeros(n, dtype=bool)
    ref_top = np.empty((n, t))
    other_top = np.empty((n, t))
    for i in range(n):
        temperatures[i], at_bound[i] = fit_temperature(ref_logits[i], other_logits[i])
        p_ref = special.softmax(ref_logits[i])
        p_other = special.softmax(other_logits[i] / temperatures[i])
        ref_top[i] = np.sort(p_ref)[::-1][:t]
        other_top[i] = np.sort(p_other)[::-1][:t]
    if at_bound.any():
        logger.warning("%d 个点的温度落在边界上", int(at_bound.sum()))
    return PredictiveComparison(ref_top=ref_top, other_top=other_top, temperatures=temperatures,
                                at_bound=at_bound)


def save_head(head: LinearHead, path: str | Path) -> Path:
    """HED1 容器：meta = (C, d)，数组顺序 W, b"""
    return write_container(path, b"HED1", [head.n_classes, head.dim], [head.weights, head.bias])


def load_head(path: str | Path) -> LinearHead:
    _, meta, arrays = read_container(path, b"HED1")
    if len(meta) != 2 or len(arrays) != 2:
        raise DataFormatError("分类头文件结构不完整")
    n_classes, dim = meta
    weights, bias = arrays
    if weights.shape != (n_classes, dim) or bias.shape != (n_classes,):
        raise DataFormatError("分类头矩阵形状与头部不一致")
    return LinearHead(weights=weights, bias=bias)


def save_moe(moe: MoeModel, path: str | Path) -> Path:
    """MOE1 容器：meta = (E, C, d)，数组顺序 质心, 基础头 W, b, 之后每个专家的 W, b"""
    arrays = [moe.centroids, moe.base.weights, moe.base.bias]
    for expert in moe.experts:
        arrays += [expert.weights, expert.bias]
    return write_container(path, b"MOE1", [moe.n_experts, moe.base.n_classes, moe.base.dim],
                           arrays)


def load_moe(path: str | Path) -> MoeModel:
    _, meta, arrays = read_container(path, b"MOE1")
    if len(meta) != 3:
        raise DataFormatError("专家混合文件头部不完整")
    n_experts, n_classes, dim = meta
    if len(arrays) != 3 + 2 * n_experts:
        raise DataFormatError(f"专家混合文件应含 {3 + 2 * n_experts} 个数组，实际 {len(arrays)}")
    centroids = arrays[0]
    if centroids.shape != (n_experts, dim):
        raise DataFormatError("质心矩阵形状与头部不一致")
    heads = [LinearHead(weights=arrays[i], bias=arrays[i + 1]) for i in range(1, len(arrays), 2)]
    for head in heads:
        if head.weights.shape != (n_classes, dim):
            raise DataFormatError("专家头矩阵形状与头部不一致")
    return MoeModel(centroids=centroids, experts=heads[1:], base=heads[0])
