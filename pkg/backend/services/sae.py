"""
稀疏自编码器服务 - top-k / 阈值 SAE 训练、幽灵梯度、死特征统计与自适应概念掩码
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special
from sklearn.cluster import KMeans, kmeans_plusplus

from services.classifiers import LinearHead, cross_entropy
from services.concept_model import SparseVector
from services.datasets import read_container, write_container
from services.errors import ConfigError, DataFormatError, NumericError
from services.numeric_core import (
    Adam,
    FloatArray,
    ParamDict,
    Schedule,
    clip_gradient_norm,
    schedule_value,
)

logger = logging.getLogger(__name__)

Variant = Literal["topk", "threshold"]
_VARIANT_CODES = {"topk": 0, "threshold": 1}


class SaeConfig(BaseModel):
    """SAE 训练配置，默认值取自 top-k SAE 的常规配方"""

    model_config = ConfigDict(extra="forbid")

    d1: int = Field(..., ge=1, description="字典大小（概念数）")
    s: int = Field(..., ge=1, description="目标稀疏度")
    variant: Variant = "topk"
    use_bias: bool = True
    init: Literal["uniform", "kmeans++", "kmeans"] = "uniform"
    init_restarts: int = Field(10, ge=1, description="kmeans 初始化的重启次数")

    peak_lr: float = Field(3e-4, gt=0)
    warmup_steps: int = Field(5000, ge=0)
    horizon: int = Field(100_000, ge=1)
    k0: int = Field(128, ge=1, description="初始稀疏度")
    ramp_steps: int = Field(10_000, ge=0)
    batch_size: int = Field(4096, ge=1)
    steps: Optional[int] = Field(None, ge=1, description="总步数，缺省为 horizon")

    dropout: float = Field(0.5, ge=0, lt=1)
    ghost_weight: float = Field(1e6, ge=0)
    dead_threshold: float = Field(1e-4, ge=0, le=1)
    normalize_decoder: bool = True
    max_grad_norm: float = Field(1.0, gt=0)

    l0_coefficient: float = Field(1e-3, ge=0)
    threshold_temperature: float = Field(0.1, gt=0)
    threshold_init: float = 0.0


@dataclass
class SaeModel:
    """编码器 E (d₁×d₂)、解码器 D (d₂×d₁)、偏置与阈值"""

    encoder: FloatArray
    decoder: FloatArray
    bias: FloatArray
    s: int
    variant: Variant = "topk"
    thresholds: Optional[FloatArray] = None
    use_bias: bool = True
    history: list[float] = field(default_factory=list)

    @property
    def d1(self) -> int:
        return int(self.encoder.shape[0])

    @property
    def d2(self) -> int:
        return int(self.encoder.shape[1])

    def params(self) -> ParamDict:
        params = {"encoder": self.encoder, "decoder": self.decoder, "bias": self.bias}
        if self.variant == "threshold":
            params["thresholds"] = self.thresholds
        return params

    def with_params(self, params: ParamDict) -> "SaeModel":
        return SaeModel(encoder=params["encoder"], decoder=params["decoder"], bias=params["bias"],
                        s=self.s, variant=self.variant, thresholds=params.get("thresholds"),
                        use_bias=self.use_bias, history=self.history)


@dataclass
class ActivityTracker:
    """
    概念激活频率

    计数与样本数从训练开始累计，死特征集合在每次查询时按 f_i = 计数 / 样本数 重新计算；
    未见过任何样本时没有死特征。
    """

    d1: int
    threshold: float = 1e-4
    counts: Optional[np.ndarray] = None
    total: int = 0

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.d1, dtype=np.int64)

    @property
    def frequencies(self) -> FloatArray:
        return self.counts / max(self.total, 1)

    def update(self, codes) -> None:
        codes = np.atleast_2d(codes)
        self.counts += np.count_nonzero(codes, axis=0)
        self.total += codes.shape[0]

    def dead_mask(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros(self.d1, dtype=bool)
        return self.frequencies <= self.threshold


def top_k_mask(pre, s: int) -> np.ndarray:
    """逐行保留最大的 s 个值（按取值而非绝对值），同值取下标小者"""
    pre = np.atleast_2d(pre)
    d1 = pre.shape[1]
    if not 1 <= s <= d1:
        raise ConfigError(f"稀疏度必须满足 1 ≤ s ≤ {d1}，实际 {s}")
    order = np.argsort(-pre, axis=1, kind="stable")[:, :s]
    mask = np.zeros(pre.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def top_k_activation(pre, s: int) -> SparseVector:
    pre = np.asarray(pre, dtype=np.float64).ravel()
    mask = top_k_mask(pre, s)[0]
    idx = np.flatnonzero(mask)
    return SparseVector(dim=pre.size, indices=idx, values=pre[idx])


def _pre_activations(model: SaeModel, batch: FloatArray) -> FloatArray:
    pre = batch @ model.encoder.T
    if model.use_bias:
        pre = pre + model.bias
    return pre


def _activate(model: SaeModel, pre: FloatArray, s: int) -> tuple[FloatArray, np.ndarray]:
    """返回 (编码, 活跃掩码)"""
    if model.variant == "threshold":
        shifted = pre - model.thresholds
        active = shifted > 0.0
        return np.where(active, shifted, 0.0), active
    active = top_k_mask(pre, s)
    return np.where(active, pre, 0.0), active


def sae_encode(model: SaeModel, batch, s: Optional[int] = None) -> FloatArray:
    """批量编码，返回稠密的 N×d₁ 稀疏码"""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    codes, _ = _activate(model, _pre_activations(model, batch), s or model.s)
    return codes


def sae_forward(model: SaeModel, psi, s: Optional[int] = None) -> tuple[SparseVector, FloatArray]:
    """编码、稀疏化、解码：返回 (Φ̂, Ψ̂)"""
    psi = np.asarray(psi, dtype=np.float64).ravel()
    if not np.all(np.isfinite(psi)):
        raise NumericError("输入特征含有非有限元素")
    codes, active = _activate(model, _pre_activations(model, psi[None, :]), s or model.s)
    codes = codes[0]
    idx = np.flatnonzero(active[0])
    return SparseVector(dim=model.d1, indices=idx, values=codes[idx]), model.decoder @ codes


@dataclass
class LossTerms:
    loss: float
    reconstruction: float
    ghost: float
    sparsity: float
    grads: ParamDict
    codes: FloatArray


def compute_loss_terms(model: SaeModel, batch, dead_mask: Optional[np.ndarray] = None,
                       ghost_weight: float = 0.0, s: Optional[int] = None,
                       dropout_scale: Optional[FloatArray] = None, l0_coefficient: float = 0.0,
                       threshold_temperature: float = 0.1) -> LossTerms:
    """
    重构损失、幽灵损失与（阈值变体的）L0 惩罚及全部手推梯度

    top-k 选择在反向传播中视为固定掩码；幽灵项中的重构残差不传梯度。
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n, d2 = batch.shape
    s = s or model.s
    pre = _pre_activations(model, batch)
    scale = dropout_scale if dropout_scale is not None else 1.0
    dropped = pre * scale
    codes, active = _activate(model, dropped, s)

    reconstruction = codes @ model.decoder.T
    residual = reconstruction - batch
    recon_loss = float(np.sum(residual * residual) / n)

    d_recon = 2.0 * residual / n
    grad_decoder = d_recon.T @ codes
    d_dropped = (d_recon @ model.decoder) * active
    grad_thresholds = None
    l0_loss = 0.0
    if model.variant == "threshold":
        grad_thresholds = -d_dropped.sum(axis=0)
        if l0_coefficient:
            shifted = (dropped - model.thresholds) / threshold_temperature
            sig = special.expit(shifted)
            surrogate = sig * (1.0 - sig) / threshold_temperature
            l0_loss = float(l0_coefficient * np.count_nonzero(active) / n)
            d_dropped = d_dropped + l0_coefficient * surrogate / n
            grad_thresholds = grad_thresholds - l0_coefficient * surrogate.sum(axis=0) / n
    d_pre = d_dropped * scale

    ghost_loss = 0.0
    if ghost_weight and dead_mask is not None and np.any(dead_mask):
        dead_pre = pre * dead_mask
        ghost_recon = dead_pre @ model.decoder.T
        gap = ghost_recon - residual
        ghost_loss = float(ghost_weight * np.sum(gap * gap) / (n * d2))
        d_ghost = 2.0 * ghost_weight * gap / (n * d2)
        grad_decoder = grad_decoder + d_ghost.T @ dead_pre
        d_pre = d_pre + (d_ghost @ model.decoder) * dead_mask

    grads = {
        "encoder": d_pre.T @ batch,
        "decoder": grad_decoder,
        "bias": d_pre.sum(axis=0) if model.use_bias else np.zeros(model.d1),
    }
    if grad_thresholds is not None:
        grads["thresholds"] = grad_thresholds

    loss = recon_loss + ghost_loss + l0_loss
    if not math.isfinite(loss):
        raise NumericError(f"SAE 损失非有限: {loss}")
    return LossTerms(loss=loss, reconstruction=recon_loss, ghost=ghost_loss, sparsity=l0_loss,
                     grads=grads, codes=codes)


def sae_loss_and_grads(model: SaeModel, batch, tracker: Optional[ActivityTracker] = None,
                       ghost_weight: float = 0.0, s: Optional[int] = None
                       ) -> tuple[float, ParamDict]:
    """损失 = 平均 ‖ψ − ψ̂‖² + ghost_weight·(1/d₂)‖(ψ̂ − ψ) − D(dead ⊙ Eψ)‖²"""
    dead = tracker.dead_mask() if tracker is not None else None
    terms = compute_loss_terms(model, batch, dead, ghost_weight, s)
    return terms.loss, terms.grads


def _normalize_columns(matrix: FloatArray) -> FloatArray:
    norms = np.linalg.norm(matrix, axis=0)
    return matrix / np.where(norms > 0.0, norms, 1.0)


def init_sae(config: SaeConfig, data: FloatArray, rng: np.random.Generator) -> SaeModel:
    """
    初始化：解码器列按单位范数归一化，编码器取归一化后解码器的转置

    uniform 为均匀随机方向；kmeans++ 取 k-means++ 选出的数据点；
    kmeans 在 k-means++ 种子上再做 Lloyd 迭代并取各簇质心。
    """
    d2 = data.shape[1]
    if config.init in ("kmeans++", "kmeans"):
        if data.shape[0] < config.d1:
            raise ConfigError(f"{config.init} 初始化需要至少 d1={config.d1} 个样本")
        seed = int(rng.integers(2 ** 31 - 1))
        if config.init == "kmeans":
            kmeans = KMeans(n_clusters=config.d1, init="k-means++", n_init=config.init_restarts,
                            random_state=seed)
            centers = kmeans.fit(data).cluster_centers_
        else:
            centers, _ = kmeans_plusplus(data, n_clusters=config.d1, random_state=seed)
    else:
        centers = rng.uniform(-1.0, 1.0, size=(config.d1, d2))
    decoder = _normalize_columns(centers.T.copy())
    thresholds = np.full(config.d1, config.threshold_init) if config.variant == "threshold" else None
    return SaeModel(encoder=decoder.T.copy(), decoder=decoder, bias=np.zeros(config.d1),
                    s=config.s, variant=config.variant, thresholds=thresholds,
                    use_bias=config.use_bias)


def sparsity_at(config: SaeConfig, step: int) -> int:
    """第 step 步的稀疏度（从 k₀ 线性过渡到 s，截断到 [1, d₁]）"""
    ramp = Schedule("linear_ramp", start=float(config.k0), end=float(config.s),
                    warmup_steps=config.ramp_steps)
    return int(min(max(round(schedule_value(ramp, step)), 1), config.d1))


def train_sae(config: SaeConfig, data, rng: np.random.Generator,
              tracker: Optional[ActivityTracker] = None) -> SaeModel:
    """
    训练 SAE

    线性预热后余弦衰减的学习率、k₀ → s 的稀疏度过渡、预激活 dropout（每步重采样）、
    全局范数裁剪、Adam，以及每步后的解码器列归一化。
    """
    data = np.asarray(data, dtype=np.float64)
    if config.s > config.d1:
        raise ConfigError(f"稀疏度 s={config.s} 不能超过字典大小 d1={config.d1}")
    if data.ndim != 2 or data.shape[0] == 0:
        raise DataFormatError("训练数据必须是非空的 N×d2 矩阵")
    lr_schedule = Schedule("warmup_cosine", start=config.peak_lr, end=0.0,
                           warmup_steps=config.warmup_steps, horizon=config.horizon)
    total_steps = config.steps or config.horizon

    model = init_sae(config, data, rng)
    tracker = tracker or ActivityTracker(config.d1, config.dead_threshold)
    optimizer = Adam(model.params())
    params = model.params()
    n = data.shape[0]
    order = rng.permutation(n)
    cursor = 0

    for step in range(total_steps):
        if cursor + config.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + config.batch_size]
        cursor += config.batch_size
        batch = data[idx]

        scale = None
        if config.dropout:
            keep = rng.random((batch.shape[0], config.d1)) >= config.dropout
            scale = keep / (1.0 - config.dropout)

        current = model.with_params(params)
        terms = compute_loss_terms(current, batch, tracker.dead_mask(), config.ghost_weight,
                                   sparsity_at(config, step), scale, config.l0_coefficient,
                                   config.threshold_temperature)
        grads = clip_gradient_norm(terms.grads, config.max_grad_norm)
        params = optimizer.step(params, grads, lr=schedule_value(lr_schedule, step))
        if config.normalize_decoder:
            params["decoder"] = _normalize_columns(params["decoder"])
        tracker.update(terms.codes)
        model.history.append(terms.reconstruction)

        if step % 1000 == 0:
            logger.info("SAE 第 %d/%d 步: 重构 %.6f 幽灵 %.6f", step, total_steps,
                        terms.reconstruction, terms.ghost)

    return model.with_params(params)


def dead_fraction(model: SaeModel, data, threshold: float = 1e-4, batch_size: int = 4096) -> float:
    """激活频率不超过阈值的概念比例"""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    counts = np.zeros(model.d1, dtype=np.int64)
    for start in range(0, data.shape[0], batch_size):
        counts += np.count_nonzero(sae_encode(model, data[start:start + batch_size]), axis=0)
    return float(np.mean(counts / data.shape[0] <= threshold))


def save_sae(model: SaeModel, path: str | Path) -> Path:
    """检查点：meta = (d1, d2, s, variant, use_bias)，数组顺序 E, bias, D, θ"""
    thresholds = model.thresholds if model.thresholds is not None else np.zeros(model.d1)
    return write_container(path, b"SAE1",
                           [model.d1, model.d2, model.s, _VARIANT_CODES[model.variant],
                            int(model.use_bias)],
                           [model.encoder, model.bias, model.decoder, thresholds])


def load_sae(path: str | Path) -> SaeModel:
    _, meta, arrays = read_container(path, b"SAE1")
    if len(meta) != 5 or len(arrays) != 4:
        raise DataFormatError("SAE 检查点结构不完整")
    d1, d2, s, variant_code, use_bias = meta
    variant = {code: name for name, code in _VARIANT_CODES.items()}.get(variant_code)
    if variant is None:
        raise DataFormatError(f"未知的 SAE 变体编码 {variant_code}")
    encoder, bias, decoder, thresholds = arrays
    if encoder.shape != (d1, d2) or decoder.shape != (d2, d1):
        raise DataFormatError("SAE 检查点矩阵形状与头部不一致")
    return SaeModel(encoder=encoder, decoder=decoder, bias=bias, s=int(s), variant=variant,
                    thresholds=thresholds if variant == "threshold" else None,
                    use_bias=bool(use_bias))


class MaskConfig(BaseModel):
    """自适应概念掩码训练参数"""

    model_config = ConfigDict(extra="forbid")

    lam: float = Field(1e-2, ge=0, description="掩码惩罚 λ")
    tau: float = Field(0.1, gt=0, description="直通估计温度")
    steps: int = Field(200, ge=0)
    lr: float = Field(0.02, gt=0)
    weight_decay: float = Field(0.0, ge=0, description="线性头权重的 L2 系数")
    init_logit: float = 1.0


@dataclass
class ConceptMask:
    """掩码 logits θ；前向使用 m = 1{θ > 0}"""

    logits: FloatArray
    tau: float = 0.1
    lam: float = 0.0

    @property
    def mask(self) -> FloatArray:
        return (self.logits > 0.0).astype(np.float64)

    @property
    def size(self) -> int:
        return int(np.count_nonzero(self.logits > 0.0))

    def surrogate_grad(self) -> FloatArray:
        """∂m/∂θ 的替代值 σ'(θ/τ)/τ"""
        sig = special.expit(self.logits / self.tau)
        return sig * (1.0 - sig) / self.tau


def masked_loss_and_grads(head: LinearHead, mask: ConceptMask, concepts, labels,
                          weight_decay: float = 0.0) -> tuple[float, ParamDict]:
    """
    掩码交叉熵 + λ‖m‖² + weight_decay·‖W‖² 及对 (W, b, θ) 的梯度

    m 取 0/1 时 λ‖m‖² = λΣm，对 m 的梯度按 λΣm 取常数 λ。
    """
    concepts = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    m = mask.mask
    masked = concepts * m
    loss, dlogits = cross_entropy(head.logits(masked), labels)
    loss += mask.lam * float(m @ m) + weight_decay * float(np.sum(head.weights ** 2))
    dmasked = dlogits @ head.weights
    dm = np.sum(dmasked * concepts, axis=0) + mask.lam
    return loss, {
        "weights": dlogits.T @ masked + 2.0 * weight_decay * head.weights,
        "bias": dlogits.sum(axis=0),
        "logits": dm * mask.surrogate_grad(),
    }


def learn_concept_mask(concepts, labels, n_classes: int, config: MaskConfig,
                       rng: np.random.Generator, fixed_mask: Optional[np.ndarray] = None,
                       base: Optional[LinearHead] = None) -> tuple[ConceptMask, LinearHead]:
    """
    在邻域上联合训练掩码与线性头

    Args:
        concepts: 邻域稀疏码 Φ̂ (k×d₁)
        labels: 邻域类别
        fixed_mask: 给定时掩码保持不变（测试点激活集基线）
        base: 初始线性头，缺省为零初始化

    Returns:
        (ConceptMask, LinearHead)
    """
    concepts = np.atleast_2d(np.asarray(concepts, dtype=np.float64))
    d1 = concepts.shape[1]
    if fixed_mask is not None:
        logits = np.where(np.asarray(fixed_mask, dtype=bool), 1.0, -1.0)
    else:
        # 微小扰动打破对称
        logits = config.init_logit + 1e-3 * rng.standard_normal(d1)
    mask = ConceptMask(logits=logits, tau=config.tau, lam=config.lam)
    head = base.copy() if base is not None else LinearHead.zeros(n_classes, d1)

    params = {"weights": head.weights, "bias": head.bias, "logits": mask.logits}
    optimizer = Adam(params, lr=config.lr)
    for _ in range(config.steps):
        current_mask = ConceptMask(logits=params["logits"], tau=config.tau, lam=config.lam)
        _, grads = masked_loss_and_grads(LinearHead(params["weights"], params["bias"]),
                                         current_mask, concepts, labels, config.weight_decay)
        if fixed_mask is not None:
            grads["logits"] = np.zeros(d1)
        params = optimizer.step(params, grads)
    return (ConceptMask(logits=params["logits"], tau=config.tau, lam=config.lam),
            LinearHead(params["weights"], params["bias"]))


def mask_intersection_stats(mask, test_active, neighbor_active) -> dict[str, int]:
    """
    掩码与激活集的交集统计

    Args:
        mask: 学到的掩码 m（布尔或 0/1，长度 d₁）
        test_active: 测试点激活集 m★
        neighbor_active: 邻居激活集 mᵢ (k×d₁)
    """
    m = np.asarray(mask, dtype=bool)
    star = np.asarray(test_active, dtype=bool)
    neighbors = np.atleast_2d(np.asarray(neighbor_active, dtype=bool))
    return {
        "neighbor_union": int(np.count_nonzero(neighbors.any(axis=0))),
        "mask_size": int(np.count_nonzero(m)),
        "test_and_mask": int(np.count_nonzero(star & m)),
        "neighbor_and_mask_union": int(np.count_nonzero((neighbors & m).any(axis=0))),
        "neighbor_and_test_union": int(np.count_nonzero((neighbors & star).any(axis=0))),
    }
