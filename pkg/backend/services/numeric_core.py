"""
数值核心 - 矩阵运算、可复现随机数、Adam优化器、学习率/稀疏度调度与梯度校验
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Dict, Literal, Mapping, Optional, Union

import numpy as np
import numpy.typing as npt

from services.errors import ConfigError, DimensionError, NumericError

logger = logging.getLogger(__name__)

FloatArray = npt.NDArray[np.float64]
ParamDict = Dict[str, FloatArray]


def make_rng(seed: int, stream: int | tuple[int, ...] = 0) -> np.random.Generator:
    """
    构造计数器型随机数生成器

    相同 (seed, stream) 产生相同序列；不同 stream 互相独立，
    因此每个测试点/网格点可以直接由编号派生自己的随机流。

    Args:
        seed: 64位种子
        stream: 流编号（整数或整数元组）

    Returns:
        基于 Philox 的 numpy Generator
    """
    if seed < 0:
        raise ConfigError(f"随机种子必须非负: {seed}")
    keys = stream if isinstance(stream, tuple) else (stream,)
    sequence = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(sequence))


def as_matrix(values, name: str = "matrix") -> FloatArray:
    """转换为二维 float64 数组并检查所有元素有限"""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(-1, 1)
    if array.ndim != 2:
        raise DimensionError(f"{name} 必须是二维矩阵，实际维度 {array.ndim}")
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{name} 含有非有限元素")
    return array


def matmul(a, b) -> FloatArray:
    """带形状检查的矩阵乘法"""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"维度不匹配: {a.shape} × {b.shape}")
    return a @ b


@dataclass
class AdamState:
    """单个参数张量的 Adam 状态"""

    first_moment: FloatArray
    second_moment: FloatArray
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0

    @classmethod
    def zeros_like(cls, params: FloatArray, **hyper) -> "AdamState":
        return cls(
            first_moment=np.zeros_like(params, dtype=np.float64),
            second_moment=np.zeros_like(params, dtype=np.float64),
            **hyper,
        )


def adam_step(state: AdamState, params: FloatArray, grads: FloatArray,
              lr: Optional[float] = None) -> FloatArray:
    """
    带偏差修正的 Adam 更新（权重衰减按 L2 加入梯度）

    Args:
        state: 该参数的优化器状态（原地推进）
        params: 当前参数
        grads: 梯度，形状与参数一致
        lr: 本步学习率，缺省使用 state.lr（供调度器覆盖）

    Returns:
        更新后的参数（新数组）
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.first_moment.shape != params.shape:
        raise DimensionError(
            f"参数/梯度/状态形状不一致: {params.shape}, {grads.shape}, {state.first_moment.shape}"
        )
    if not np.all(np.isfinite(grads)):
        # 中止更新，状态保持不变
        raise NumericError("梯度含有非有限元素，Adam 更新中止")

    step_lr = state.lr if lr is None else lr
    if state.weight_decay:
        grads = grads + state.weight_decay * params

    state.step += 1
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads * grads

    m_hat = state.first_moment / (1.0 - state.beta1 ** state.step)
    v_hat = state.second_moment / (1.0 - state.beta2 ** state.step)
    return params - step_lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """按名称管理多组参数的 Adam 优化器"""

    def __init__(self, params: Mapping[str, FloatArray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.states = {
            name: AdamState.zeros_like(value, lr=lr, beta1=beta1, beta2=beta2,
                                       eps=eps, weight_decay=weight_decay)
            for name, value in params.items()
        }

    @property
    def step_count(self) -> int:
        return next(iter(self.states.values())).step if self.states else 0

    def step(self, params: Mapping[str, FloatArray], grads: Mapping[str, FloatArray],
             lr: Optional[float] = None) -> ParamDict:
        # 先整体检查，避免部分参数已更新
        for name, grad in grads.items():
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"参数 {name} 的梯度含有非有限元素")
        return {
            name: adam_step(self.states[name], params[name], grads[name], lr=lr)
            for name in params
        }


def gradient_norm(grads: Union[FloatArray, Mapping[str, FloatArray]]) -> float:
    """所有梯度拼接后的 L2 范数"""
    if isinstance(grads, Mapping):
        return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    return float(np.linalg.norm(np.asarray(grads, dtype=np.float64)))


def clip_gradient_norm(grads, max_norm: float = 1.0):
    """
    按全局 L2 范数裁剪梯度

    范数不超过 max_norm 时原样返回；否则整体缩放到恰好 max_norm。
    支持单个数组或参数名到数组的字典。
    """
    if max_norm <= 0:
        raise ConfigError(f"max_norm 必须为正: {max_norm}")
    norm = gradient_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    if isinstance(grads, Mapping):
        return {name: g * scale for name, g in grads.items()}
    return np.asarray(grads, dtype=np.float64) * scale


ScheduleKind = Literal["constant", "warmup_cosine", "linear_ramp"]


@dataclass(frozen=True)
class Schedule:
    """
    分段调度

    warmup_cosine: 0 → start 线性预热 warmup_steps 步，随后余弦衰减到 end（第 horizon 步）
    linear_ramp:   start → end 线性变化 warmup_steps 步，之后保持 end
    constant:      恒为 start
    """

    kind: ScheduleKind = "constant"
    start: float = 1.0
    end: float = 0.0
    warmup_steps: int = 0
    horizon: int = 0

    def __post_init__(self):
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps 不能为负: {self.warmup_steps}")
        if self.kind == "warmup_cosine" and self.warmup_steps >= self.horizon:
            raise ConfigError(
                f"预热步数 T0={self.warmup_steps} 必须小于总步数 T={self.horizon}"
            )


def schedule_value(schedule: Schedule, step: int) -> float:
    """返回第 step 步的调度值"""
    if step < 0:
        raise ConfigError(f"step 不能为负: {step}")

    if schedule.kind == "constant":
        return schedule.start

    if schedule.kind == "linear_ramp":
        if schedule.warmup_steps == 0 or step >= schedule.warmup_steps:
            return schedule.end
        ratio = step / schedule.warmup_steps
        return schedule.start - (schedule.start - schedule.end) * ratio

    # warmup_cosine
    t0, horizon = schedule.warmup_steps, schedule.horizon
    if step < t0:
        return schedule.start * step / t0
    if step >= horizon:
        return schedule.end
    progress = (step - t0) / (horizon - t0)
    multiplier = 0.5 * (1.0 + math.cos(math.pi * progress))
    return schedule.end + (schedule.start - schedule.end) * multiplier


def finite_difference_gradient(loss: Callable[[FloatArray], float], params,
                               h: float = 1e-5) -> FloatArray:
    """逐元素中心差分梯度估计"""
    if h <= 0:
        raise ConfigError(f"差分步长必须为正: {h}")
    base = np.array(params, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = float(loss(base))
        flat[i] = original - h
        minus = float(loss(base))
        flat[i] = original
        grad_flat[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic, numeric, floor: float = 1e-12) -> float:
    """梯度校验用的相对误差 ‖a−n‖/max(‖a‖,‖n‖,floor)"""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), floor)
    return float(np.linalg.norm(a - n)) / scale


def bootstrap_ci(samples, resamples: int = 1000, level: float = 0.90,
                 rng: Optional[np.random.Generator] = None) -> tuple[float, float]:
    """
    均值的百分位自助法置信区间

    Args:
        samples: 样本
        resamples: 重抽样次数（默认 1000）
        level: 置信水平（默认 0.90）
        rng: 随机数生成器，缺省用种子 0 的流

    Returns:
        (下界, 上界)
    """
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size == 0:
        raise ConfigError("自助法需要非空样本")
    if not 0.0 < level < 1.0:
        raise ConfigError(f"置信水平必须在 (0,1) 内: {level}")
    rng = rng if rng is not None else make_rng(0)
    idx = rng.integers(0, values.size, size=(resamples, values.size))
    means = values[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(means, [alpha, 1.0 - alpha])
    mean = float(values.mean())
    # 保证 low ≤ mean ≤ high
    return float(min(low, mean)), float(max(high, mean))
