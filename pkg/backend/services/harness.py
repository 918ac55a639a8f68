"""
实验引擎 - 配置驱动的网格实验、自助法置信区间、CSV 结果表与 SVG 图
"""

import itertools
import json
import logging
import math
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # Python 3.10: tomli provides the same API
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from tqdm import tqdm

from services.classifiers import (
    HeadTrainingConfig,
    LinearHead,
    MoeConfig,
    TttConfig,
    calibrate_and_compare,
    cross_entropy_per_point,
    majority_vote,
    random_relu_features,
    route_and_predict,
    train_global_head,
    train_mlp_head,
    train_moe,
    ttt_finetune,
)
from services.concept_model import (
    WorldSpec,
    build_world,
    check_assumptions,
    class_edges,
    label_by_target,
    make_nonlearnable_instance,
    synthetic_classification,
)
from services.datasets import DatasetSpec, balanced_subsample, load_dataset
from services.errors import ConfigError
from services.estimators import (
    evaluate_interference,
    fit_ridge,
    fit_ttt_sparse,
    knn_regress,
    ttt_cell_errors,
    ttt_rate_curve,
)
from services.neighborhood import (
    Neighborhood,
    concentration_diagnostics,
    containment_slack,
    knn,
    neighborhood_concept_cosine,
)
from services.numeric_core import FloatArray, bootstrap_ci, make_rng
from services.plotting import emit_plot
from services.sae import (
    MaskConfig,
    SaeConfig,
    dead_fraction,
    learn_concept_mask,
    mask_intersection_stats,
    sae_encode,
    train_sae,
)

logger = logging.getLogger(__name__)

VERSION = "1.0.0"

ExperimentKind = Literal[
    "interference", "ttt-rate", "model-scaling", "data-scaling", "neighborhood-sweep",
    "sae-train", "sae-mask", "moe-scaling", "assumption-report", "concentration", "geometry",
]
EXPERIMENT_KINDS: tuple[str, ...] = ExperimentKind.__args__

AxisValue = Union[int, float, str, bool]

# 在单个网格点内部成对扫描的轴（同一批样本的前缀）
PAIRED_AXES = {"ttt-rate": "k", "neighborhood-sweep": "k", "concentration": "k"}

DEFAULT_AXES: dict[str, dict[str, list]] = {
    "interference": {"d2": [16, 32, 64, 96]},
    "ttt-rate": {"k": [32, 64, 128, 256, 512, 1024]},
    "model-scaling": {"width": [8, 16, 32, 64, 128]},
    "data-scaling": {"fraction": [0.01, 0.03, 0.1, 0.3, 1.0]},
    "neighborhood-sweep": {"k": [10, 25, 50, 100, 200, 400, 800]},
    "moe-scaling": {"n_experts": [1, 10, 100]},
    "concentration": {"k": [16, 64]},
}

# 随机流编号：试验 t 使用 (t,)，数据与自助法使用下列保留编号
DATA_STREAM = 2 ** 32
BOOTSTRAP_STREAM = 2 ** 32 + 1

RESULT_COLUMNS = ("metric", "mean", "ci_low", "ci_high", "n", "seed")


class ExperimentConfig(BaseModel):
    """单个实验的完整配置（TOML 文件一一对应）"""

    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentKind
    name: Optional[str] = None
    seed: int = Field(..., ge=0)
    trials: int = Field(50, ge=1)
    threads: int = Field(1, ge=1)
    out: Optional[str] = None
    format: Literal["csv", "svg", "both"] = "both"
    resamples: int = Field(1000, ge=1)
    level: float = Field(0.90, gt=0, lt=1)
    axes: dict[str, list[AxisValue]] = Field(default_factory=dict)

    world: WorldSpec = Field(default_factory=WorldSpec)
    dataset: Optional[DatasetSpec] = None
    sae: Optional[SaeConfig] = None
    head: HeadTrainingConfig = Field(default_factory=HeadTrainingConfig)
    ttt: TttConfig = Field(default_factory=TttConfig)
    moe: MoeConfig = Field(default_factory=MoeConfig)
    mask: MaskConfig = Field(default_factory=MaskConfig)

    n_train: int = Field(5000, ge=1)
    n_test: int = Field(100, ge=1)
    n_classes: int = Field(2, ge=2)
    s_prime: Optional[int] = Field(None, ge=1)
    mode: Literal["exhaustive", "greedy"] = "greedy"
    radius: float = Field(0.5, ge=0)
    ridge: float = Field(0.0, ge=0)
    feature_map: Literal["mlp", "random_relu"] = "mlp"
    noise_draws: int = Field(200, ge=1)
    global_ttt_heads: int = Field(10, ge=1)
    holdout: int = Field(25, ge=1)
    top_t: int = Field(3, ge=1)

    plot: Literal["line", "band", "hist"] = "band"
    logx: bool = False
    logy: bool = False

    @field_validator("axes")
    @classmethod
    def _axes_not_empty(cls, axes: dict[str, list]) -> dict[str, list]:
        for name, values in axes.items():
            if not values:
                raise ValueError(f"扫描轴 {name} 为空")
        return axes

    @model_validator(mode="after")
    def _paired_axis_increasing(self) -> "ExperimentConfig":
        paired = PAIRED_AXES.get(self.experiment)
        values = self.axes.get(paired) if paired else None
        if values is not None:
            if any(not isinstance(v, int) or v < 1 for v in values):
                raise ValueError(f"{paired} 轴必须是正整数")
            if any(b <= a for a, b in zip(values, values[1:])):
                raise ValueError(f"{paired} 轴必须严格递增")
        return self

    @property
    def label(self) -> str:
        return self.name or self.experiment

    def effective_axes(self) -> dict[str, list]:
        axes = {name: list(values) for name, values in DEFAULT_AXES.get(self.experiment, {}).items()}
        axes.update(self.axes)
        return axes


@dataclass
class ExperimentResult:
    """结果表（每行一个配置点上的一个指标）与来源信息"""

    experiment: str
    table: pd.DataFrame
    provenance: dict[str, Any] = field(default_factory=dict)
    failures: list[dict[str, Any]] = field(default_factory=list)

    def metric(self, name: str) -> pd.DataFrame:
        return self.table[self.table["metric"] == name].reset_index(drop=True)


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    """读取 TOML 配置；非空的 overrides（seed/out/threads/format）覆盖文件中的值"""
    path = Path(path)
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as e:
        raise ConfigError(f"配置文件不存在: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"配置文件解析失败 {path}: {e}") from e
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return validate_config(raw)


def validate_config(raw: dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"实验配置无效: {e}") from e


Entry = tuple[dict[str, Any], str, Any]
Runner = Callable[[ExperimentConfig, dict[str, Any], list], list[Entry]]


def _trial_rng(config: ExperimentConfig, trial: int) -> np.random.Generator:
    # 所有网格点共用同一组试验流，不同配置之间天然成对
    return make_rng(config.seed, (trial,))


def _validated(model_cls, base: BaseModel, point: dict[str, Any]):
    updates = {k: v for k, v in point.items() if k in model_cls.model_fields}
    if not updates:
        return base
    try:
        return model_cls.model_validate({**base.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigError(f"网格点参数无效 {updates}: {e}") from e


def world_spec_for(config: ExperimentConfig, point: dict[str, Any]) -> WorldSpec:
    return _validated(WorldSpec, config.world, point)


def sae_config_for(config: ExperimentConfig, point: dict[str, Any]) -> SaeConfig:
    if config.sae is None:
        raise ConfigError(f"{config.experiment} 实验需要 [sae] 配置")
    return _validated(SaeConfig, config.sae, point)


def _entries(metrics: dict[str, Any], extra: Optional[dict[str, Any]] = None) -> list[Entry]:
    return [(extra or {}, name, samples) for name, samples in metrics.items()]


def _run_interference(config, point, _paired) -> list[Entry]:
    spec = world_spec_for(config, point)
    global_error = np.empty(config.trials)
    ttt_error = np.empty(config.trials)
    for t in range(config.trials):
        instance = make_nonlearnable_instance(spec.d1, spec.d2, _trial_rng(config, t))
        global_error[t] = evaluate_interference(instance).error
        ttt_error[t] = float(np.max(ttt_cell_errors(instance)))
    return _entries({
        "global_error": global_error,
        "ttt_error": ttt_error,
        "expected": np.full(config.trials, 1.0 - spec.d2 / spec.d1),
    })


def _run_ttt_rate(config, point, ks) -> list[Entry]:
    spec = world_spec_for(config, point)
    rng = _trial_rng(config, 0)
    world = build_world(spec, rng)
    report = ttt_rate_curve(world, ks, config.s_prime or spec.s, config.trials, rng,
                            mode=config.mode, seed=config.seed)
    return [({"k": k}, "excess_error", errors) for k, errors in zip(report.k_values, report.errors)]


def _run_neighborhood_sweep(config, point, ks) -> list[Entry]:
    spec = world_spec_for(config, point)
    world = build_world(spec, make_rng(config.seed, (DATA_STREAM,)))
    s_prime = config.s_prime or spec.s
    errors = {name: {k: np.empty(config.trials) for k in ks}
              for name in ("ttt_error", "ridge_error", "knn_error")}
    for t in range(config.trials):
        rng = _trial_rng(config, t)
        train = world.sample(config.n_train, rng)
        test = world.sample(1, rng)
        neighbors = knn(test.features[0], train.features, min(ks[-1], len(train)),
                        metric=config.ttt.metric)
        target = float(test.targets[0])
        for k in ks:
            prefix = replace(neighbors, members=neighbors.members[:k],
                             similarities=neighbors.similarities[:k])
            local_x, local_y = train.features[prefix.members], train.labels[prefix.members]
            # 局部重组矩阵只保留邻域与测试点中出现过的概念
            seen = np.any(train.concepts[prefix.members] != 0, axis=0) | (test.concepts[0] != 0)
            model = fit_ttt_sparse(local_x, local_y, world.local_projection(np.flatnonzero(seen)),
                                   s_prime, mode=config.mode, neighborhood=prefix)
            ridge = fit_ridge(local_x, local_y, config.ridge)
            errors["ttt_error"][k][t] = (float(model.predict(test.features)[0]) - target) ** 2
            errors["ridge_error"][k][t] = (float(ridge.predict(test.features)[0]) - target) ** 2
            errors["knn_error"][k][t] = (knn_regress(prefix, train.labels) - target) ** 2
    entries = []
    for k in ks:
        entries += _entries({name: by_k[k] for name, by_k in errors.items()}, {"k": k})
    return entries


def _run_concentration(config, point, ks) -> list[Entry]:
    spec = world_spec_for(config, point)
    world = build_world(spec, make_rng(config.seed, (DATA_STREAM,)))
    s_prime = config.s_prime or spec.s
    quantiles = {k: np.empty(config.trials) for k in ks}
    for t in range(config.trials):
        rng = _trial_rng(config, t)
        pool = int(rng.integers(len(world.pools)))
        neighbors = world.sample(ks[-1], rng, pool=pool)
        for k in ks:
            neighborhood = Neighborhood(members=np.arange(k), similarities=np.ones(k))
            report = concentration_diagnostics(neighborhood, neighbors.concepts,
                                               math.sqrt(spec.noise_var), s_prime,
                                               config.noise_draws, rng)
            quantiles[k][t] = report.lambda_quantile(0.95)
    return [({"k": k}, "lambda_q95", quantiles[k]) for k in ks]


def _run_geometry(config, point, _paired) -> list[Entry]:
    spec = world_spec_for(config, point)
    data_rng = make_rng(config.seed, (DATA_STREAM,))
    world = build_world(spec, data_rng)
    train = world.sample(config.n_train, data_rng)
    bound = 4.0 * math.sqrt(math.log(config.n_train) / spec.d2)
    metrics = {name: np.empty(config.trials) for name in
               ("eta_ang", "eta_within_bound", "feature_selected_cosine",
                "concept_selected_cosine", "cosine_gap")}
    for t in range(config.trials):
        test = world.sample(1, _trial_rng(config, t))
        eta = containment_slack(test.features[0], test.concepts[0], train.features,
                                train.concepts, config.radius)
        by_feature, by_concept = neighborhood_concept_cosine(
            test.features[0], test.concepts[0], train.features, train.concepts,
            min(config.ttt.k, len(train)))
        metrics["eta_ang"][t] = eta
        metrics["eta_within_bound"][t] = float(eta <= bound)
        metrics["feature_selected_cosine"][t] = by_feature
        metrics["concept_selected_cosine"][t] = by_concept
        metrics["cosine_gap"][t] = by_concept - by_feature
    return _entries(metrics)


def _run_assumption_report(config, point, _paired) -> list[Entry]:
    spec = world_spec_for(config, point)
    data_rng = make_rng(config.seed, (DATA_STREAM,))
    world = build_world(spec, data_rng)
    train = world.sample(config.n_train, data_rng)
    s_prime = config.s_prime or spec.s
    names = ("eta_ang", "eta_spa", "eta_rep", "kappa", "neighborhood_size")
    metrics = {name: np.empty(config.trials) for name in names}
    for t in range(config.trials):
        rng = _trial_rng(config, t)
        test = world.sample(1, rng)
        report = check_assumptions(world, train, test.features[0], test.concepts[0],
                                   config.radius, s_prime, rng)
        for name, value in zip(names, (report.eta_ang, report.eta_spa, report.eta_rep,
                                       report.kappa, report.k)):
            metrics[name][t] = value
    return _entries(metrics)


def _classification_data(config: ExperimentConfig, point: dict[str, Any]):
    """(训练特征, 训练标签, 测试特征, 测试标签, 类别数)，所有网格点共用同一份数据"""
    rng = make_rng(config.seed, (DATA_STREAM,))
    if config.dataset is not None:
        train_x, train_y, test_x, test_y = load_dataset(config.dataset, rng)
        n_classes = int(max(train_y.max(), test_y.max())) + 1
    else:
        world = build_world(world_spec_for(config, point), rng)
        train, train_y, test, test_y = synthetic_classification(
            world, config.n_train, config.n_test, config.n_classes, rng)
        train_x, test_x, n_classes = train.features, test.features, config.n_classes
    return train_x, train_y, test_x, test_y, n_classes


@dataclass
class TttOutcome:
    logits: FloatArray
    votes: np.ndarray
    neighborhood_accuracy: FloatArray
    heads: dict[int, LinearHead]


def _neighbors(query, points, k: int, metric) -> np.ndarray:
    # 零向量没有方向，退回欧氏距离
    if metric == "cosine" and not np.any(query):
        metric = "l2"
    return knn(query, points, min(k, len(points)), metric=metric).members


def evaluate_ttt(base: LinearHead, train_x, train_y, test_x, config: TttConfig,
                 keep=()) -> TttOutcome:
    """对每个测试点检索邻域、微调副本并预测；同时给出多数投票"""
    n_test = test_x.shape[0]
    logits = np.empty((n_test, base.n_classes))
    votes = np.empty(n_test, dtype=np.int64)
    neighborhood_accuracy = np.empty(n_test)
    heads = {}
    keep = set(int(i) for i in keep)
    for i, query in enumerate(test_x):
        members = _neighbors(query, train_x, max(config.k, config.vote_k), config.metric)
        local = members[:config.k]
        head = ttt_finetune(base, train_x[local], train_y[local], config)
        logits[i] = head.logits(query)[0]
        neighborhood_accuracy[i] = float(np.mean(head.predict(train_x[local]) == train_y[local]))
        votes[i] = majority_vote(train_y[members[:config.vote_k]])
        if i in keep:
            heads[i] = head
    return TttOutcome(logits=logits, votes=votes, neighborhood_accuracy=neighborhood_accuracy,
                      heads=heads)


def _classification_metrics(global_logits, outcome: TttOutcome, test_x, test_y) -> dict:
    global_pred = np.argmax(global_logits, axis=1)
    ttt_pred = np.argmax(outcome.logits, axis=1)
    global_xent = cross_entropy_per_point(global_logits, test_y)
    ttt_xent = cross_entropy_per_point(outcome.logits, test_y)
    either = (global_pred == test_y) | (ttt_pred == test_y)
    metrics = {
        "global_error": (global_pred != test_y).astype(float),
        "ttt_error": (ttt_pred != test_y).astype(float),
        "vote_error": (outcome.votes != test_y).astype(float),
        "global_xent": global_xent,
        "ttt_xent": ttt_xent,
        "ttt_neighborhood_accuracy": outcome.neighborhood_accuracy,
        "ttt_test_accuracy": (ttt_pred == test_y).astype(float),
    }
    if np.any(either):
        metrics["global_xent_correct"] = global_xent[either]
        metrics["ttt_xent_correct"] = ttt_xent[either]
    if outcome.heads:
        metrics["global_ttt_accuracy"] = np.array([
            float(np.mean(head.predict(test_x) == test_y)) for head in outcome.heads.values()
        ])
    return metrics


def _run_model_scaling(config, point, _paired) -> list[Entry]:
    train_x, train_y, test_x, test_y, n_classes = _classification_data(config, point)
    width = int(point.get("width", 32))
    per_trial = []
    for t in range(config.trials):
        # 同一试验流在各宽度之间成对
        rng = _trial_rng(config, t)
        if config.feature_map == "mlp":
            network = train_mlp_head(train_x, train_y, n_classes, width, config.head, rng)
            f_train, f_test = network.features(train_x), network.features(test_x)
            base = network.head
        else:
            feature_map = random_relu_features(train_x.shape[1], width, rng)
            f_train, f_test = feature_map.transform(train_x), feature_map.transform(test_x)
            base = train_global_head(f_train, train_y, n_classes, config.head, rng)
        keep = rng.choice(len(test_y), size=min(config.global_ttt_heads, len(test_y)),
                          replace=False)
        outcome = evaluate_ttt(base, f_train, train_y, f_test, config.ttt, keep)
        per_trial.append(_classification_metrics(base.logits(f_test), outcome, f_test, test_y))
        logger.debug("模型规模 width=%d 第 %d/%d 次试验完成", width, t + 1, config.trials)
    names = [name for name in per_trial[0] if all(name in metrics for metrics in per_trial)]
    return _entries({name: np.concatenate([metrics[name] for metrics in per_trial])
                     for name in names})


def _run_data_scaling(config, point, _paired) -> list[Entry]:
    train_x, train_y, test_x, test_y, n_classes = _classification_data(config, point)
    rng = _trial_rng(config, 0)
    idx = balanced_subsample(train_y, float(point.get("fraction", 1.0)), rng)
    sub_x, sub_y = train_x[idx], train_y[idx]
    base = train_global_head(sub_x, sub_y, n_classes, config.head, rng)
    outcome = evaluate_ttt(base, sub_x, sub_y, test_x, config.ttt)
    metrics = _classification_metrics(base.logits(test_x), outcome, test_x, test_y)
    counts = np.bincount(sub_y, minlength=n_classes)
    metrics["class_count_spread"] = np.array([float(counts.max() - counts.min())])
    metrics["subsample_size"] = np.array([float(idx.size)])
    return _entries(metrics)


def _run_moe_scaling(config, point, _paired) -> list[Entry]:
    train_x, train_y, test_x, test_y, n_classes = _classification_data(config, point)
    base = train_global_head(train_x, train_y, n_classes, config.head,
                             make_rng(config.seed, (DATA_STREAM, 1)))
    moe_config = _validated(MoeConfig, config.moe, point)
    moe = train_moe(train_x, train_y, base, moe_config, _trial_rng(config, 0))
    outcome = evaluate_ttt(base, train_x, train_y, test_x, config.ttt)
    return _entries({
        "moe_error": (route_and_predict(moe, test_x) != test_y).astype(float),
        "global_error": (base.predict(test_x) != test_y).astype(float),
        "ttt_error": (np.argmax(outcome.logits, axis=1) != test_y).astype(float),
    })


def _run_sae_train(config, point, _paired) -> list[Entry]:
    sae_config = sae_config_for(config, point)
    spec = world_spec_for(config, point)
    fixed = None
    if config.dataset is not None:
        fixed, _, _, _ = load_dataset(config.dataset, make_rng(config.seed, (DATA_STREAM,)))
    metrics = {name: np.empty(config.trials) for name in ("dead_fraction", "reconstruction")}
    atom_cosine = np.empty(config.trials)
    for t in range(config.trials):
        rng = _trial_rng(config, t)
        world = None
        if fixed is None:
            world = build_world(spec, rng)
            data = world.sample(config.n_train, rng).features
        else:
            data = fixed
        model = train_sae(sae_config, data, rng)
        metrics["dead_fraction"][t] = dead_fraction(model, data, sae_config.dead_threshold)
        recon = sae_encode(model, data) @ model.decoder.T
        metrics["reconstruction"][t] = float(np.sum((recon - data) ** 2) / np.sum(data ** 2))
        if world is not None:
            norms = np.linalg.norm(model.decoder, axis=0)
            atoms = model.decoder / np.where(norms > 0, norms, 1.0)
            cosines = np.abs(world.projection.T @ atoms)
            atom_cosine[t] = float(np.mean(cosines.max(axis=1)))
    if fixed is None:
        metrics["atom_cosine"] = atom_cosine
    return _entries(metrics)


def _run_sae_mask(config, point, _paired) -> list[Entry]:
    spec = world_spec_for(config, point)
    data_rng = make_rng(config.seed, (DATA_STREAM,))
    world = build_world(spec, data_rng)
    train = world.sample(config.n_train, data_rng)
    edges = class_edges(train.targets, config.n_classes)
    model = None
    if config.sae is not None:
        model = train_sae(sae_config_for(config, point), train.features, data_rng)

    def encode(dataset):
        """(Φ̂, Ψ̂)；未配置 SAE 时直接使用真实概念与特征"""
        if model is None:
            return dataset.concepts, dataset.features
        codes = sae_encode(model, dataset.features)
        return codes, codes @ model.decoder.T

    k, n_classes = config.ttt.k, config.n_classes
    dense_config = TttConfig(k=k, steps=config.mask.steps, lr=config.mask.lr)
    names = ("mask_size", "active_union", "mask_ratio", "masked_accuracy", "unmasked_accuracy",
             "test_mask_accuracy", "dense_accuracy", "dense_masked_agreement", "test_and_mask",
             "neighbor_and_mask_union", "neighbor_and_test_union")
    metrics = {name: np.empty(config.trials) for name in names}
    rel_tv = np.empty((config.trials, min(config.top_t, n_classes)))

    for t in range(config.trials):
        rng = _trial_rng(config, t)
        # 测试点与邻域取自同一概念池
        pool = int(rng.integers(len(world.pools)))
        test = world.sample(1, rng, pool=pool)
        local = world.sample(k + config.holdout, rng, pool=pool)
        codes, dense = encode(local)
        labels = label_by_target(local.targets, edges)
        codes_fit, dense_fit, y_fit = codes[:k], dense[:k], labels[:k]
        codes_held, dense_held, y_held = codes[k:], dense[k:], labels[k:]
        active = codes_fit != 0

        _, unmasked_head = learn_concept_mask(codes_fit, y_fit, n_classes, config.mask, rng,
                                              fixed_mask=np.ones(codes.shape[1], dtype=bool))
        mask, masked_head = learn_concept_mask(codes_fit, y_fit, n_classes, config.mask, rng,
                                               base=unmasked_head)
        star = encode(test)[0][0] != 0
        test_mask, test_head = learn_concept_mask(codes_fit, y_fit, n_classes, config.mask, rng,
                                                  fixed_mask=star)
        dense_head = ttt_finetune(LinearHead.zeros(n_classes, dense.shape[1]), dense_fit, y_fit,
                                  dense_config)

        masked_logits = masked_head.logits(codes_held * mask.mask)
        dense_logits = dense_head.logits(dense_held)
        stats = mask_intersection_stats(mask.mask, star, active)

        metrics["mask_size"][t] = mask.size
        metrics["active_union"][t] = stats["neighbor_union"]
        metrics["mask_ratio"][t] = mask.size / max(stats["neighbor_union"], 1)
        metrics["masked_accuracy"][t] = np.mean(np.argmax(masked_logits, axis=1) == y_held)
        metrics["unmasked_accuracy"][t] = np.mean(unmasked_head.predict(codes_held) == y_held)
        metrics["test_mask_accuracy"][t] = np.mean(
            test_head.predict(codes_held * test_mask.mask) == y_held)
        metrics["dense_accuracy"][t] = np.mean(np.argmax(dense_logits, axis=1) == y_held)
        metrics["dense_masked_agreement"][t] = np.mean(
            np.argmax(dense_logits, axis=1) == np.argmax(masked_logits, axis=1))
        for name in ("test_and_mask", "neighbor_and_mask_union", "neighbor_and_test_union"):
            metrics[name][t] = stats[name]
        comparison = calibrate_and_compare(dense_logits, masked_logits, rel_tv.shape[1])
        rel_tv[t] = comparison.mean_rel_tv
        logger.debug("掩码试验 %d/%d: 池 %d 掩码 %d/%d", t + 1, config.trials, pool, mask.size,
                     stats["neighbor_union"])

    for rank in range(rel_tv.shape[1]):
        metrics[f"rel_tv_rank{rank + 1}"] = rel_tv[:, rank]
    return _entries(metrics)


_RUNNERS: dict[str, Runner] = {
    "interference": _run_interference,
    "ttt-rate": _run_ttt_rate,
    "model-scaling": _run_model_scaling,
    "data-scaling": _run_data_scaling,
    "neighborhood-sweep": _run_neighborhood_sweep,
    "sae-train": _run_sae_train,
    "sae-mask": _run_sae_mask,
    "moe-scaling": _run_moe_scaling,
    "assumption-report": _run_assumption_report,
    "concentration": _run_concentration,
    "geometry": _run_geometry,
}


def grid_points(config: ExperimentConfig) -> tuple[list[dict[str, Any]], Optional[list]]:
    """网格点按轴声明顺序做笛卡尔积；成对轴不展开"""
    axes = config.effective_axes()
    paired = PAIRED_AXES.get(config.experiment)
    paired_values = axes.pop(paired, None) if paired else None
    names = list(axes)
    points = [dict(zip(names, combo)) for combo in itertools.product(*axes.values())]
    return points, paired_values


def run_experiment(config: ExperimentConfig,
                   runners: Optional[dict[str, Runner]] = None) -> ExperimentResult:
    """
    执行实验网格

    各网格点在线程池中独立运行；任一点失败只记录该点，其余点照常完成。
    结果按网格顺序合并，与线程数无关。
    """
    runner = (runners or _RUNNERS)[config.experiment]
    points, paired_values = grid_points(config)
    paired = PAIRED_AXES.get(config.experiment)

    def run_point(indexed):
        index, point = indexed
        try:
            return index, point, runner(config, point, paired_values), None
        except Exception as e:
            logger.error("网格点 %s 失败: %s", point, e)
            return index, point, None, f"{type(e).__name__}: {e}"

    with ThreadPoolExecutor(max_workers=config.threads) as pool:
        outputs = list(tqdm(pool.map(run_point, enumerate(points)), total=len(points),
                            desc=config.label, disable=not sys.stderr.isatty()))

    axis_names = list(points[0]) if points else []
    if paired:
        axis_names.append(paired)
    rows, failures = [], []
    for index, point, entries, error in outputs:
        if error is not None:
            failures.append({"point": point, "error": error})
            continue
        for metric_index, (extra, metric, samples) in enumerate(entries):
            samples = np.asarray(samples, dtype=np.float64).ravel()
            if samples.size == 0:
                continue
            low, high = bootstrap_ci(samples, config.resamples, config.level,
                                     make_rng(config.seed, (BOOTSTRAP_STREAM, index, metric_index)))
            rows.append({"experiment": config.label, **point, **extra, "metric": metric,
                         "mean": float(samples.mean()), "ci_low": low, "ci_high": high,
                         "n": int(samples.size), "seed": config.seed})

    table = pd.DataFrame(rows, columns=["experiment", *axis_names, *RESULT_COLUMNS])
    provenance = {
        "experiment": config.label,
        "kind": config.experiment,
        "seed": config.seed,
        "version": VERSION,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "points": len(points),
        "failures": failures,
    }
    logger.info("实验 %s 完成: %d 个网格点, %d 个失败", config.label, len(points), len(failures))
    return ExperimentResult(experiment=config.label, table=table, provenance=provenance,
                            failures=failures)


def write_result(result: ExperimentResult, out_dir: str | Path,
                 fmt: Literal["csv", "svg", "both"] = "both", plot: str = "band",
                 **plot_options) -> list[Path]:
    """写出 CSV（确定性）、SVG 与 provenance.json"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        csv_path = out_dir / f"{result.experiment}.csv"
        result.table.to_csv(csv_path, index=False, float_format="%.17g")
        written.append(csv_path)
    if fmt in ("svg", "both") and not result.table.empty:
        written.append(emit_plot(result.table, plot, out_dir / f"{result.experiment}.svg",
                                 **plot_options))
    provenance_path = out_dir / f"{result.experiment}.provenance.json"
    provenance_path.write_text(json.dumps(result.provenance, ensure_ascii=False, indent=2,
                                          default=str), encoding="utf-8")
    written.append(provenance_path)
    return written


def read_result_csv(path: str | Path) -> pd.DataFrame:
    try:
        table = pd.read_csv(path)
    except (FileNotFoundError, pd.errors.EmptyDataError) as e:
        raise ConfigError(f"无法读取结果表 {path}: {e}") from e
    missing = [c for c in ("experiment", *RESULT_COLUMNS) if c not in table.columns]
    if missing:
        raise ConfigError(f"结果表缺少列: {missing}")
    return table


class ExperimentService:
    """实验服务：命令行与 HTTP 接口共用的入口"""

    def kinds(self) -> list[str]:
        return list(EXPERIMENT_KINDS)

    def load(self, path: str | Path, **overrides) -> ExperimentConfig:
        return load_config(path, **overrides)

    def run(self, config: ExperimentConfig, write: bool = True) -> ExperimentResult:
        result = run_experiment(config)
        if write and config.out:
            write_result(result, config.out, config.format, config.plot,
                         logx=config.logx, logy=config.logy)
        return result
