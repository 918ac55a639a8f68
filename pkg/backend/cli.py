"""
命令行入口 - simulate / sae / classify / report / serve
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from services.concept_model import build_world
from services.datasets import load_embeddings
from services.errors import ConfigError, SuplabError
from services.harness import (
    ExperimentConfig,
    ExperimentService,
    read_result_csv,
    sae_config_for,
    world_spec_for,
)
from services.numeric_core import make_rng
from services.plotting import emit_plot
from services.sae import dead_fraction, load_sae, sae_encode, save_sae, train_sae
from services.settings import configure_logging

logger = logging.getLogger("suplab.cli")

SUBCOMMAND_KINDS = {
    "simulate": {"interference", "ttt-rate", "neighborhood-sweep", "assumption-report",
                 "concentration", "geometry"},
    "sae": {"sae-train", "sae-mask"},
    "classify": {"model-scaling", "data-scaling", "moe-scaling"},
}

DEFAULT_OUT = "results"


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="实验配置 TOML 文件")
    parser.add_argument("--seed", type=int, help="覆盖配置中的随机种子")
    parser.add_argument("--out", help="输出目录")
    parser.add_argument("--threads", type=int, help="并行网格点数")
    parser.add_argument("--format", choices=["csv", "svg", "both"], help="输出格式")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="suplab", description="线性表示假设下的测试时训练数值实验室")
    parser.add_argument("--log-level", default="INFO", help="日志级别")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="合成世界实验")
    _add_run_flags(simulate)

    sae = commands.add_parser("sae", help="稀疏自编码器训练、评估与掩码实验")
    sae.add_argument("action", choices=["train", "eval", "mask"])
    sae.add_argument("--config", help="实验配置 TOML 文件（train/mask）")
    sae.add_argument("--seed", type=int)
    sae.add_argument("--out")
    sae.add_argument("--threads", type=int)
    sae.add_argument("--format", choices=["csv", "svg", "both"])
    sae.add_argument("--checkpoint", help="train: 额外保存一个 SAE 检查点；eval: 读取的检查点")
    sae.add_argument("--data", help="eval: 嵌入文件（CSV 或 EMB1）")

    classify = commands.add_parser("classify", help="数据集上的全局/TTT/投票/专家混合分类")
    _add_run_flags(classify)

    report = commands.add_parser("report", help="由结果 CSV 生成图")
    report.add_argument("--input", required=True, help="结果 CSV")
    report.add_argument("--out", help="输出目录（缺省与 CSV 同目录）")
    report.add_argument("--kind", choices=["line", "band", "hist"], default="band")
    report.add_argument("--metric", action="append", help="只绘制指定指标，可重复")
    report.add_argument("--logx", action="store_true")
    report.add_argument("--logy", action="store_true")

    serve = commands.add_parser("serve", help="启动 HTTP 接口")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _load_for(command: str, args, service: ExperimentService) -> ExperimentConfig:
    if not args.config:
        raise ConfigError(f"{command} 需要 --config")
    config = service.load(args.config, seed=args.seed, out=args.out, threads=args.threads,
                          format=args.format)
    if config.experiment not in SUBCOMMAND_KINDS[command]:
        allowed = ", ".join(sorted(SUBCOMMAND_KINDS[command]))
        raise ConfigError(f"{command} 不支持实验类型 {config.experiment}（可用: {allowed}）")
    if config.out is None:
        config = config.model_copy(update={"out": DEFAULT_OUT})
    return config


def _run(command: str, args, service: ExperimentService) -> int:
    config = _load_for(command, args, service)
    result = service.run(config)
    print(result.table.to_string(index=False))
    for failure in result.failures:
        logger.error("网格点失败 %s: %s", failure["point"], failure["error"])
    return 1 if result.failures else 0


def _sae_train_checkpoint(config: ExperimentConfig, path: str) -> None:
    rng = make_rng(config.seed, (0,))
    world = build_world(world_spec_for(config, {}), rng)
    data = world.sample(config.n_train, rng).features
    model = train_sae(sae_config_for(config, {}), data, rng)
    save_sae(model, path)
    logger.info("SAE 检查点已保存: %s", path)


def _sae_eval(args) -> int:
    if not args.checkpoint or not args.data:
        raise ConfigError("sae eval 需要 --checkpoint 与 --data")
    model = load_sae(args.checkpoint)
    data, _ = load_embeddings(args.data)
    if data.shape[1] != model.d2:
        raise ConfigError(f"数据维度 {data.shape[1]} 与 SAE 输入维度 {model.d2} 不一致")
    recon = sae_encode(model, data) @ model.decoder.T
    summary = {
        "dead_fraction": dead_fraction(model, data),
        "reconstruction": float(np.sum((recon - data) ** 2) / np.sum(data ** 2)),
        "n": int(data.shape[0]),
    }
    print(json.dumps(summary, ensure_ascii=False))
    return 0


def _sae(args, service: ExperimentService) -> int:
    if args.action == "eval":
        return _sae_eval(args)
    config = _load_for("sae", args, service)
    expected = "sae-train" if args.action == "train" else "sae-mask"
    if config.experiment != expected:
        raise ConfigError(f"sae {args.action} 需要 experiment = \"{expected}\"")
    status = _run("sae", args, service)
    if args.action == "train" and args.checkpoint:
        _sae_train_checkpoint(config, args.checkpoint)
    return status


def _report(args) -> int:
    table = read_result_csv(args.input)
    if args.metric:
        table = table[table["metric"].isin(args.metric)]
    if table.empty:
        raise ConfigError("没有可绘制的行")
    source = Path(args.input)
    out_dir = Path(args.out) if args.out else source.parent
    path = emit_plot(table, args.kind, out_dir / f"{source.stem}.svg", logx=args.logx,
                     logy=args.logy)
    print(path)
    return 0


def _serve(args) -> int:
    import uvicorn

    uvicorn.run("main:app", host=args.host, port=args.port)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level.upper())
    service = ExperimentService()
    try:
        if args.command in ("simulate", "classify"):
            return _run(args.command, args, service)
        if args.command == "sae":
            return _sae(args, service)
        if args.command == "report":
            return _report(args)
        return _serve(args)
    except SuplabError as e:
        logger.error("%s 失败: %s", args.command, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
