"""
绘图服务 - 由结果表生成确定性的 SVG 图
"""

import logging
from pathlib import Path
from typing import Literal, Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from services.errors import ConfigError  # noqa: E402

logger = logging.getLogger(__name__)

PlotKind = Literal["line", "band", "hist"]

# 固定 SVG 内部 id 的盐值并以文本形式输出字体，保证字节级可复现
_RC = {"svg.hashsalt": "suplab", "svg.fonttype": "none"}

# 非坐标轴列
RESERVED_COLUMNS = ("experiment", "metric", "mean", "ci_low", "ci_high", "n", "seed")


def axis_columns(frame: pd.DataFrame) -> list[str]:
    return [c for c in frame.columns if c not in RESERVED_COLUMNS]


def build_figure(frame: pd.DataFrame, kind: PlotKind = "band", x: Optional[str] = None,
                 logx: bool = False, logy: bool = False, title: Optional[str] = None) -> Figure:
    """
    按指标分组绘图

    line: 均值折线；band: 均值折线加置信带（单点序列只画标记）；hist: 均值直方图
    """
    if frame.empty:
        raise ConfigError("结果为空，无法绘图")
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    if kind == "hist":
        for metric, group in frame.groupby("metric", sort=False):
            ax.hist(group["mean"].to_numpy(), bins="auto", alpha=0.6, label=str(metric))
        ax.set_xlabel("mean")
        ax.set_ylabel("count")
    else:
        axes = axis_columns(frame)
        x = x or (axes[0] if axes else None)
        others = [c for c in axes if c != x]
        series_keys = ["metric"] + others
        for key, group in frame.groupby(series_keys, sort=False):
            key = key if isinstance(key, tuple) else (key,)
            label = " ".join(str(k) for k in key)
            group = group.sort_values(x) if x else group
            xs = group[x].to_numpy(dtype=float) if x else range(len(group))
            if len(group) == 1:
                ax.plot(xs, group["mean"].to_numpy(), marker="o", linestyle="none", label=label)
                continue
            line, = ax.plot(xs, group["mean"].to_numpy(), marker="o", label=label)
            if kind == "band":
                ax.fill_between(xs, group["ci_low"].to_numpy(), group["ci_high"].to_numpy(),
                                color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel(x or "point")
        ax.set_ylabel("mean")
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
    ax.legend(fontsize="small")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return fig


def emit_plot(frame: pd.DataFrame, kind: PlotKind, path: str | Path, **options) -> Path:
    """写出独立 SVG 文件，同样的输入得到同样的字节"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(_RC):
        fig = build_figure(frame, kind, **options)
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        finally:
            plt.close(fig)
    logger.info("图已写出: %s", path)
    return path
