"""
运行环境配置 - 数据目录与日志
"""

import logging
import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

DATA_DIR_ENV = "SUPLAB_DATA_DIR"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# 读取项目根目录或当前目录下的 .env
load_dotenv()


def data_dir() -> Optional[Path]:
    """返回数据集根目录（未设置时为 None）"""
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value).expanduser() if value else None


def resolve_data_path(path: str | Path) -> Path:
    """相对路径按数据集根目录解析"""
    candidate = Path(path).expanduser()
    root = data_dir()
    if not candidate.is_absolute() and root is not None:
        return root / candidate
    return candidate


def configure_logging(level: int | str = logging.INFO) -> None:
    """命令行入口调用一次，安装统一的日志格式"""
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
