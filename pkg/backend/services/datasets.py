"""
数据读写服务 - MNIST IDX 解析、嵌入文件、统一二进制容器与类别均衡抽样
"""

import gzip
import logging
import struct
from pathlib import Path
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from services.errors import ConfigError, DataFormatError
from services.numeric_core import FloatArray
from services.settings import data_dir, resolve_data_path

logger = logging.getLogger(__name__)

CONTAINER_VERSION = 1
CONTAINER_MAGICS = (b"SAE1", b"HED1", b"MOE1", b"EMB1")

# IDX 类型码 -> 大端 numpy 类型
IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class _Reader:
    """带字节偏移记录的顺序读取器"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.payload):
            raise DataFormatError(f"文件被截断，读取{what}时数据不足", offset=self.offset)
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _read_bytes(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"文件不存在: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as handle:
        return handle.read()


def write_container(path: str | Path, magic: bytes, meta: Sequence[int],
                    arrays: Sequence[np.ndarray]) -> Path:
    """
    写入二进制容器

    布局（小端）: magic[4] | version u32 | n_meta u32 | meta u64×n_meta |
    n_arrays u32 | 每个数组: ndim u32, shape u64×ndim, float64 数据（行优先）
    """
    if magic not in CONTAINER_MAGICS:
        raise ConfigError(f"未知的容器类型: {magic!r}")
    parts = [magic, struct.pack("<II", CONTAINER_VERSION, len(meta))]
    parts.append(struct.pack(f"<{len(meta)}Q", *[int(m) for m in meta]))
    parts.append(struct.pack("<I", len(arrays)))
    for array in arrays:
        array = np.ascontiguousarray(array, dtype="<f8")
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))
    return path


def read_container(path: str | Path, expected_magic: Optional[bytes] = None
                   ) -> tuple[bytes, list[int], list[FloatArray]]:
    """读取二进制容器，返回 (magic, meta, arrays)"""
    reader = _Reader(_read_bytes(path))
    magic = reader.take(4, "文件头")
    if magic not in CONTAINER_MAGICS or (expected_magic and magic != expected_magic):
        raise DataFormatError(f"容器 magic 不匹配: {magic!r}", offset=0)
    (version, n_meta) = reader.unpack("<II", "版本号")
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"不支持的容器版本 {version}", offset=4)
    meta = list(reader.unpack(f"<{n_meta}Q", "元数据"))
    (n_arrays,) = reader.unpack("<I", "数组个数")
    arrays = []
    for i in range(n_arrays):
        (ndim,) = reader.unpack("<I", f"第 {i} 个数组的维数")
        shape = reader.unpack(f"<{ndim}Q", f"第 {i} 个数组的形状")
        count = int(np.prod(shape)) if ndim else 1
        raw = reader.take(8 * count, f"第 {i} 个数组的数据")
        arrays.append(np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape))
    if reader.offset != len(reader.payload):
        raise DataFormatError("容器末尾存在多余字节", offset=reader.offset)
    return magic, meta, arrays


def load_idx(path: str | Path) -> np.ndarray:
    """
    解析 IDX 文件

    文件头为 0x00 0x00 类型码 维数，随后每维一个 32 位大端整数，最后是原始数据。

    Returns:
        原始数值数组（形状取自文件头）
    """
    reader = _Reader(_read_bytes(path))
    zero_a, zero_b, code, ndim = reader.unpack(">BBBB", "magic")
    if zero_a != 0 or zero_b != 0 or code not in IDX_DTYPES:
        raise DataFormatError(f"IDX magic 无效: {zero_a:#04x} {zero_b:#04x} {code:#04x}", offset=0)
    shape = reader.unpack(f">{ndim}I", "维度大小")
    dtype = IDX_DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    raw = reader.take(count * dtype.itemsize, "数据")
    return np.frombuffer(raw, dtype=dtype).astype(dtype.newbyteorder("=")).reshape(shape)


def write_idx(path: str | Path, array: np.ndarray) -> Path:
    """按数组类型写出 IDX 文件"""
    array = np.asarray(array)
    codes = {dtype.newbyteorder("="): code for code, dtype in IDX_DTYPES.items()}
    native = array.dtype.newbyteorder("=")
    if native not in codes:
        raise DataFormatError(f"IDX 不支持的数据类型: {array.dtype}")
    dtype = IDX_DTYPES[codes[native]]
    header = struct.pack(">BBBB", 0, 0, codes[native], array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + array.astype(dtype).tobytes(order="C"))
    return path


def _find_mnist_file(root: Path, stem: str) -> Optional[Path]:
    for candidate in (root / stem, root / f"{stem}.gz", root / "mnist" / stem,
                      root / "mnist" / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    return None


def mnist_available(root: Optional[str | Path] = None) -> bool:
    root = Path(root) if root else data_dir()
    if root is None:
        return False
    return all(_find_mnist_file(root, stem) is not None
               for stems in MNIST_FILES.values() for stem in stems)


def load_mnist(split: Literal["train", "test"] = "train",
               root: Optional[str | Path] = None) -> tuple[FloatArray, np.ndarray]:
    """
    读取 MNIST

    Returns:
        (N×784 像素矩阵，取值 [0,1]; 类别标签)
    """
    root = Path(root) if root else data_dir()
    if root is None:
        raise DataFormatError("未设置 SUPLAB_DATA_DIR，无法定位 MNIST")
    image_stem, label_stem = MNIST_FILES[split]
    image_path = _find_mnist_file(root, image_stem)
    label_path = _find_mnist_file(root, label_stem)
    if image_path is None or label_path is None:
        raise DataFormatError(f"在 {root} 下找不到 MNIST {split} 文件")
    images = load_idx(image_path)
    labels = load_idx(label_path).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"图像数 {images.shape[0]} 与标签数 {labels.shape[0]} 不一致")
    pixels = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    logger.info("已读取 MNIST %s: %s", split, pixels.shape)
    return pixels, labels


def load_embeddings(path: str | Path) -> tuple[FloatArray, Optional[np.ndarray]]:
    """
    读取嵌入矩阵

    支持带表头的 CSV（可选 label 列）与 EMB1 二进制容器（第二个数组为标签）。
    """
    path = resolve_data_path(path)
    if path.suffix.lower() == ".csv":
        try:
            table = pd.read_csv(path, float_precision="round_trip")
        except pd.errors.EmptyDataError as e:
            raise DataFormatError(f"嵌入文件为空: {path}") from e
        except pd.errors.ParserError as e:
            raise DataFormatError(f"嵌入文件各行维度不一致: {e}") from e
        if table.empty:
            raise DataFormatError(f"嵌入文件为空: {path}")
        labels = None
        if "label" in table.columns:
            labels = table.pop("label").to_numpy()
        values = table.to_numpy(dtype=np.float64)
        if np.isnan(values).any() or (labels is not None and pd.isna(labels).any()):
            raise DataFormatError("嵌入文件各行维度不一致（存在缺失值）")
        return values, None if labels is None else labels.astype(np.int64)

    _, _, arrays = read_container(path, b"EMB1")
    if not arrays or arrays[0].ndim != 2:
        raise DataFormatError("EMB1 容器缺少二维嵌入矩阵")
    matrix = arrays[0]
    if matrix.shape[0] == 0:
        raise DataFormatError(f"嵌入文件为空: {path}")
    labels = arrays[1].astype(np.int64) if len(arrays) > 1 else None
    if labels is not None and labels.shape[0] != matrix.shape[0]:
        raise DataFormatError("标签数与嵌入行数不一致")
    return matrix, labels


def save_embeddings(path: str | Path, matrix, labels=None) -> Path:
    """按后缀写出 CSV 或 EMB1 容器"""
    matrix = np.asarray(matrix, dtype=np.float64)
    path = Path(path)
    if path.suffix.lower() == ".csv":
        table = pd.DataFrame(matrix, columns=[f"x{j}" for j in range(matrix.shape[1])])
        if labels is not None:
            table["label"] = np.asarray(labels, dtype=np.int64)
        path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(path, index=False, float_format="%.17g")
        return path
    arrays = [matrix] if labels is None else [matrix, np.asarray(labels, dtype=np.float64)]
    return write_container(path, b"EMB1", [matrix.shape[0], matrix.shape[1]], arrays)


def balanced_subsample(labels, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """
    类别均衡子抽样

    目标规模 round(fraction·N)，每类不超过最小类的样本数，各类数量相差不超过 1。

    Returns:
        升序样本下标
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"抽样比例必须在 (0, 1] 内: {fraction}")
    labels = np.asarray(labels)
    classes, class_counts = np.unique(labels, return_counts=True)
    cap = int(class_counts.min())
    total = max(int(round(fraction * labels.size)), classes.size)
    base, extra = divmod(total, classes.size)
    chosen = []
    for rank, cls in enumerate(classes):
        members = np.flatnonzero(labels == cls)
        quota = min(base + (1 if rank < extra else 0), cap)
        chosen.append(rng.choice(members, size=quota, replace=False))
    return np.sort(np.concatenate(chosen))


class DatasetSpec(BaseModel):
    """真实数据集来源"""

    model_config = ConfigDict(extra="forbid")

    source: Literal["mnist", "embeddings"] = "mnist"
    path: Optional[str] = None
    test_path: Optional[str] = None
    test_fraction: float = Field(0.2, gt=0, lt=1)
    train_limit: Optional[int] = Field(None, ge=1)
    test_limit: Optional[int] = Field(None, ge=1)


def load_dataset(spec: DatasetSpec, rng: np.random.Generator
                 ) -> tuple[FloatArray, np.ndarray, FloatArray, np.ndarray]:
    """按配置读取 (训练特征, 训练标签, 测试特征, 测试标签)"""
    if spec.source == "mnist":
        train_x, train_y = load_mnist("train", spec.path)
        test_x, test_y = load_mnist("test", spec.path)
    else:
        if spec.path is None:
            raise ConfigError("embeddings 数据源需要 path")
        train_x, train_y = load_embeddings(spec.path)
        if train_y is None:
            raise DataFormatError("分类实验需要带标签的嵌入文件")
        if spec.test_path:
            test_x, test_y = load_embeddings(spec.test_path)
            if test_y is None:
                raise DataFormatError("测试嵌入文件缺少标签")
        else:
            order = rng.permutation(train_x.shape[0])
            n_test = max(1, int(round(spec.test_fraction * order.size)))
            test_idx, train_idx = np.sort(order[:n_test]), np.sort(order[n_test:])
            test_x, test_y = train_x[test_idx], train_y[test_idx]
            train_x, train_y = train_x[train_idx], train_y[train_idx]
    if spec.train_limit and spec.train_limit < train_x.shape[0]:
        idx = balanced_subsample(train_y, spec.train_limit / train_x.shape[0], rng)
        train_x, train_y = train_x[idx], train_y[idx]
    if spec.test_limit and spec.test_limit < test_x.shape[0]:
        test_x, test_y = test_x[:spec.test_limit], test_y[:spec.test_limit]
    return train_x, train_y, test_x, test_y
