"""
异常定义 - 各服务共用的错误类型及命令行退出码
"""


class SuplabError(Exception):
    """实验室基础异常"""

    exit_code = 1


class ConfigError(SuplabError, ValueError):
    """配置或参数错误"""

    exit_code = 2


class BudgetError(ConfigError):
    """穷举搜索规模超出预算"""


class DataFormatError(SuplabError, ValueError):
    """数据/文件格式错误"""

    exit_code = 3

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (字节偏移 {offset})"
        super().__init__(message)
        self.offset = offset


class RetrievalError(DataFormatError):
    """近邻检索失败（空数据集等）"""


class NumericError(SuplabError, ArithmeticError):
    """数值错误（非有限梯度、损失等）"""

    exit_code = 4


class DimensionError(NumericError):
    """矩阵维度不匹配"""


class UndefinedSimilarityError(NumericError):
    """零向量无法计算余弦相似度"""
