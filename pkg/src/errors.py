"""
异常类型
所有模块共用的错误层次，CLI 按类型映射退出码
"""

from typing import Optional


class BanditSimError(Exception):
    """banditsim 所有错误的基类"""


class DomainError(BanditSimError, ValueError):
    """参数越界或维度不匹配"""


class SchemaError(DomainError):
    """未知列名或缺失列"""


class ParseError(DomainError):
    """数值列包含非数字，或二值列包含 0/1 以外的值"""


class NumericError(BanditSimError, ArithmeticError):
    """数值求解在迭代上限内未收敛"""


class IngestError(BanditSimError):
    """CSV 文件与期望的表头/格式不符"""


class ConfigError(BanditSimError):
    """配置文件错误，消息中包含文件行号、配置键和期望取值范围"""

    def __init__(
        self,
        message: str,
        key: Optional[str] = None,
        line: Optional[int] = None,
        path: Optional[str] = None
    ):
        self.key = key
        self.line = line
        self.path = path

        location = path or "<config>"
        if line is not None:
            location = f"{location}:{line}"
        prefix = f"{location}: {key}: " if key else f"{location}: "
        super().__init__(prefix + message)
