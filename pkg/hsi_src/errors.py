"""
库与命令行共用的异常层级

每个异常同时继承最接近的内置异常，原有的 ``except ValueError`` 之类的处理照常生效。
命令行按异常类型映射退出码。
"""


class HypergridError(Exception):
    """hypergrid 所有异常的基类"""


class ShapeError(HypergridError, ValueError):
    """张量形状与操作不符"""


class BoundsError(HypergridError, IndexError):
    """下标区间或坐标超出有效范围"""


class InvalidRangeError(HypergridError, ValueError):
    """数值区间退化（lo >= hi、缩放因子越界等）"""


class LabelError(HypergridError, ValueError):
    """类别标签不在 1..num_classes（logits 下标为 0..num_classes-1）内"""


class FormatError(HypergridError, ValueError):
    """文件头损坏、载荷大小不符或尺寸不一致"""


class InfeasibleSplitError(HypergridError, ValueError):
    """场景无法按要求的折数切分"""


class BudgetError(HypergridError, ValueError):
    """增广预算与其作用的类别计数不一致"""


class ConfigError(HypergridError, ValueError):
    """运行配置或命令行用法无效"""


class UnpairedKeysError(HypergridError, ValueError):
    """结果文件无法配对做统计比较"""

    def __init__(self, message: str, missing=None):
        super().__init__(message)
        self.missing = missing or {}


class VerificationError(HypergridError):
    """自检（梯度检查、泄漏检查）失败"""
