"""
张量与可复现随机数的底层模块

张量就是 C 顺序的 ``numpy.ndarray``。patch 的轴顺序为 (x, y, band)，特征栈为
(channel, x, y, band)，可再加一个前置的 batch 轴；光谱轴总在最内层。

随机性统一经过 :class:`SeededRng`，它封装 numpy 的 Philox 计数器生成器。
Philox 的输出逐位确定且与平台无关，相同种子在任何机器上得到相同的随机流。
"""

from __future__ import annotations

import logging
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BoundsError, InvalidRangeError, ShapeError

logger = logging.getLogger(__name__)

DTYPE_TRAIN = np.float32
DTYPE_VERIFY = np.float64

_MASK64 = (1 << 64) - 1


def tensor_create(
    shape: Sequence[int],
    fill: Union[float, Iterable[float]] = 0.0,
    dtype=DTYPE_TRAIN,
) -> np.ndarray:
    """
    创建形状为 ``shape`` 的张量，用常数或给定的值填充

    Args:
        shape: 各轴长度，均 >= 1
        fill: 常数，或按行优先顺序排列的 ``prod(shape)`` 个值（可嵌套）
        dtype: float32（训练）或 float64（校验）

    Returns:
        C 顺序的 ndarray
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"张量形状 {shape} 无效：每个轴长度都必须 >= 1")
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=dtype)
    values = np.asarray(fill, dtype=dtype).reshape(-1)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{values.size} 个值无法填满形状为 {shape} 的张量")
    return np.ascontiguousarray(values.reshape(shape))


def tensor_slice(t: np.ndarray, ranges: Sequence[Tuple[int, int]]) -> np.ndarray:
    """按每个轴的半开区间 ``[lo, hi)`` 复制出子块"""
    if len(ranges) != t.ndim:
        raise ShapeError(f"{t.ndim} 阶张量需要 {t.ndim} 个区间，实际给了 {len(ranges)} 个")
    index = []
    for axis, (lo, hi) in enumerate(ranges):
        if not (0 <= lo < hi <= t.shape[axis]):
            raise BoundsError(f"区间 [{lo}, {hi}) 超出第 {axis} 轴（长度 {t.shape[axis]}）")
        index.append(slice(lo, hi))
    return t[tuple(index)].copy()


def splitmix64(value: int) -> int:
    z = (value + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(base: int, *keys: int) -> int:
    """
    把 ``base`` 与若干整数键混合成一个独立的 64 位种子

    h(base, k1, k2, ...) = splitmix64(... splitmix64(splitmix64(base) ^ k1) ^ k2 ...)
    """
    h = splitmix64(int(base) & _MASK64)
    for key in keys:
        h = splitmix64(h ^ (int(key) & _MASK64))
    return h


class SeededRng:
    """
    带种子的随机数生成器（Philox-4x64），一个实例只归一个使用者

    并行代码不要共享实例，用 :meth:`fork` 为每个进程、类别或单元派生独立的流。
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.generator = np.random.Generator(np.random.Philox(self.seed))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"

    def fork(self, *stream_ids: int) -> "SeededRng":
        """按 (seed, stream ids) 派生独立的流，不推进当前流"""
        return SeededRng(derive_seed(self.seed, *stream_ids))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        if not lo < hi:
            raise InvalidRangeError(f"uniform 要求 lo < hi，当前 lo={lo}, hi={hi}")
        return self.generator.uniform(lo, hi, size=size)

    def integers(self, lo: int, hi: int, size=None):
        if not lo < hi:
            raise InvalidRangeError(f"integers 要求 lo < hi，当前 lo={lo}, hi={hi}")
        return self.generator.integers(lo, hi, size=size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size=size)

    def shuffle(self, n: int) -> np.ndarray:
        """``0..n-1`` 的均匀随机排列"""
        if n < 0:
            raise InvalidRangeError(f"排列长度必须 >= 0，当前为 {n}")
        return self.generator.permutation(int(n))


def rng_uniform(rng: SeededRng, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def rng_shuffle(rng: SeededRng, n: int) -> np.ndarray:
    return rng.shuffle(n)


def as_precision(array: np.ndarray, dtype: Optional[type]) -> np.ndarray:
    # dtype 已一致时不复制
    if dtype is None:
        return array
    return np.asarray(array, dtype=dtype)
