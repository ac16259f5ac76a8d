"""增广类型、类别均衡预算与共用的重采样工具"""

from __future__ import annotations

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import ndimage

from hsi_src.dataset import HsiCube, Sample
from hsi_src.errors import BudgetError
from hsi_src.tensor_core import SeededRng

logger = logging.getLogger(__name__)


class AugmentationKind(str, Enum):
    NONE = "none"
    ROTATE = "rotate"
    FLIP = "flip"
    ZOOM = "zoom"
    MIXED = "mixed"


@dataclass
class AugmentationBudget:
    original: Dict[int, int]  # n_c
    synthetic: Dict[int, int]  # s_c

    @property
    def max_count(self) -> int:
        return max(self.original.values())

    def total(self, cls: int) -> int:
        return self.original[cls] + self.synthetic[cls]

    def check(self) -> None:
        n_max = self.max_count
        for cls, n in self.original.items():
            s = self.synthetic.get(cls, 0)
            if s < 0 or s > n or n + s > n_max:
                raise BudgetError(f"类别 {cls}: {s} 个合成样本超出预算（n={n}, N_max={n_max}）")

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"class": c, "n_c": self.original[c], "s_c": self.synthetic[c], "total": self.total(c)}
            for c in sorted(self.original)
        ]
        return pd.DataFrame(rows, columns=["class", "n_c", "s_c", "total"])


def compute_budget(class_counts: Union[Mapping[int, int], Sequence[int]]) -> AugmentationBudget:
    """
    s_c = max(0, min(n_c, N_max - n_c))

    传入普通序列时，按类别 1..len(counts) 的计数解释。
    """
    counts = dict(class_counts) if isinstance(class_counts, Mapping) else {
        i + 1: n for i, n in enumerate(class_counts)
    }
    counts = {int(c): int(n) for c, n in counts.items()}
    if not counts or any(n < 0 for n in counts.values()):
        raise BudgetError(f"类别计数必须非负，当前为 {counts}")
    n_max = max(counts.values())
    if n_max == 0:
        raise BudgetError("所有类别计数均为 0，无法计算增广预算")
    synthetic = {c: max(0, min(n, n_max - n)) for c, n in counts.items()}
    return AugmentationBudget(counts, synthetic)


def source_window_size(patch_size: int) -> int:
    # 不小于 patch_size·√2 的最小奇数（7 -> 11）
    size = math.ceil(patch_size * math.sqrt(2) - 1e-9)
    return size if size % 2 == 1 else size + 1


def resample_bilinear(volume: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """在空间位置 (xs, ys) 上对 ``volume``（X×Y×B）的每个波段做双线性采样"""
    bands = volume.shape[2]
    grid_x = np.broadcast_to(xs[..., None], xs.shape + (bands,))
    grid_y = np.broadcast_to(ys[..., None], ys.shape + (bands,))
    grid_l = np.broadcast_to(np.arange(bands, dtype=np.float64), xs.shape + (bands,))
    return ndimage.map_coordinates(volume, [grid_x, grid_y, grid_l], order=1, mode="nearest")


class Augmenter(ABC):
    """合成样本生成器基类，子类自行从 ``rng`` 抽取参数"""

    kind: AugmentationKind

    def __init__(self, patch_size: int = 7):
        self.patch_size = patch_size

    @abstractmethod
    def synthesize(self, source: Sample, rng: SeededRng, padded: Optional[HsiCube] = None) -> Sample:
        ...

    def __repr__(self) -> str:
        return f"{type(self).__name__}(patch_size={self.patch_size})"
