import logging
from typing import Optional, Tuple

import numpy as np

from hsi_src.dataset import HsiCube, Sample, extract_patch
from hsi_src.errors import BoundsError
from hsi_src.tensor_core import SeededRng

from .base import AugmentationKind, Augmenter, resample_bilinear, source_window_size

logger = logging.getLogger(__name__)


def rotate_sample(
    padded: HsiCube, origin: Tuple[int, int], angle: float, label: int, patch_size: int = 7
) -> Sample:
    """
    绕中心旋转扩大的源窗口，保留中央的 patch

    中央裁剪框旋转后的四角仍落在源窗口内，不会采到填充值。正角度使 (x, y) 平面逆时针旋转，
    90 度时与 ``np.rot90(patch, k=1)`` 一致。
    """
    window_size = source_window_size(patch_size)
    if padded.pad_radius < (window_size - 1) // 2:
        raise BoundsError(
            f"旋转 {patch_size}x{patch_size} patch 需要填充半径 >= {(window_size - 1) // 2}，"
            f"当前为 {padded.pad_radius}"
        )
    window = extract_patch(padded, origin[0], origin[1], window_size)
    center = (window_size - 1) / 2.0
    offsets = np.arange(patch_size, dtype=np.float64) - (patch_size - 1) / 2.0
    u, v = np.meshgrid(offsets, offsets, indexing="ij")
    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    xs = center + cos * u + sin * v
    ys = center - sin * u + cos * v
    patch = resample_bilinear(window, xs, ys)
    return Sample(patch, label, origin, synthetic=True)


class RotateAugmenter(Augmenter):
    kind = AugmentationKind.ROTATE

    def synthesize(self, source: Sample, rng: SeededRng, padded: Optional[HsiCube] = None) -> Sample:
        if padded is None:
            raise BoundsError("旋转需要从填充后的场景读取源窗口，但未提供")
        angle = float(rng.uniform(0.0, 360.0))
        return rotate_sample(padded, source.origin, angle, source.label, self.patch_size)
