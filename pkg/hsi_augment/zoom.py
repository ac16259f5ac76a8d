from typing import Optional

import numpy as np

from hsi_src.dataset import HsiCube, Sample
from hsi_src.errors import InvalidRangeError
from hsi_src.tensor_core import SeededRng

from .base import AugmentationKind, Augmenter, resample_bilinear

ZOOM_RANGE = (1.1, 1.5)


def zoom_sample(sample: Sample, factor: float) -> Sample:
    """放大：把 patch 中央 (s/factor)² 的子窗口重采样到 s×s 网格"""
    lo, hi = ZOOM_RANGE
    if not lo <= factor <= hi:
        raise InvalidRangeError(f"缩放因子 {factor} 不在 [{lo}, {hi}] 内")
    sx, sy, _ = sample.patch.shape
    cx, cy = (sx - 1) / 2.0, (sy - 1) / 2.0
    xs, ys = np.meshgrid(np.arange(sx, dtype=np.float64), np.arange(sy, dtype=np.float64), indexing="ij")
    patch = resample_bilinear(sample.patch, cx + (xs - cx) / factor, cy + (ys - cy) / factor)
    return Sample(patch, sample.label, sample.origin, synthetic=True)


class ZoomAugmenter(Augmenter):
    kind = AugmentationKind.ZOOM

    def synthesize(self, source: Sample, rng: SeededRng, padded: Optional[HsiCube] = None) -> Sample:
        return zoom_sample(source, float(rng.uniform(*ZOOM_RANGE)))
