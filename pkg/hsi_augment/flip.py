from typing import Optional

import numpy as np

from hsi_src.dataset import HsiCube, Sample
from hsi_src.errors import InvalidRangeError
from hsi_src.tensor_core import SeededRng

from .base import AugmentationKind, Augmenter

FLIP_AXES = ("horizontal", "vertical")


def flip_sample(sample: Sample, axis: str) -> Sample:
    # horizontal 翻转 x（轴 0），vertical 翻转 y（轴 1）
    if axis not in FLIP_AXES:
        raise InvalidRangeError(f"不支持的翻转方向: {axis}，支持的方向有: {', '.join(FLIP_AXES)}")
    patch = np.flip(sample.patch, axis=FLIP_AXES.index(axis)).copy()
    return Sample(patch, sample.label, sample.origin, synthetic=True)


class FlipAugmenter(Augmenter):
    kind = AugmentationKind.FLIP

    def synthesize(self, source: Sample, rng: SeededRng, padded: Optional[HsiCube] = None) -> Sample:
        return flip_sample(source, FLIP_AXES[int(rng.integers(0, len(FLIP_AXES)))])
