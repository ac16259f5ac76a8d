from typing import Optional

from hsi_src.dataset import HsiCube, Sample
from hsi_src.tensor_core import SeededRng

from .base import AugmentationKind, Augmenter
from .flip import FlipAugmenter
from .rotate import RotateAugmenter
from .zoom import ZoomAugmenter


class MixedAugmenter(Augmenter):
    """每个合成样本从 rotate / flip / zoom 中均匀选一种"""

    kind = AugmentationKind.MIXED

    def __init__(self, patch_size: int = 7):
        super().__init__(patch_size)
        self.members = [RotateAugmenter(patch_size), FlipAugmenter(patch_size), ZoomAugmenter(patch_size)]

    def synthesize(self, source: Sample, rng: SeededRng, padded: Optional[HsiCube] = None) -> Sample:
        member = self.members[int(rng.integers(0, len(self.members)))]
        return member.synthesize(source, rng, padded)
