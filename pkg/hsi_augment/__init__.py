from .base import AugmentationBudget, AugmentationKind, Augmenter, compute_budget, source_window_size
from .flip import flip_sample
from .pipeline import augment_training_set, class_counts, load_augmenter, normalize_kind
from .rotate import rotate_sample
from .zoom import zoom_sample

__all__ = [
    "AugmentationBudget",
    "AugmentationKind",
    "Augmenter",
    "augment_training_set",
    "class_counts",
    "compute_budget",
    "flip_sample",
    "load_augmenter",
    "normalize_kind",
    "rotate_sample",
    "source_window_size",
    "zoom_sample",
]
