from collections import Counter
from typing import Dict, List, Optional, Sequence, Tuple, Union
import importlib
import logging

from hsi_src.dataset import HsiCube, Sample
from hsi_src.errors import BudgetError, ConfigError
from hsi_src.tensor_core import SeededRng

from .base import AugmentationBudget, AugmentationKind, Augmenter, compute_budget

logger = logging.getLogger(__name__)

# 增广变体注册信息：模块路径与类名
_AUGMENTER_REGISTRY: Dict[AugmentationKind, Tuple[str, str]] = {
    AugmentationKind.ROTATE: ("hsi_augment.rotate", "RotateAugmenter"),
    AugmentationKind.FLIP: ("hsi_augment.flip", "FlipAugmenter"),
    AugmentationKind.ZOOM: ("hsi_augment.zoom", "ZoomAugmenter"),
    AugmentationKind.MIXED: ("hsi_augment.mixed", "MixedAugmenter"),
}

# 兼容实验表格里的变体名
_ALIASES = {
    "ours": AugmentationKind.NONE,
    "ours-none": AugmentationKind.NONE,
    "ours-rotate": AugmentationKind.ROTATE,
    "rotation": AugmentationKind.ROTATE,
    "ours-flip": AugmentationKind.FLIP,
    "flipping": AugmentationKind.FLIP,
    "ours-zoom": AugmentationKind.ZOOM,
    "zooming": AugmentationKind.ZOOM,
    "ours-mixed": AugmentationKind.MIXED,
    "mix": AugmentationKind.MIXED,
}


def normalize_kind(kind: Union[str, AugmentationKind, None]) -> AugmentationKind:
    """将传入的变体名（枚举、短名或别名）规范化为 AugmentationKind。"""
    if kind is None:
        return AugmentationKind.NONE
    if isinstance(kind, AugmentationKind):
        return kind
    key = str(kind).strip().lower()
    try:
        return AugmentationKind(key)
    except ValueError:
        pass
    if key in _ALIASES:
        return _ALIASES[key]
    raise ConfigError(
        f"不支持的增广方式: {kind}. 支持的有: {', '.join(k.value for k in AugmentationKind)} "
        f"或 {'/'.join(_ALIASES.keys())}"
    )


def load_augmenter(kind: Union[str, AugmentationKind], patch_size: int = 7) -> Augmenter:
    """动态导入并实例化增广器。"""
    kind = normalize_kind(kind)
    if kind is AugmentationKind.NONE:
        raise ConfigError("'none' 没有对应的增广器")
    module_path, class_name = _AUGMENTER_REGISTRY[kind]
    module = importlib.import_module(module_path)
    return getattr(module, class_name)(patch_size=patch_size)


def class_counts(samples: Sequence[Sample]) -> Dict[int, int]:
    return dict(sorted(Counter(s.label for s in samples).items()))


def augment_training_set(
    samples: Sequence[Sample],
    kind: Union[str, AugmentationKind],
    rng: SeededRng,
    budget: Optional[AugmentationBudget] = None,
    padded: Optional[HsiCube] = None,
) -> List[Sample]:
    """
    训练前一次性增广：原始样本原样保留，每个类别 c 追加恰好 s_c 个合成样本

    Args:
        samples: 原始训练样本
        kind: 增广方式
        rng: 随机流；每个类别使用 rng.fork(c) 派生的独立流
        budget: 类别预算，缺省时由 samples 的类别计数计算
        padded: 已镜像填充（且已归一化）的场景，旋转需要从中读取更大的源窗口

    Returns:
        原始样本在前、合成样本在后的新列表
    """
    kind = normalize_kind(kind)
    if kind is AugmentationKind.NONE:
        return list(samples)
    if not samples:
        return []

    counts = class_counts(samples)
    budget = budget or compute_budget(counts)
    if budget.original != counts:
        raise BudgetError(f"预算中的计数 {budget.original} 与训练样本计数 {counts} 不一致")
    budget.check()

    patch_size = samples[0].patch.shape[0]
    augmenter = load_augmenter(kind, patch_size=patch_size)
    by_class: Dict[int, List[Sample]] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)

    synthetic: List[Sample] = []
    for cls in sorted(by_class):
        wanted = budget.synthetic.get(cls, 0)
        if not wanted:
            continue
        originals = by_class[cls]
        class_rng = rng.fork(cls)
        for _ in range(wanted):
            source = originals[int(class_rng.integers(0, len(originals)))]
            synthetic.append(augmenter.synthesize(source, class_rng, padded))
    logger.info(f"{kind.value} 增广: {len(samples)} 个原始样本后追加 {len(synthetic)} 个合成样本")
    return list(samples) + synthetic
