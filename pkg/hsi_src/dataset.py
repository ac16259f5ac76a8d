"""
场景读写、归一化、patch 提取、合成场景与无泄漏划分

坐标一律为原始（未填充）场景中的 (x, y)。
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml
from scipy import ndimage

from .errors import BoundsError, ConfigError, FormatError, InfeasibleSplitError, InvalidRangeError, LabelError
from .tensor_core import DTYPE_TRAIN, SeededRng

logger = logging.getLogger(__name__)

CUBE_MAGIC = "HGCUBE1"
LABEL_MAGIC = "HGLAB1"

Coord = Tuple[int, int]
PathLike = Union[str, Path]


@dataclass
class HsiCube:
    """反射率张量（W×H×B）。``pad_radius`` > 0 表示已镜像填充"""

    reflectance: np.ndarray
    pad_radius: int = 0

    def __post_init__(self):
        if self.reflectance.ndim != 3 or self.reflectance.shape[2] < 1:
            raise FormatError(f"数据立方体必须为 W×H×B 且 B >= 1，当前形状为 {self.reflectance.shape}")
        if not np.all(np.isfinite(self.reflectance)):
            raise FormatError("数据立方体含有非有限值（NaN / Inf）")

    @property
    def width(self) -> int:
        return self.reflectance.shape[0] - 2 * self.pad_radius

    @property
    def height(self) -> int:
        return self.reflectance.shape[1] - 2 * self.pad_radius

    @property
    def bands(self) -> int:
        return self.reflectance.shape[2]


@dataclass
class LabelMap:
    labels: np.ndarray  # (W, H)，0 为背景

    @property
    def width(self) -> int:
        return self.labels.shape[0]

    @property
    def height(self) -> int:
        return self.labels.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def labeled_coords(self) -> List[Coord]:
        xs, ys = np.nonzero(self.labels)
        return [(int(x), int(y)) for x, y in zip(xs, ys)]


@dataclass
class Sample:
    patch: np.ndarray  # (a, b, B)
    label: int  # 1..Θ
    origin: Coord
    synthetic: bool = False


@dataclass
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray


@dataclass
class SplitFold:
    train: List[Coord] = field(default_factory=list)
    test: List[Coord] = field(default_factory=list)


@dataclass
class SplitSpec:
    """交叉验证划分。``patch_radius`` 是测试 patch 的半径，``train_radius`` 是训练样本实际读取的半径
    （旋转增广会读扩大的源窗口），缺省与 ``patch_radius`` 相同。"""

    folds: List[SplitFold]
    patch_radius: int
    block_size: int
    width: int
    height: int
    seed: Optional[int] = None
    train_radius: Optional[int] = None

    def __post_init__(self):
        if self.train_radius is None:
            self.train_radius = self.patch_radius
        if self.train_radius < self.patch_radius:
            raise ConfigError(f"train_radius {self.train_radius} 不能小于 patch_radius {self.patch_radius}")

    def to_dict(self) -> dict:
        return {
            "format": "HGSPLIT1",
            "width": self.width,
            "height": self.height,
            "patch_radius": self.patch_radius,
            "train_radius": self.train_radius,
            "block_size": self.block_size,
            "seed": self.seed,
            "folds": [
                {"train": [list(c) for c in fold.train], "test": [list(c) for c in fold.test]}
                for fold in self.folds
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SplitSpec":
        try:
            folds = [
                SplitFold([tuple(c) for c in f["train"]], [tuple(c) for c in f["test"]])
                for f in data["folds"]
            ]
            train_radius = data.get("train_radius")
            return cls(
                folds=folds,
                patch_radius=int(data["patch_radius"]),
                block_size=int(data["block_size"]),
                width=int(data["width"]),
                height=int(data["height"]),
                seed=data.get("seed"),
                train_radius=None if train_radius is None else int(train_radius),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"划分文件格式错误: {e}") from e


@dataclass
class LeakageReport:
    violations: int
    first_pair: Optional[Tuple[int, Coord, Coord]]  # (fold, 训练中心, 测试中心)
    coverage_defects: int
    folds_checked: int

    @property
    def ok(self) -> bool:
        return self.violations == 0 and self.coverage_defects == 0

    def summary(self) -> str:
        lines = [
            f"folds checked: {self.folds_checked}",
            f"violations: {self.violations}",
            f"coverage defects: {self.coverage_defects}",
        ]
        if self.first_pair is not None:
            fold, train, test = self.first_pair
            lines.append(f"first violation: fold {fold}, train origin {train} overlaps test origin {test}")
        return "\n".join(lines)


# ---------------------------------------------------------------- file formats

def _write_header(path: Path, magic: str, entries: Dict[str, object]) -> None:
    lines = [magic] + [f"{k} = {v}" for k, v in entries.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_header(path: Path, magic: str) -> Dict[str, str]:
    lines = [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [line for line in lines if line and not line.startswith("#")]
    if not lines or lines[0] != magic:
        raise FormatError(f"{path}: 文件头应为 {magic}")
    entries = {}
    for line in lines[1:]:
        if "=" not in line:
            raise FormatError(f"{path}: 文件头行格式错误 {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        entries[key] = value
    return entries


def _header_int(entries: Dict[str, str], key: str, path: Path) -> int:
    try:
        value = int(entries[key])
    except (KeyError, ValueError) as e:
        raise FormatError(f"{path}: 缺少或无效的 '{key}'") from e
    if value < 1:
        raise FormatError(f"{path}: '{key}' 必须 >= 1，当前为 {value}")
    return value


def save_cube(cube: HsiCube, labels: LabelMap, cube_header: PathLike, labels_header: PathLike) -> None:
    """写出 HGCUBE1 / HGLAB1 头文件与载荷（载荷与头文件同目录，后缀为 ``.raw``）"""
    if cube.pad_radius:
        raise FormatError("只能保存未填充的数据立方体")
    if (labels.width, labels.height) != (cube.width, cube.height):
        raise FormatError(f"标签图 {labels.width}x{labels.height} 与数据立方体 {cube.width}x{cube.height} 不一致")
    cube_header, labels_header = Path(cube_header), Path(labels_header)
    cube_header.parent.mkdir(parents=True, exist_ok=True)
    labels_header.parent.mkdir(parents=True, exist_ok=True)

    cube_raw = cube_header.with_suffix(".raw")
    _write_header(cube_header, CUBE_MAGIC, {
        "width": cube.width, "height": cube.height, "bands": cube.bands,
        "dtype": "f32", "layout": "xyl", "byte_order": "little-endian", "data_file": cube_raw.name,
    })
    cube_raw.write_bytes(np.ascontiguousarray(cube.reflectance, dtype="<f4").tobytes())

    if labels.labels.min() < 0 or labels.labels.max() > np.iinfo(np.uint16).max:
        raise LabelError("标签必须能用 16 位无符号整数表示")
    labels_raw = labels_header.with_suffix(".raw")
    _write_header(labels_header, LABEL_MAGIC, {
        "width": labels.width, "height": labels.height,
        "dtype": "u16", "layout": "xy", "byte_order": "little-endian", "data_file": labels_raw.name,
    })
    labels_raw.write_bytes(np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())
    logger.info(f"已保存 {cube.width}x{cube.height}x{cube.bands} 数据立方体: {cube_header}")


def load_cube(cube_header: PathLike, labels_header: PathLike) -> Tuple[HsiCube, LabelMap]:
    cube_header, labels_header = Path(cube_header), Path(labels_header)
    entries = _read_header(cube_header, CUBE_MAGIC)
    w, h, b = (_header_int(entries, k, cube_header) for k in ("width", "height", "bands"))
    if entries.get("dtype", "f32") != "f32" or entries.get("byte_order", "little-endian") != "little-endian":
        raise FormatError(f"{cube_header}: 只支持小端 f32 载荷")
    payload = (cube_header.parent / entries.get("data_file", cube_header.with_suffix(".raw").name)).read_bytes()
    if len(payload) != w * h * b * 4:
        raise FormatError(f"{cube_header}: 载荷 {len(payload)} 字节，文件头声明 {w * h * b * 4} 字节")
    reflectance = np.frombuffer(payload, dtype="<f4").reshape(w, h, b).astype(DTYPE_TRAIN)

    entries = _read_header(labels_header, LABEL_MAGIC)
    lw, lh = (_header_int(entries, k, labels_header) for k in ("width", "height"))
    payload = (labels_header.parent / entries.get("data_file", labels_header.with_suffix(".raw").name)).read_bytes()
    if len(payload) != lw * lh * 2:
        raise FormatError(f"{labels_header}: 载荷 {len(payload)} 字节，文件头声明 {lw * lh * 2} 字节")
    if (lw, lh) != (w, h):
        raise FormatError(f"标签图 {lw}x{lh} 与数据立方体 {w}x{h} 不一致")
    labels = np.frombuffer(payload, dtype="<u2").reshape(lw, lh).astype(np.int64)
    return HsiCube(reflectance), LabelMap(labels)


def save_split(split: SplitSpec, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        yaml.safe_dump(split.to_dict(), f, sort_keys=False, default_flow_style=None)
    return path


def load_split(path: PathLike) -> SplitSpec:
    with Path(path).open("r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict) or data.get("format") != "HGSPLIT1":
        raise FormatError(f"{path}: 不是划分文件")
    return SplitSpec.from_dict(data)


# ---------------------------------------------------------------- patches

def mirror_pad(cube: HsiCube, r: int) -> HsiCube:
    # 两个空间轴做不重复边缘的镜像填充，光谱轴不变
    if cube.pad_radius:
        raise InvalidRangeError("数据立方体已经填充过")
    if r < 0 or r >= min(cube.width, cube.height):
        raise InvalidRangeError(f"填充半径 {r} 必须在 [0, {min(cube.width, cube.height)}) 内")
    if r == 0:
        return HsiCube(cube.reflectance.copy(), 0)
    padded = np.pad(cube.reflectance, ((r, r), (r, r), (0, 0)), mode="reflect")
    return HsiCube(padded, r)


def extract_patch(padded: HsiCube, x: int, y: int, s: int) -> np.ndarray:
    """以原始像元 (x, y) 为中心的 s×s×B 窗口"""
    if s < 1 or s % 2 == 0:
        raise InvalidRangeError(f"patch 边长必须为正奇数，当前为 {s}")
    half = (s - 1) // 2
    if half > padded.pad_radius:
        raise BoundsError(f"patch 边长 {s} 需要填充半径 >= {half}，当前为 {padded.pad_radius}")
    if not (0 <= x < padded.width and 0 <= y < padded.height):
        raise BoundsError(f"像元 ({x}, {y}) 超出 {padded.width}x{padded.height} 场景")
    cx, cy = x + padded.pad_radius, y + padded.pad_radius
    return padded.reflectance[cx - half:cx + half + 1, cy - half:cy + half + 1, :].copy()


def build_samples(padded: HsiCube, labels: LabelMap, coords: Sequence[Coord], patch_size: int) -> List[Sample]:
    return [
        Sample(extract_patch(padded, x, y, patch_size), int(labels.labels[x, y]), (x, y))
        for x, y in coords
    ]


# ---------------------------------------------------------------- normalization

def fit_normalization(cube: HsiCube, train_coords: Sequence[Coord]) -> NormalizationStats:
    # 逐波段最小值 / 最大值，只用训练像元
    if len(train_coords) == 0:
        raise InvalidRangeError("归一化至少需要一个训练像元")
    coords = np.asarray(train_coords, dtype=np.int64) + cube.pad_radius
    values = cube.reflectance[coords[:, 0], coords[:, 1], :]
    return NormalizationStats(values.min(axis=0), values.max(axis=0))


def apply_normalization(cube: HsiCube, stats: NormalizationStats) -> HsiCube:
    """按训练像元的范围把每个波段线性映射到 [0, 1]；常数波段映射为 0；不做截断"""
    span = (stats.maximum - stats.minimum).astype(np.float64)
    constant = span <= 0
    if np.any(constant):
        logger.warning(f"训练像元中有 {int(constant.sum())} 个常数波段，映射为 0")
    scale = np.where(constant, 0.0, 1.0 / np.where(constant, 1.0, span))
    out = (cube.reflectance - stats.minimum) * scale
    return HsiCube(out.astype(cube.reflectance.dtype), cube.pad_radius)


# ---------------------------------------------------------------- splits

def _block_majority(block: np.ndarray) -> int:
    counts = Counter(int(v) for v in block.ravel() if v > 0)
    if not counts:
        return 0
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def generate_patch_splits(
    labels: LabelMap,
    folds: int = 5,
    block_size: int = 16,
    patch_radius: int = 3,
    rng: Optional[SeededRng] = None,
    train_radius: Optional[int] = None,
) -> SplitSpec:
    """
    按块切分的 F 折划分，同一 fold 内训练样本读取的像元与测试 patch 互不重叠

    每个 g×g 块整体归入一个 fold。块按多数类分组，从最稀少的类开始轮流发给各 fold（类内随机），
    使每个 fold 尽量覆盖更多类别。与任一测试中心的切比雪夫距离不超过 ``train_radius + patch_radius``
    的训练中心被剔除。

    Args:
        labels: 标签栅格
        folds: 折数 F（>= 2）
        block_size: 块边长 g（>= 2r+1）
        patch_radius: 测试 patch 半径 r
        rng: 块分配用的随机流
        train_radius: 训练样本读取半径（缺省为 r；旋转增广需要源窗口半径）
    """
    if folds < 2:
        raise ConfigError(f"folds 必须 >= 2，当前为 {folds}")
    if block_size < 2 * patch_radius + 1:
        raise ConfigError(f"block_size {block_size} 必须 >= 2*patch_radius+1 = {2 * patch_radius + 1}")
    train_radius = patch_radius if train_radius is None else train_radius
    if train_radius < patch_radius:
        raise ConfigError(f"train_radius {train_radius} 不能小于 patch_radius {patch_radius}")
    rng = rng or SeededRng(0)
    lab = labels.labels
    w, h = lab.shape

    by_class: Dict[int, List[Tuple[int, int]]] = {}
    for bx in range(0, w, block_size):
        for by in range(0, h, block_size):
            majority = _block_majority(lab[bx:bx + block_size, by:by + block_size])
            if majority:
                by_class.setdefault(majority, []).append((bx, by))
    n_blocks = sum(len(v) for v in by_class.values())
    if n_blocks < folds:
        raise InfeasibleSplitError(
            f"场景 {w}x{h} 在块大小 {block_size} 下只有 {n_blocks} 个含标注的块，少于 {folds} 折"
        )

    fold_of_block: Dict[Tuple[int, int], int] = {}
    cursor = 0
    for cls in sorted(by_class, key=lambda c: (len(by_class[c]), c)):
        blocks = by_class[cls]
        for i in rng.shuffle(len(blocks)):
            fold_of_block[blocks[int(i)]] = cursor % folds
            cursor += 1

    fold_map = np.full((w, h), -1, dtype=np.int64)
    for (bx, by), f in fold_of_block.items():
        fold_map[bx:bx + block_size, by:by + block_size] = f
    labeled = lab > 0
    reach = train_radius + patch_radius
    structure = np.ones((2 * reach + 1, 2 * reach + 1), dtype=bool)

    split_folds = []
    for f in range(folds):
        test_mask = labeled & (fold_map == f)
        buffer = ndimage.binary_dilation(test_mask, structure=structure)
        train_mask = labeled & ~buffer
        split_folds.append(SplitFold(_mask_coords(train_mask), _mask_coords(test_mask)))
        logger.debug(f"fold {f}: {int(train_mask.sum())} 个训练中心 / {int(test_mask.sum())} 个测试中心")

    return SplitSpec(split_folds, patch_radius, block_size, w, h, rng.seed, train_radius)


def _mask_coords(mask: np.ndarray) -> List[Coord]:
    xs, ys = np.nonzero(mask)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def verify_no_leakage(split: SplitSpec, labels: LabelMap, train_radius: Optional[int] = None) -> LeakageReport:
    """
    逐对检查：同一 fold 内，训练样本读取窗口（半径 ``train_radius``）与测试 patch（半径 r）不共享像元

    窗口按场景边界裁剪；镜像填充出的像元都是裁剪框内像元的拷贝，裁剪不会漏检。
    ``train_radius`` 缺省取划分自身记录的值，可传入更大的值按实际读取半径复查。
    """
    r = split.patch_radius
    t = split.train_radius if train_radius is None else train_radius
    w, h = labels.width, labels.height
    violations = 0
    first_pair = None
    test_count = np.zeros((w, h), dtype=np.int64)

    for f, fold in enumerate(split.folds):
        covered = np.zeros((w, h), dtype=bool)
        for x, y in fold.test:
            covered[max(0, x - r):x + r + 1, max(0, y - r):y + r + 1] = True
            test_count[x, y] += 1
        for tx, ty in fold.train:
            if covered[max(0, tx - t):tx + t + 1, max(0, ty - t):ty + t + 1].any():
                violations += 1
                if first_pair is None:
                    partner = next(
                        (c for c in fold.test if max(abs(c[0] - tx), abs(c[1] - ty)) <= t + r), None
                    )
                    first_pair = (f, (tx, ty), partner)

    labeled = labels.labels > 0
    coverage_defects = int(np.sum(labeled & (test_count != 1)) + np.sum(~labeled & (test_count > 0)))
    report = LeakageReport(violations, first_pair, coverage_defects, len(split.folds))
    if not report.ok:
        logger.warning(f"泄漏检查未通过: {violations} 处重叠, {coverage_defects} 处覆盖缺陷")
    return report


# ---------------------------------------------------------------- synthetic scenes

def spectral_prototypes(rng: SeededRng, bands: int, num_classes: int, min_separation: float = 0.1) -> np.ndarray:
    """Θ 条平滑光谱，每条是基线加上沿波段轴的三个高斯峰"""
    grid = np.arange(bands, dtype=np.float64)
    best, best_sep = None, -1.0
    for _ in range(100):
        protos = np.empty((num_classes, bands))
        for c in range(num_classes):
            spectrum = np.full(bands, rng.uniform(0.05, 0.2))
            for _ in range(3):
                center = rng.uniform(0.0, bands)
                width = rng.uniform(bands / 10.0, bands / 4.0) + 1.0
                spectrum += rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((grid - center) / width) ** 2)
            protos[c] = spectrum
        diffs = protos[:, None, :] - protos[None, :, :]
        rms = np.sqrt(np.mean(diffs ** 2, axis=2))
        sep = rms[np.triu_indices(num_classes, k=1)].min()
        if sep > best_sep:
            best, best_sep = protos, sep
        if sep >= min_separation:
            break
    else:
        logger.warning(f"抽取 100 次后原型光谱间距仍为 {best_sep:.3f}，低于 {min_separation:.3f}")
    return best


def synth_scene(
    rng: SeededRng, width: int, height: int, bands: int, num_classes: int, noise: float = 0.05
) -> Tuple[HsiCube, LabelMap]:
    """
    合成场景：Voronoi 类别区域，每类一个原型光谱，再加高斯噪声

    前 Θ 个 Voronoi 种子依次取类别 1..Θ，保证每类都出现；每个轴方向切一条背景条带（标签 0），
    条带不经过种子像元。
    """
    if num_classes < 2:
        raise ConfigError(f"num_classes 必须 >= 2，当前为 {num_classes}")
    if width < 1 or height < 1 or bands < 1:
        raise ConfigError(f"场景尺寸必须为正，当前为 {width}x{height}x{bands}")
    if width * height < 10 * num_classes:
        raise ConfigError(f"{width}x{height} 的场景放不下 {num_classes} 个类别")
    if noise < 0:
        raise ConfigError(f"noise 必须 >= 0，当前为 {noise}")

    protos = spectral_prototypes(rng.fork(1), bands, num_classes)
    layout_rng = rng.fork(2)

    n_seeds = max(num_classes, (width * height) // 64)
    flat = layout_rng.shuffle(width * height)[:n_seeds]
    seeds = np.stack([flat // height, flat % height], axis=1)
    seed_class = np.concatenate([
        np.arange(1, num_classes + 1),
        layout_rng.integers(1, num_classes + 1, size=n_seeds - num_classes),
    ])
    xs, ys = np.meshgrid(np.arange(width), np.arange(height), indexing="ij")
    d2 = (xs[..., None] - seeds[:, 0]) ** 2 + (ys[..., None] - seeds[:, 1]) ** 2
    labels = seed_class[np.argmin(d2, axis=2)].astype(np.int64)

    seed_mask = np.zeros((width, height), dtype=bool)
    seed_mask[seeds[:, 0], seeds[:, 1]] = True
    if height >= 4:
        strip = np.zeros_like(seed_mask)
        strip[:, int(layout_rng.integers(0, height))] = True
        labels[strip & ~seed_mask] = 0
    if width >= 4:
        strip = np.zeros_like(seed_mask)
        strip[int(layout_rng.integers(0, width)), :] = True
        labels[strip & ~seed_mask] = 0

    background = protos.mean(axis=0) * 0.5
    spectra = np.vstack([background[None], protos])
    reflectance = spectra[labels]
    if noise > 0:
        reflectance = reflectance + rng.fork(3).normal(0.0, noise, size=reflectance.shape)
    logger.info(f"已合成 {width}x{height}x{bands} 场景，{num_classes} 个类别")
    return HsiCube(reflectance.astype(DTYPE_TRAIN)), LabelMap(labels)
