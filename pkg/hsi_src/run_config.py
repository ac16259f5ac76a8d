"""
运行配置：扁平 YAML 文档 -> RunConfig

所有键都有缺省值，空文档即得到默认超参数（7×7 patch、24 个卷积核、[512, 256, 128]、
lr 1e-4、batch 64、patience 15、最多 200 个 epoch）。未知键直接拒绝。
相对路径相对于配置文件所在目录解析。
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from .errors import ConfigError
from .evaluation import TrainConfig
from .network import NetworkConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "HYPERGRID_THREADS"

_PATH_KEYS = ("cube", "labels", "split", "out_dir")


@dataclass
class RunConfig:
    dataset_name: str = "synthetic"
    method: str = ""
    cube: Optional[str] = None
    labels: Optional[str] = None
    split: Optional[str] = None
    augmentation: str = "none"
    # 划分参数（split 为空时在运行中生成）
    folds: int = 5
    block_size: int = 16
    # 网络
    patch_size: int = 7
    num_conv_layers: int = 3
    kernels_per_layer: int = 24
    kernel_extent: int = 3
    dense_widths: List[int] = field(default_factory=lambda: [512, 256, 128])
    per_channel_kernels: bool = False
    # 训练
    max_epochs: int = 200
    patience: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    min_delta: float = 1e-6
    # 协议
    runs: int = 5
    base_seed: int = 0
    out_dir: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size 必须为正奇数，当前为 {self.patch_size}")
        if self.folds < 2:
            raise ConfigError(f"folds 必须 >= 2，当前为 {self.folds}")
        if self.runs < 1:
            raise ConfigError(f"runs 必须 >= 1，当前为 {self.runs}")
        if self.block_size < self.patch_size:
            raise ConfigError(f"block_size {self.block_size} 必须 >= patch_size {self.patch_size}")
        if not self.dense_widths or any(int(w) < 1 for w in self.dense_widths):
            raise ConfigError(f"dense_widths 必须是非空的正整数列表，当前为 {self.dense_widths}")
        # 复用 TrainConfig 与增广注册表的校验
        self.train_config()
        from hsi_augment.pipeline import normalize_kind

        normalize_kind(self.augmentation)

    @property
    def method_name(self) -> str:
        return self.method or f"ours-{self.augmentation}"

    @property
    def patch_radius(self) -> int:
        return (self.patch_size - 1) // 2

    def network_config(self, bands: int, num_classes: int) -> NetworkConfig:
        return NetworkConfig(
            bands=bands,
            num_classes=num_classes,
            patch_width=self.patch_size,
            patch_height=self.patch_size,
            num_conv_layers=self.num_conv_layers,
            kernels_per_layer=self.kernels_per_layer,
            kernel_extent=self.kernel_extent,
            dense_widths=tuple(self.dense_widths),
            per_channel_kernels=self.per_channel_kernels,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            max_epochs=self.max_epochs,
            patience=self.patience,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            min_delta=self.min_delta,
            seed=self.base_seed,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _coerce(name: str, expected: str, value: Any) -> Any:
    # 推迟求值下注解是字符串
    if value is None:
        return None
    if expected == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"配置项 {name} 需要整数, 得到 {value!r}")
        return value
    if expected == "float":
        # PyYAML 把 1e-4 这种没有小数点的写法读成字符串
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"配置项 {name} 需要数值, 得到 {value!r}")
        return float(value)
    if expected == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"配置项 {name} 需要 true/false, 得到 {value!r}")
        return value
    if expected.startswith("List"):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"配置项 {name} 需要整数列表, 得到 {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"配置项 {name} 需要字符串, 得到 {value!r}")
    return value


def build_run_config(raw: Optional[Dict[str, Any]], base_dir: Optional[Union[str, Path]] = None) -> RunConfig:
    """校验扁平映射并构造 RunConfig。"""
    raw = dict(raw or {})
    known = {f.name: str(f.type) for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"不支持的配置项: {', '.join(unknown)}. 支持的有: {', '.join(known)}")
    values = {}
    for key, value in raw.items():
        values[key] = _coerce(key, known[key], value)
        if key in _PATH_KEYS and values[key] and base_dir is not None and not os.path.isabs(values[key]):
            values[key] = str(Path(base_dir) / values[key])
    try:
        return RunConfig(**values)
    except TypeError as e:
        raise ConfigError(f"无效的配置: {e}") from e


def load_run_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """读取 YAML 配置；overrides 中非 None 的值覆盖文件内容。"""
    path = Path(path)
    with path.open("r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: YAML 解析失败: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: 配置文件必须是扁平的 key: value 映射")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = build_run_config(raw, base_dir=path.parent)
    logger.info(f"加载配置: {path}")
    return cfg


def worker_count() -> int:
    """HYPERGRID_THREADS 限制并行 (fold, run) 单元数，缺省为 1。"""
    value = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(value)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} 必须为整数，当前为 {value!r}") from e
    return max(1, count)
