"""训练循环与早停、预测、混淆矩阵与精度指标、结果文件"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from .dataset import Sample
from .errors import ConfigError, InvalidRangeError, LabelError
from .network import AdamState, ModelParams, NetworkConfig, adam_step, forward, loss_and_gradients
from .tensor_core import DTYPE_TRAIN, SeededRng

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 200
    patience: int = 15
    batch_size: int = 64
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    min_delta: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs 必须 >= 1，当前为 {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience 必须在 [1, max_epochs={self.max_epochs}] 内，当前为 {self.patience}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size 必须 >= 1，当前为 {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate 必须 >= 0，当前为 {self.learning_rate}")


class EarlyStopping:
    """
    连续 ``patience`` 个 epoch 的损失都没有比最好值低 ``min_delta`` 以上时停止

    patience 与 epoch 上限落在同一个 epoch 时，停止原因记为 ``patience``。
    """

    def __init__(self, patience: int, max_epochs: int, min_delta: float = 1e-6):
        self.patience = patience
        self.max_epochs = max_epochs
        self.min_delta = min_delta
        self.best = math.inf
        self.wait = 0
        self.epoch = 0
        self.reason: Optional[str] = None

    def update(self, loss: float) -> bool:
        self.epoch += 1
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
        if self.wait >= self.patience:
            self.reason = "patience"
        elif self.epoch >= self.max_epochs:
            self.reason = "max_epochs"
        return self.reason is not None


def stopping_epoch(
    trace: Sequence[float], patience: int = 15, max_epochs: int = 200, min_delta: float = 1e-6
) -> Tuple[int, Optional[str]]:
    """在损失序列 ``trace`` 上按早停规则停止的 epoch（从 1 计）；始终不停止时返回 (len(trace), None)"""
    rule = EarlyStopping(patience, max_epochs, min_delta)
    for loss in trace:
        if rule.update(float(loss)):
            return rule.epoch, rule.reason
    return len(trace), None


@dataclass
class TrainResult:
    params: ModelParams
    epochs_run: int
    loss_trace: List[float]
    training_time_s: float
    stop_reason: str


def _stack(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    patches = np.stack([s.patch for s in samples]).astype(DTYPE_TRAIN, copy=False)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return patches, labels


def train(
    cfg: NetworkConfig,
    params: ModelParams,
    samples: Sequence[Sample],
    tc: TrainConfig,
    rng: Optional[SeededRng] = None,
    progress: bool = False,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """洗牌后的小批次 Adam 训练，保留最后一个 epoch 的参数"""
    if not samples:
        raise InvalidRangeError("训练集为空，无法训练")
    rng = rng or SeededRng(tc.seed)
    patches, labels = _stack(samples)
    if labels.min() < 1 or labels.max() > cfg.num_classes:
        raise LabelError(f"训练标签必须在 1..{cfg.num_classes} 内")
    labels0 = labels - 1
    params = params.copy()
    state = AdamState.for_params(params, lr=tc.learning_rate, beta1=tc.beta1, beta2=tc.beta2, eps=tc.epsilon)
    rule = EarlyStopping(tc.patience, tc.max_epochs, tc.min_delta)
    trace: List[float] = []
    n = len(samples)

    start = time.perf_counter()
    bar = tqdm(total=tc.max_epochs, desc="epochs", unit="ep", disable=not progress, leave=False)
    while True:
        order = rng.shuffle(n)
        total = 0.0
        for lo in range(0, n, tc.batch_size):
            idx = order[lo:lo + tc.batch_size]
            loss, grads = loss_and_gradients(params, cfg, patches[idx], labels0[idx])
            adam_step(params, grads, state)
            total += loss * len(idx)
        epoch_loss = total / n
        trace.append(epoch_loss)
        logger.debug(f"epoch {len(trace)} 损失 {epoch_loss:.6f}")
        if on_epoch is not None:
            on_epoch(len(trace), epoch_loss)
        bar.update(1)
        bar.set_postfix(loss=f"{epoch_loss:.4f}")
        if rule.update(epoch_loss):
            break
    bar.close()
    elapsed = time.perf_counter() - start
    logger.info(f"训练在第 {rule.epoch} 个 epoch 停止（{rule.reason}），最终损失 {trace[-1]:.6f}，用时 {elapsed:.2f}s")
    return TrainResult(params, rule.epoch, trace, elapsed, rule.reason)


def predict(
    params: ModelParams, cfg: NetworkConfig, samples: Sequence[Sample], batch_size: int = 256
) -> Tuple[np.ndarray, float]:
    """返回从 1 计的 argmax 标签（并列取最小类别）与每个样本的平均推理耗时（毫秒）"""
    if not samples:
        return np.zeros(0, dtype=np.int64), 0.0
    patches, _ = _stack(samples)
    preds = np.empty(len(samples), dtype=np.int64)
    start = time.perf_counter()
    for lo in range(0, len(samples), batch_size):
        scores = forward(params, cfg, patches[lo:lo + batch_size])
        preds[lo:lo + batch_size] = np.argmax(scores, axis=1) + 1
    elapsed = time.perf_counter() - start
    return preds, elapsed * 1000.0 / len(samples)


def confusion(true_labels, predicted_labels, num_classes: int) -> np.ndarray:
    # Θ×Θ 计数：行为真实类别，列为预测类别（均从 1 计）
    t = np.asarray(true_labels, dtype=np.int64).ravel()
    p = np.asarray(predicted_labels, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise InvalidRangeError(f"真实标签 {t.size} 个，预测 {p.size} 个，数量不一致")
    for name, arr in (("真实", t), ("预测", p)):
        if arr.size and (arr.min() < 1 or arr.max() > num_classes):
            raise LabelError(f"{name} 标签必须在 1..{num_classes} 内")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


@dataclass
class ClassificationMetrics:
    oa: float
    aa: float
    per_class: np.ndarray  # 测试集中没有的类别为 NaN
    kappa: float
    p_o: float
    p_e: float


def metrics(cm: np.ndarray) -> ClassificationMetrics:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if cm.size == 0 or total <= 0:
        raise InvalidRangeError("混淆矩阵至少要有一个样本才能计算指标")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    diag = np.diag(cm)
    oa = float(diag.sum()) / total
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(rows > 0, diag / np.where(rows > 0, rows, 1), np.nan)
    aa = float(np.nanmean(per_class))
    chance = int(np.dot(rows, cols))
    p_e = chance / total ** 2
    if chance == total ** 2:
        logger.warning("混淆矩阵退化（p_e = 1）")
        kappa = 1.0 if diag.sum() == total else 0.0
    else:
        kappa = 1.0 - (1.0 - oa) / (1.0 - p_e)
    return ClassificationMetrics(oa, aa, per_class, kappa, oa, p_e)


@dataclass
class MetricsReport:
    method: str
    dataset: str
    fold: int
    run: int
    oa: float
    aa: float
    kappa: float
    p_o: float
    p_e: float
    per_class: List[float]
    epochs: int = 0
    train_oa: float = float("nan")
    training_time_s: float = 0.0
    inference_ms: float = 0.0
    stop_reason: str = ""
    confusion: Optional[np.ndarray] = field(default=None, repr=False)

    TIMING_COLUMNS = ("training_time_s", "inference_ms")

    @classmethod
    def from_confusion(cls, cm: np.ndarray, method: str, dataset: str, fold: int, run: int, **extra) -> "MetricsReport":
        m = metrics(cm)
        return cls(
            method=method, dataset=dataset, fold=fold, run=run,
            oa=m.oa, aa=m.aa, kappa=m.kappa, p_o=m.p_o, p_e=m.p_e,
            per_class=[float(v) for v in m.per_class], confusion=cm, **extra,
        )

    def to_row(self) -> Dict[str, object]:
        row = {k: v for k, v in asdict(self).items() if k not in ("per_class", "confusion")}
        for i, acc in enumerate(self.per_class, start=1):
            row[f"class_{i}"] = acc
        return row


RESULT_COLUMNS = [
    "method", "dataset", "fold", "run", "oa", "aa", "kappa", "p_o", "p_e",
    "epochs", "train_oa", "training_time_s", "inference_ms", "stop_reason",
]


def reports_to_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    frame = pd.DataFrame([r.to_row() for r in reports])
    if frame.empty:
        return pd.DataFrame(columns=RESULT_COLUMNS)
    class_cols = sorted((c for c in frame.columns if c.startswith("class_")), key=lambda c: int(c.split("_")[1]))
    return frame[RESULT_COLUMNS + class_cols].sort_values(["fold", "run"]).reset_index(drop=True)


def write_results_csv(reports: Sequence[MetricsReport], path: Union[str, Path], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = reports_to_frame(reports)
    header = not (append and path.exists())
    frame.to_csv(path, mode="a" if append else "w", header=header, index=False, float_format="%.10g")
    return path


def load_results_csv(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path)
    missing = [c for c in ("method", "dataset", "fold", "run", "kappa") if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path}: 结果文件缺少列 {missing}")
    return frame


def summarize(results: Union[pd.DataFrame, Sequence[MetricsReport]]) -> pd.DataFrame:
    """每个数值结果列的均值与（总体）标准差"""
    frame = results if isinstance(results, pd.DataFrame) else reports_to_frame(results)
    numeric = frame.drop(columns=["fold", "run"], errors="ignore").select_dtypes("number")
    out = pd.DataFrame({"mean": numeric.mean(), "std": numeric.std(ddof=0)})
    out.index.name = "metric"
    return out


def format_summary(results: Union[pd.DataFrame, Sequence[MetricsReport]]) -> str:
    frame = results if isinstance(results, pd.DataFrame) else reports_to_frame(results)
    table = summarize(frame)
    headline = table.loc[[m for m in ("oa", "aa", "kappa") if m in table.index]]
    lines = [
        f"reports: {len(frame)}",
        "",
        "\n".join(f"{m.upper()}: {row['mean']:.4f} ± {row['std']:.4f}" for m, row in headline.iterrows()),
        "",
        table.to_markdown(floatfmt=".4f"),
    ]
    return "\n".join(lines) + "\n"
