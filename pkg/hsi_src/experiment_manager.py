from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
import logging

import numpy as np
import pandas as pd
from tqdm import tqdm

from hsi_augment import AugmentationKind, augment_training_set, compute_budget, normalize_kind, source_window_size
from hsi_augment.pipeline import class_counts

from .dataset import (
    HsiCube,
    LabelMap,
    Sample,
    SplitFold,
    SplitSpec,
    apply_normalization,
    build_samples,
    fit_normalization,
    generate_patch_splits,
    load_cube,
    load_split,
    mirror_pad,
    verify_no_leakage,
)
from .errors import BoundsError, ConfigError, InfeasibleSplitError, InvalidRangeError
from .evaluation import MetricsReport, confusion, predict, reports_to_frame, summarize, train
from .network import ModelParams, NetworkConfig, init_params
from .run_config import RunConfig, worker_count
from .tensor_core import SeededRng, derive_seed

logger = logging.getLogger(__name__)

# 每个 (fold, run) 单元内的独立随机流编号
STREAM_SHUFFLE = 1
STREAM_AUGMENT = 2
STREAM_THIN = 3


@dataclass
class FoldData:
    """一个 fold 的训练/测试样本，归一化统计量只来自该 fold 的训练像素"""

    fold: int
    padded: HsiCube
    train_samples: List[Sample]
    test_samples: List[Sample]


@dataclass
class CellOutcome:
    report: MetricsReport
    params: ModelParams
    network_config: NetworkConfig
    loss_trace: List[float]


@dataclass
class ExperimentResult:
    method: str
    dataset: str
    reports: List[MetricsReport] = field(default_factory=list)

    def is_complete(self, folds: int, runs: int) -> bool:
        return {(r.fold, r.run) for r in self.reports} == {(f, r) for f in range(folds) for r in range(runs)}

    def to_frame(self):
        return reports_to_frame(self.reports)

    def summary(self):
        return summarize(self.reports)


def cell_seed(base_seed: int, fold: int, run: int, *stream: int) -> int:
    """h(base, fold, run[, stream])：参数初始化用 h(base, f, r)，其余随机流追加编号。"""
    return derive_seed(base_seed, fold, run, *stream)


def padding_radius(patch_size: int) -> int:
    # 所有增广方式共用同一填充半径，保证归一化与样本完全一致
    return max((patch_size - 1) // 2, (source_window_size(patch_size) - 1) // 2)


def prepare_fold(
    cube: HsiCube, labels: LabelMap, split: SplitSpec, fold: int, patch_size: int
) -> FoldData:
    if not 0 <= fold < len(split.folds):
        raise ConfigError(f"fold {fold} 超出范围，划分只有 {len(split.folds)} 个 fold")
    entry = split.folds[fold]
    if not entry.train:
        raise InfeasibleSplitError(f"fold {fold} 剔除缓冲区后没有训练像元")
    if not entry.test:
        raise InfeasibleSplitError(f"fold {fold} 没有测试像元")
    stats = fit_normalization(cube, entry.train)
    radius = padding_radius(patch_size)
    if radius >= min(cube.width, cube.height):
        raise BoundsError(f"场景 {cube.width}x{cube.height} 对填充半径 {radius} 来说太小")
    padded = mirror_pad(apply_normalization(cube, stats), radius)
    train_samples = build_samples(padded, labels, entry.train, patch_size)
    test_samples = build_samples(padded, labels, entry.test, patch_size)

    absent = sorted(set(range(1, labels.num_classes + 1)) - {s.label for s in train_samples})
    if absent:
        logger.warning(f"fold {fold}: 类别 {absent} 在训练集中缺失，仍计入测试指标")
    return FoldData(fold, padded, train_samples, test_samples)


def run_cell(
    cube: HsiCube,
    labels: LabelMap,
    split: SplitSpec,
    fold: int,
    run: int,
    run_config: RunConfig,
    progress: bool = False,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> CellOutcome:
    """
    执行一个 (fold, run) 单元：归一化 -> 取样 -> 预算 -> 增广 -> 初始化 -> 训练 -> 预测 -> 指标

    Args:
        cube: 原始（未填充）场景
        labels: 标签栅格
        split: 交叉验证划分
        fold / run: 单元编号（0 起）
        run_config: 运行配置

    Returns:
        CellOutcome（含 MetricsReport 与训练好的参数）
    """
    kind = normalize_kind(run_config.augmentation)
    data = prepare_fold(cube, labels, split, fold, run_config.patch_size)
    net_cfg = run_config.network_config(cube.bands, labels.num_classes)
    tc = run_config.train_config()

    training_set = data.train_samples
    if kind is not AugmentationKind.NONE:
        budget = compute_budget(class_counts(training_set))
        training_set = augment_training_set(
            training_set, kind, SeededRng(cell_seed(run_config.base_seed, fold, run, STREAM_AUGMENT)),
            budget=budget, padded=data.padded,
        )

    params = init_params(net_cfg, SeededRng(cell_seed(run_config.base_seed, fold, run)))
    result = train(
        net_cfg, params, training_set, tc,
        rng=SeededRng(cell_seed(run_config.base_seed, fold, run, STREAM_SHUFFLE)),
        progress=progress, on_epoch=on_epoch,
    )

    test_pred, inference_ms = predict(result.params, net_cfg, data.test_samples)
    train_pred, _ = predict(result.params, net_cfg, data.train_samples)
    train_oa = float(np.mean(train_pred == np.array([s.label for s in data.train_samples])))
    cm = confusion([s.label for s in data.test_samples], test_pred, net_cfg.num_classes)
    report = MetricsReport.from_confusion(
        cm, run_config.method_name, run_config.dataset_name, fold, run,
        epochs=result.epochs_run, train_oa=train_oa, training_time_s=result.training_time_s,
        inference_ms=inference_ms, stop_reason=result.stop_reason,
    )
    logger.info(
        f"fold {fold} run {run}: OA={report.oa:.4f} AA={report.aa:.4f} kappa={report.kappa:.4f} "
        f"train OA={train_oa:.4f} epochs={result.epochs_run}"
    )
    return CellOutcome(report, result.params, net_cfg, result.loss_trace)


def _run_cell_job(args: Tuple) -> MetricsReport:
    cube, labels, split, fold, run, run_config = args
    return run_cell(cube, labels, split, fold, run, run_config).report


def run_experiment(
    cube: HsiCube,
    labels: LabelMap,
    split: SplitSpec,
    run_config: RunConfig,
    runs: Optional[int] = None,
    folds: Optional[Sequence[int]] = None,
    threads: Optional[int] = None,
    callbacks: Optional[Dict[str, Callable[..., Any]]] = None,
) -> ExperimentResult:
    """
    完整协议：每个 fold × 每次 run 执行一个单元，结果按 (fold, run) 合并

    callbacks 可包含:
        on_cell_start(fold, run)
        on_cell_complete(report)
    """
    runs = run_config.runs if runs is None else runs
    fold_ids = list(range(len(split.folds))) if folds is None else list(folds)
    cells = [(f, r) for f in fold_ids for r in range(runs)]
    threads = worker_count() if threads is None else max(1, threads)
    callbacks = callbacks or {}
    logger.info(f"实验开始: {run_config.method_name} / {run_config.dataset_name}, {len(cells)} 个单元, {threads} 个进程")

    reports: List[MetricsReport] = []
    if threads > 1 and len(cells) > 1:
        jobs = [(cube, labels, split, f, r, run_config) for f, r in cells]
        with Pool(processes=min(threads, len(cells))) as pool:
            for report in tqdm(pool.imap_unordered(_run_cell_job, jobs), total=len(jobs), desc="cells"):
                reports.append(report)
                if "on_cell_complete" in callbacks:
                    callbacks["on_cell_complete"](report)
    else:
        for f, r in tqdm(cells, desc="cells"):
            if "on_cell_start" in callbacks:
                callbacks["on_cell_start"](f, r)
            report = run_cell(cube, labels, split, f, r, run_config).report
            reports.append(report)
            if "on_cell_complete" in callbacks:
                callbacks["on_cell_complete"](report)

    reports.sort(key=lambda rep: (rep.fold, rep.run))
    return ExperimentResult(run_config.method_name, run_config.dataset_name, reports)


def thin_training_set(
    train: Sequence[Tuple[int, int]], labels: LabelMap, per_class: int, rng: SeededRng
) -> List[Tuple[int, int]]:
    """每类随机保留至多 per_class 个训练像元，保持原有顺序"""
    if per_class < 1:
        raise InvalidRangeError(f"per_class 必须 >= 1，当前为 {per_class}")
    by_class: Dict[int, List[int]] = {}
    for i, (x, y) in enumerate(train):
        by_class.setdefault(int(labels.labels[x, y]), []).append(i)
    keep = set()
    for c in sorted(by_class):
        idx = by_class[c]
        order = rng.shuffle(len(idx))
        keep.update(idx[int(k)] for k in order[:per_class])
    return [tuple(train[i]) for i in sorted(keep)]


@dataclass
class EffectReport:
    """增广效果：同一组稀疏训练集上，各增广方式的配对结果（seed × kind 每格一行）"""

    fold: int
    per_class: int
    frame: pd.DataFrame

    def mean_oa(self) -> pd.Series:
        return self.frame.groupby("kind", sort=False)["oa"].mean()

    def delta(self, kind: str = "rotate", baseline: str = "none") -> float:
        pivot = self.frame.pivot(index="seed", columns="kind", values="oa")
        return float((pivot[kind] - pivot[baseline]).mean())

    def summary(self, kind: str = "rotate", baseline: str = "none") -> str:
        lines = [f"fold {self.fold}, 每类至多 {self.per_class} 个训练像元, {self.frame['seed'].nunique()} 个种子", ""]
        lines.append(self.frame.to_markdown(index=False, floatfmt=".4f"))
        lines.append("")
        for k, oa in self.mean_oa().items():
            lines.append(f"{k}: mean OA {oa:.4f}")
        lines.append(f"delta OA ({kind} - {baseline}): {self.delta(kind, baseline):+.4f}")
        return "\n".join(lines) + "\n"


def augmentation_effect(
    cube: HsiCube,
    labels: LabelMap,
    split: SplitSpec,
    run_config: RunConfig,
    fold: int = 0,
    seeds: int = 5,
    per_class: int = 10,
    kinds: Sequence[str] = ("none", "rotate"),
) -> EffectReport:
    """
    稀疏训练集上的增广效果：每个种子先把该 fold 的训练集削减到每类至多 per_class 个，
    再对每种增广方式各训练一次（同一种子下初始化与削减结果相同），只报告 OA 差，不做判定

    Args:
        fold: 使用的 fold
        seeds: 种子个数，第 s 个种子对应 run 编号 s
        per_class: 每类保留的训练像元上限
        kinds: 参与比较的增广方式，第一个作为基线
    """
    if not 0 <= fold < len(split.folds):
        raise ConfigError(f"fold {fold} 超出范围，划分只有 {len(split.folds)} 个 fold")
    if seeds < 1:
        raise ConfigError(f"seeds 必须 >= 1，当前为 {seeds}")
    kinds = [normalize_kind(k).value for k in kinds]
    if len(set(kinds)) != len(kinds):
        raise ConfigError(f"增广方式重复: {kinds}")
    entry = split.folds[fold]

    rows = []
    for s in tqdm(range(seeds), desc="effect"):
        thinned = thin_training_set(
            entry.train, labels, per_class, SeededRng(cell_seed(run_config.base_seed, fold, s, STREAM_THIN))
        )
        folds = list(split.folds)
        folds[fold] = SplitFold(thinned, list(entry.test))
        sparse = replace(split, folds=folds)
        for kind in kinds:
            cfg = replace(run_config, augmentation=kind, method="")
            report = run_cell(cube, labels, sparse, fold, s, cfg).report
            rows.append({
                "seed": s, "kind": kind, "train_size": len(thinned),
                "oa": report.oa, "aa": report.aa, "kappa": report.kappa,
            })
    result = EffectReport(fold, per_class, pd.DataFrame(rows))
    if len(kinds) > 1:
        logger.info(f"增广效果: {kinds[1]} 相对 {kinds[0]} 的平均 OA 差 {result.delta(kinds[1], kinds[0]):+.4f}")
    return result


class ExperimentManager:
    """
    实验管理器：加载场景与划分，统一驱动单个单元或完整的 fold × run 协议
    """

    def __init__(self, run_config: RunConfig):
        self.config = run_config
        self.cube: Optional[HsiCube] = None
        self.labels: Optional[LabelMap] = None
        self.split: Optional[SplitSpec] = None

    def load_scene(self) -> Tuple[HsiCube, LabelMap]:
        if not self.config.cube or not self.config.labels:
            raise ConfigError("配置缺少 cube 或 labels 路径")
        self.cube, self.labels = load_cube(self.config.cube, self.config.labels)
        logger.info(f"场景: {self.cube.width}x{self.cube.height}x{self.cube.bands}, {self.labels.num_classes} 个类别")
        return self.cube, self.labels

    def load_or_generate_split(self) -> SplitSpec:
        """
        读取配置中的划分文件，或按 folds / block_size / base_seed 现场生成

        训练读取半径统一取 ``padding_radius(patch_size)``，与增广方式无关，所以各方式共用同一划分；
        读入的划分文件会按该半径复查，有重叠即拒绝。
        """
        if self.labels is None:
            self.load_scene()
        read_radius = padding_radius(self.config.patch_size)
        if self.config.split:
            self.split = load_split(self.config.split)
            if (self.split.width, self.split.height) != (self.labels.width, self.labels.height):
                raise ConfigError(
                    f"划分尺寸 {self.split.width}x{self.split.height} 与场景 {self.labels.width}x{self.labels.height} 不一致"
                )
            if self.split.patch_radius != self.config.patch_radius:
                raise ConfigError(
                    f"划分的 patch_radius={self.split.patch_radius} 与配置的 patch_size={self.config.patch_size} 不符"
                )
            report = verify_no_leakage(self.split, self.labels, train_radius=read_radius)
            if report.violations:
                raise ConfigError(
                    f"划分文件在训练读取半径 {read_radius} 下有 {report.violations} 处训练/测试重叠，"
                    f"请用 split --train-radius {read_radius} 重新生成"
                )
        else:
            self.split = generate_patch_splits(
                self.labels, self.config.folds, self.config.block_size, self.config.patch_radius,
                SeededRng(self.config.base_seed), train_radius=read_radius,
            )
        return self.split

    def setup(self) -> "ExperimentManager":
        self.load_scene()
        self.load_or_generate_split()
        return self

    def run_cell(self, fold: int, run: int, progress: bool = False) -> CellOutcome:
        if self.split is None:
            self.setup()
        if not 0 <= run < self.config.runs:
            raise ConfigError(f"run {run} 超出范围 [0, {self.config.runs})")
        return run_cell(self.cube, self.labels, self.split, fold, run, self.config, progress=progress)

    def run_experiment(
        self, runs: Optional[int] = None, callbacks: Optional[Dict[str, Callable[..., Any]]] = None
    ) -> ExperimentResult:
        if self.split is None:
            self.setup()
        return run_experiment(self.cube, self.labels, self.split, self.config, runs=runs, callbacks=callbacks)

    def augmentation_effect(
        self, fold: int = 0, seeds: int = 5, per_class: int = 10, kind: str = "rotate"
    ) -> EffectReport:
        if self.split is None:
            self.setup()
        return augmentation_effect(
            self.cube, self.labels, self.split, self.config,
            fold=fold, seeds=seeds, per_class=per_class, kinds=("none", kind),
        )
