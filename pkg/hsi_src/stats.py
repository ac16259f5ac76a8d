"""结果表上的配对显著性检验与平均秩"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from .errors import InvalidRangeError, UnpairedKeysError

logger = logging.getLogger(__name__)

EXACT_MAX_N = 25
SIGNIFICANCE = 0.05


@dataclass
class WilcoxonResult:
    statistic: float  # min(W+, W-)
    p_value: float
    n_effective: int
    method: str


def signed_rank_distribution(ranks: np.ndarray) -> np.ndarray:
    # 2^n 种符号组合下，每个可能的（两倍）正秩和出现的次数
    doubled = np.rint(np.asarray(ranks) * 2).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_two_tailed(a: Sequence[float], b: Sequence[float], method: str = "auto") -> WilcoxonResult:
    """
    对 d = a - b 做双侧 Wilcoxon 符号秩检验

    丢弃零差值，|d| 相同者取平均秩。非零对数不超过 25 时枚举全部符号组合（保留实际的并列结构）
    得到精确 p 值；超过 25 或 ``method="normal"`` 时用带并列修正与连续性修正的正态近似。
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise InvalidRangeError(f"需要两个等长的非空样本，当前为 {a.shape} 与 {b.shape}")
    if method not in ("auto", "exact", "normal"):
        raise InvalidRangeError(f"不支持的方法: {method}，支持的方法有: auto, exact, normal")
    d = a - b
    d = d[d != 0]
    n = int(d.size)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "degenerate")

    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    use_exact = method == "exact" or (method == "auto" and n <= EXACT_MAX_N)
    if use_exact:
        counts = signed_rank_distribution(ranks)
        observed = int(round(2 * w_plus))
        total = float(2 ** n)
        lower = counts[:observed + 1].sum() / total
        upper = counts[observed:].sum() / total
        p = min(1.0, 2.0 * min(lower, upper))
        return WilcoxonResult(statistic, float(p), n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    if var <= 0:
        return WilcoxonResult(statistic, 1.0, n, "normal")
    z = max(abs(w_plus - mean) - 0.5, 0.0) / np.sqrt(var)
    return WilcoxonResult(statistic, float(min(1.0, 2.0 * norm.sf(z))), n, "normal")


def average_rank(table: pd.DataFrame) -> pd.Series:
    """在每个数据集（列）内按得分给方法（行）排名，最好为 1，并列取平均秩，再对数据集求均值"""
    if table.isna().any().any():
        missing = {
            str(col): [str(idx) for idx in table.index[table[col].isna()]]
            for col in table.columns if table[col].isna().any()
        }
        raise UnpairedKeysError(f"得分表有缺失项: {missing}", missing=missing)
    ranks = table.rank(axis=0, ascending=False, method="average")
    return ranks.mean(axis=1).rename("AR")


def per_class_means(frame: pd.DataFrame) -> pd.Series:
    # 单个结果文件的逐类平均精度，索引为 (dataset, class)
    class_cols = [c for c in frame.columns if c.startswith("class_")]
    long = frame.melt(id_vars=["dataset"], value_vars=class_cols, var_name="class", value_name="accuracy")
    means = long.groupby(["dataset", "class"])["accuracy"].mean()
    return means.dropna()


@dataclass
class ComparisonResult:
    p_values: pd.DataFrame
    marked: pd.DataFrame
    score_table: pd.DataFrame
    average_ranks: pd.Series
    by: str = "kappa"

    def to_markdown(self) -> str:
        ar = self.average_ranks.to_frame().join(self.score_table)
        return "\n\n".join([
            "## Wilcoxon 双侧检验 p 值（* 表示 p < 0.05）",
            self.marked.to_markdown(),
            f"## 各数据集上的平均 {self.by} 与平均秩 AR",
            ar.to_markdown(floatfmt=".4f"),
        ]) + "\n"


def compare_results(results: Mapping[str, pd.DataFrame], by: str = "kappa") -> ComparisonResult:
    """按 (dataset, class) 配对逐类精度做两两 Wilcoxon 检验，并按 ``by`` 的均值计算平均秩"""
    if len(results) < 2:
        raise InvalidRangeError("至少需要两组结果才能比较")
    names = list(results)
    cells: Dict[str, pd.Series] = {name: per_class_means(frame) for name, frame in results.items()}

    reference = set(cells[names[0]].index)
    missing = {}
    for name in names[1:]:
        keys = set(cells[name].index)
        if keys != reference:
            missing[name] = {
                "absent": sorted(map(str, reference - keys)),
                "extra": sorted(map(str, keys - reference)),
            }
    if missing:
        raise UnpairedKeysError(f"结果无法按 (dataset, class) 配对: {missing}", missing=missing)

    keys = sorted(reference)
    p_values = pd.DataFrame(1.0, index=names, columns=names)
    for i, first in enumerate(names):
        for second in names[i + 1:]:
            res = wilcoxon_two_tailed(cells[first].loc[keys].to_numpy(), cells[second].loc[keys].to_numpy())
            p_values.loc[first, second] = p_values.loc[second, first] = res.p_value
            logger.info(f"{first} vs {second}: W={res.statistic:.1f}, n={res.n_effective}, p={res.p_value:.4g}")
    marked = p_values.map(lambda p: f"{p:.4g}*" if p < SIGNIFICANCE else f"{p:.4g}")
    for name in names:
        marked.loc[name, name] = "-"

    for name, frame in results.items():
        if by not in frame.columns:
            raise InvalidRangeError(f"结果 {name} 缺少列 {by!r}")
    score_table = pd.DataFrame({
        name: frame.groupby("dataset")[by].mean() for name, frame in results.items()
    }).T
    return ComparisonResult(p_values, marked, score_table, average_rank(score_table), by)
