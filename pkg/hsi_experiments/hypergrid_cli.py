#!/usr/bin/env python3
"""
hypergrid 命令行入口：合成数据、划分、训练、完整实验、增广统计与效果、统计比较与自检。

用法示例：
  python hsi_experiments/hypergrid_cli.py synth --out data/scene --width 40 --height 40 --bands 32 --classes 4 --seed 7
  python hsi_experiments/hypergrid_cli.py split --cube data/scene/cube.hdr --labels data/scene/labels.hdr --out data/scene/split.yaml
  python hsi_experiments/hypergrid_cli.py train --config hsi_experiments/configs/desk.yaml --fold 0 --run 0
  python hsi_experiments/hypergrid_cli.py experiment --config hsi_experiments/configs/desk.yaml --runs 5
  python hsi_experiments/hypergrid_cli.py augment --config hsi_experiments/configs/desk.yaml --fold 0 --stats
  python hsi_experiments/hypergrid_cli.py effect --config hsi_experiments/configs/desk.yaml --seeds 5 --per-class 10
  python hsi_experiments/hypergrid_cli.py compare --results a.csv b.csv --by kappa
  python hsi_experiments/hypergrid_cli.py gradcheck --seed 0
  python hsi_experiments/hypergrid_cli.py benchmark --model model.hgm --cube cube.hdr --labels labels.hdr --repeat 3

退出码：0 成功，1 用法/配置错误，2 I/O 错误，3 划分不可行，4 比较无法配对，5 自检失败。
环境变量 HYPERGRID_THREADS 限制并行的 (fold, run) 单元数（缺省 1，保证逐位可复现）。
"""

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Sequence

# 确保项目根路径在模块搜索路径中
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

import numpy as np
import pandas as pd

from hsi_augment import compute_budget
from hsi_augment.pipeline import class_counts
from hsi_src import __version__
from hsi_src.dataset import (
    apply_normalization,
    build_samples,
    fit_normalization,
    generate_patch_splits,
    load_cube,
    mirror_pad,
    save_cube,
    save_split,
    synth_scene,
    verify_no_leakage,
)
from hsi_src.errors import (
    ConfigError,
    FormatError,
    HypergridError,
    InfeasibleSplitError,
    UnpairedKeysError,
    VerificationError,
)
from hsi_src.evaluation import format_summary, load_results_csv, write_results_csv
from hsi_src.experiment_manager import ExperimentManager, padding_radius, prepare_fold
from hsi_src.network import TINY_CONFIG, NetworkConfig, canonical_gradient_check, forward, load_checkpoint, save_checkpoint, shape_trace
from hsi_src.run_config import RunConfig, THREADS_ENV, load_run_config, worker_count
from hsi_src.stats import compare_results
from hsi_src.tensor_core import SeededRng

logger = logging.getLogger("hypergrid")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
GRADCHECK_THRESHOLD = 1e-4
BENCHMARK_COLUMNS = ["pass", "samples", "mean_ms", "p95_ms"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_INFEASIBLE = 3
EXIT_UNPAIRED = 4
EXIT_VERIFICATION = 5


class UsageError(Exception):
    pass


class HypergridArgumentParser(argparse.ArgumentParser):
    """argparse 缺省以 2 退出，这里把用法错误统一映射为退出码 1。"""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def _timestamped_run_dir(root: Path) -> Path:
    now = datetime.now()
    run_dir = root / now.strftime("%Y-%m-%d") / now.strftime("%Y-%m-%d_%H-%M-%S")
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


# =============================================================================
# synth
# =============================================================================
def cmd_synth(args: argparse.Namespace) -> int:
    if args.width < 1 or args.height < 1 or args.bands < 1 or args.classes < 2 or args.noise < 0:
        raise ConfigError("width/height/bands 必须 >= 1，classes >= 2，noise >= 0")
    cube, labels = synth_scene(SeededRng(args.seed), args.width, args.height, args.bands, args.classes, args.noise)
    out = Path(args.out)
    save_cube(cube, labels, out / "cube.hdr", out / "labels.hdr")
    print(f"✅ 合成场景 {args.width}x{args.height}x{args.bands}, {args.classes} 类 -> {out}")
    return EXIT_OK


# =============================================================================
# split
# =============================================================================
def cmd_split(args: argparse.Namespace) -> int:
    cube, labels = load_cube(args.cube, args.labels)
    if args.radius < 0:
        raise UsageError("--radius 必须 >= 0")
    # 缺省按旋转源窗口取训练读取半径，与 experiment 现场生成的划分一致
    train_radius = padding_radius(2 * args.radius + 1) if args.train_radius is None else args.train_radius
    split = generate_patch_splits(labels, args.folds, args.block, args.radius, SeededRng(args.seed), train_radius)
    report = verify_no_leakage(split, labels)
    print(report.summary())
    for i, fold in enumerate(split.folds):
        print(f"fold {i}: 训练 {len(fold.train)} / 测试 {len(fold.test)}")
    if not report.ok:
        raise VerificationError("划分未通过泄漏检查，未写出文件")
    save_split(split, args.out)
    print(f"✅ 划分已保存: {args.out}")
    return EXIT_OK


# =============================================================================
# train
# =============================================================================
def _load_config(args: argparse.Namespace, **overrides) -> RunConfig:
    if not Path(args.config).exists():
        raise FileNotFoundError(f"找不到配置文件: {args.config}")
    return load_run_config(args.config, overrides)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manager = ExperimentManager(cfg).setup()
    if not 0 <= args.fold < len(manager.split.folds):
        raise ConfigError(f"--fold {args.fold} 超出范围 [0, {len(manager.split.folds)})")
    outcome = manager.run_cell(args.fold, args.run, progress=args.progress)

    out_dir = Path(cfg.out_dir or ".")
    model_path = Path(args.out_model or out_dir / f"model_f{args.fold}_r{args.run}.hgm")
    report_path = Path(args.out_report or out_dir / f"report_f{args.fold}_r{args.run}.csv")
    save_checkpoint(model_path, outcome.params, outcome.network_config)
    write_results_csv([outcome.report], report_path)
    r = outcome.report
    print(f"fold {r.fold} run {r.run}: OA={r.oa:.4f} AA={r.aa:.4f} kappa={r.kappa:.4f} epochs={r.epochs} ({r.stop_reason})")
    print(f"🧾 模型: {model_path}  报告: {report_path}")
    return EXIT_OK


# =============================================================================
# experiment
# =============================================================================
def cmd_experiment(args: argparse.Namespace) -> int:
    cfg = _load_config(args, runs=args.runs)
    manager = ExperimentManager(cfg).setup()
    result = manager.run_experiment()

    if args.out_dir:
        run_dir = Path(args.out_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    else:
        run_dir = _timestamped_run_dir(Path(cfg.out_dir or "runs"))
    write_results_csv(result.reports, run_dir / "results.csv")
    summary = format_summary(result.reports)
    (run_dir / "summary.md").write_text(f"# {result.method} / {result.dataset}\n\n{summary}", encoding="utf-8")
    run_info = {
        "config": cfg.to_dict(),
        "folds": len(manager.split.folds),
        "runs": cfg.runs,
        "reports": len(result.reports),
        "threads": worker_count(),
        "version": __version__,
        "timestamp": datetime.now().isoformat(),
    }
    with (run_dir / "run_info.json").open("w", encoding="utf-8") as f:
        json.dump(run_info, f, ensure_ascii=False, indent=2, default=json_default)
    print(summary)
    print(f"🧾 结果已保存: {run_dir}")
    return EXIT_OK


# =============================================================================
# augment
# =============================================================================
def cmd_augment(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manager = ExperimentManager(cfg).setup()
    data = prepare_fold(manager.cube, manager.labels, manager.split, args.fold, cfg.patch_size)
    counts = class_counts(data.train_samples)
    for cls in range(1, manager.labels.num_classes + 1):
        counts.setdefault(cls, 0)
    budget = compute_budget(dict(sorted(counts.items())))
    table = budget.to_frame()
    if args.stats:
        totals = pd.DataFrame([{
            "class": "total", "n_c": table["n_c"].sum(), "s_c": table["s_c"].sum(), "total": table["total"].sum(),
        }])
        sys.stdout.write(pd.concat([table, totals], ignore_index=True).to_csv(index=False))
    else:
        print(f"fold {args.fold}: 原始 {int(table['n_c'].sum())} + 合成 {int(table['s_c'].sum())}（{cfg.augmentation}）")
    return EXIT_OK


# =============================================================================
# effect
# =============================================================================
def cmd_effect(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    manager = ExperimentManager(cfg).setup()
    report = manager.augmentation_effect(fold=args.fold, seeds=args.seeds, per_class=args.per_class, kind=args.kind)
    text = report.summary(kind=args.kind)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        report.frame.to_csv(args.out, index=False)
        print(f"🧾 结果已保存: {args.out}")
    return EXIT_OK


# =============================================================================
# compare
# =============================================================================
def cmd_compare(args: argparse.Namespace) -> int:
    if len(args.results) < 2:
        raise UsageError("compare 至少需要两个结果文件")
    frames: Dict[str, pd.DataFrame] = {}
    for path in args.results:
        name = Path(path).stem
        while name in frames:
            name += "'"
        frames[name] = load_results_csv(path)
    comparison = compare_results(frames, by=args.by)
    text = comparison.to_markdown()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# =============================================================================
# gradcheck
# =============================================================================
def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = NetworkConfig(**TINY_CONFIG)
    trace = " -> ".join(str(list(s)) for s in shape_trace(cfg))
    print(f"小配置的形状推导: {trace}（每个卷积层 {cfg.kernels_per_layer} 张特征图）")
    result = canonical_gradient_check(seed=args.seed, eps=args.eps)
    print(
        f"max relative error {result.max_relative_error:.3e} at {result.worst_block}{list(result.worst_index)} "
        f"(analytic {result.analytic:.6e}, numeric {result.numeric:.6e}, {result.coordinates_checked} coordinates)"
    )
    if result.max_relative_error >= GRADCHECK_THRESHOLD:
        raise VerificationError(f"梯度检查未通过（阈值 {GRADCHECK_THRESHOLD:g}）")
    print("PASS")
    return EXIT_OK


# =============================================================================
# benchmark
# =============================================================================
def cmd_benchmark(args: argparse.Namespace) -> int:
    if args.repeat < 1:
        raise UsageError("--repeat 必须 >= 1")
    params, cfg = load_checkpoint(args.model)
    cube, labels = load_cube(args.cube, args.labels)
    coords = labels.labeled_coords()[: args.max_samples]
    if not coords:
        raise FormatError("标签图中没有可用于测速的已标注像元")
    half = (cfg.patch_width - 1) // 2
    padded = mirror_pad(apply_normalization(cube, fit_normalization(cube, coords)), half)
    samples = build_samples(padded, labels, coords, cfg.patch_width)

    rows: List[Dict[str, object]] = []
    every: List[float] = []
    for rep in range(args.repeat):
        latencies = []
        for s in samples:
            start = time.perf_counter()
            forward(params, cfg, s.patch)
            latencies.append((time.perf_counter() - start) * 1000.0)
        every.extend(latencies)
        rows.append({"pass": rep, "samples": len(latencies), "mean_ms": float(np.mean(latencies)),
                     "p95_ms": float(np.percentile(latencies, 95))})
    rows.append({"pass": "all", "samples": len(every), "mean_ms": float(np.mean(every)),
                 "p95_ms": float(np.percentile(every, 95))})
    table = pd.DataFrame(rows, columns=BENCHMARK_COLUMNS)
    sys.stdout.write(table.to_csv(index=False, float_format="%.6f"))
    if args.out:
        table.to_csv(args.out, index=False, float_format="%.6f")
    return EXIT_OK


# =============================================================================
# parser / main
# =============================================================================
def build_parser() -> HypergridArgumentParser:
    parser = HypergridArgumentParser(prog="hypergrid", description="高光谱影像 3D-CNN 分类工具包")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--version", action="version", version=f"hypergrid {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=HypergridArgumentParser)

    ps = sub.add_parser("synth", help="生成合成场景（HGCUBE1 + HGLAB1）")
    ps.add_argument("--out", required=True, help="cube.hdr/raw 与 labels.hdr/raw 的输出目录")
    ps.add_argument("--width", type=int, default=40)
    ps.add_argument("--height", type=int, default=40)
    ps.add_argument("--bands", type=int, default=32)
    ps.add_argument("--classes", type=int, default=4)
    ps.add_argument("--noise", type=float, default=0.05, help="逐波段高斯噪声的标准差")
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_synth)

    pl = sub.add_parser("split", help="生成无泄漏的按块 patch 交叉验证划分")
    pl.add_argument("--cube", required=True)
    pl.add_argument("--labels", required=True)
    pl.add_argument("--folds", type=int, default=5)
    pl.add_argument("--block", type=int, default=16, help="块边长 g（>= 2*radius+1）")
    pl.add_argument("--radius", type=int, default=3, help="patch 半径 r")
    pl.add_argument("--train-radius", type=int, default=None,
                    help="训练样本读取的半径（缺省: 旋转源窗口半径）")
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", required=True, help="划分文件（YAML）")
    pl.set_defaults(func=cmd_split)

    pt = sub.add_parser("train", help="训练并评估一个 (fold, run) 单元")
    pt.add_argument("--config", required=True)
    pt.add_argument("--fold", type=int, default=0)
    pt.add_argument("--run", type=int, default=0)
    pt.add_argument("--out-model", default=None)
    pt.add_argument("--out-report", default=None)
    pt.add_argument("--progress", action="store_true", help="显示 epoch 进度条")
    pt.set_defaults(func=cmd_train)

    pe = sub.add_parser("experiment", help="跑完全部 fold × run 单元并汇总")
    pe.add_argument("--config", required=True)
    pe.add_argument("--runs", type=int, default=None, help="覆盖每个 fold 的重复次数")
    pe.add_argument("--out-dir", default=None, help="缺省为 <out_dir>/<日期>/<时间戳>/")
    pe.set_defaults(func=cmd_experiment)

    pa = sub.add_parser("augment", help="查看某个 fold 的增广预算")
    pa.add_argument("--config", required=True)
    pa.add_argument("--fold", type=int, default=0)
    pa.add_argument("--stats", action="store_true", help="以 CSV 输出逐类预算表")
    pa.set_defaults(func=cmd_augment)

    pf = sub.add_parser("effect", help="稀疏训练集上的增广效果（只报告，不判定）")
    pf.add_argument("--config", required=True)
    pf.add_argument("--fold", type=int, default=0)
    pf.add_argument("--seeds", type=int, default=5)
    pf.add_argument("--per-class", type=int, default=10, help="每类保留的训练像元数")
    pf.add_argument("--kind", default="rotate", choices=["rotate", "flip", "zoom", "mixed"])
    pf.add_argument("--out", default=None, help="同时把逐种子结果写成 CSV")
    pf.set_defaults(func=cmd_effect)

    pc = sub.add_parser("compare", help="多个结果文件之间的 Wilcoxon 矩阵与平均秩")
    pc.add_argument("--results", nargs="+", required=True)
    pc.add_argument("--by", default="kappa", choices=["kappa", "oa", "aa"])
    pc.add_argument("--out", default=None, help="同时把 markdown 报告写到此处")
    pc.set_defaults(func=cmd_compare)

    pg = sub.add_parser("gradcheck", help="对每个参数梯度做有限差分检查")
    pg.add_argument("--seed", type=int, default=0)
    pg.add_argument("--eps", type=float, default=1e-5)
    pg.set_defaults(func=cmd_gradcheck)

    pb = sub.add_parser("benchmark", help="模型文件的逐样本推理延迟")
    pb.add_argument("--model", required=True)
    pb.add_argument("--cube", required=True)
    pb.add_argument("--labels", required=True)
    pb.add_argument("--repeat", type=int, default=3)
    pb.add_argument("--max-samples", type=int, default=1000)
    pb.add_argument("--out", default=None, help="同时把 CSV 写到此处")
    pb.set_defaults(func=cmd_benchmark)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)

    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    if os.environ.get(THREADS_ENV):
        logger.info(f"{THREADS_ENV}={os.environ[THREADS_ENV]}")

    try:
        return args.func(args)
    except UsageError as e:
        print(f"❌ 用法错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleSplitError as e:
        print(f"❌ 划分不可行: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except UnpairedKeysError as e:
        print(f"❌ 无法配对: {e}", file=sys.stderr)
        for name, detail in e.missing.items():
            print(f"  {name}: {detail}", file=sys.stderr)
        return EXIT_UNPAIRED
    except VerificationError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except ConfigError as e:
        print(f"❌ 配置错误: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as e:
        print(f"❌ I/O 错误: {e}", file=sys.stderr)
        return EXIT_IO
    except HypergridError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
