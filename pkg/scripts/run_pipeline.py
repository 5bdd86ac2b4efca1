#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
WDM 监控流水线运行脚本
支持不同的运行规模：微型、小批量、全量
"""

import sys
import argparse
from pathlib import Path
from typing import Any, Dict, Optional

# 添加src目录到Python路径
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from wdm_monitor.exceptions import WdmMonitorError
from wdm_monitor.experiment import ExperimentConfig
from wdm_monitor.pipeline import MonitoringPipeline
from wdm_monitor.utils import setup_logging

# 各规模的配置覆盖项
PRESETS: Dict[str, Dict[str, Any]] = {
    'tiny': {
        'synth': {'per_class': 12, 'grid_size': 64, 'test_fraction': 0.25},
        'network': {'num_blocks': 3, 'block_channels': [4, 8, 8], 'latent_dim': 8},
        'train': {'epochs': 2, 'batch_size': 8},
        'scorer': {'n_augment': 4, 'iforest_trees': 10},
        'loo': {'scorers': ['gmm', 'softmax'], 'held_out': ['Ring']},
        'cv': {'folds': 2, 'modes': ['none', 'geometric']},
        'split_fractions': [0.6, 0.2, 0.2],
    },
    'small': {
        'synth': {'per_class': 60, 'grid_size': 128},
        'network': {'num_blocks': 4, 'block_channels': [8, 16, 16, 32], 'latent_dim': 16},
        'train': {'epochs': 8},
        'scorer': {'n_augment': 25},
        'cv': {'folds': 3},
        'split_fractions': [0.8, 0.1, 0.1],
    },
    'full': {},
}


def run_mode(mode: str, output_dir: Path, config_path: Optional[Path] = None, skip_open: bool = False,
             skip_cv: bool = False, workers: Optional[int] = None) -> bool:
    """依次运行 synth → train → calibrate → eval-closed → eval-open → cross-validate → report"""
    overrides = dict(PRESETS[mode])
    overrides['paths'] = {'output_dir': str(output_dir)}
    if workers is not None:
        overrides['workers'] = workers
    cfg = ExperimentConfig.load(config_path, overrides=overrides)
    setup_logging(output_dir)
    pipeline = MonitoringPipeline(cfg)

    dataset, split = pipeline.synth()
    print(f"✅ 数据集: {len(dataset)} 个 WDM (训练 {len(split.train)} / 测试 {len(split.test)})")

    run = pipeline.train()
    print(f"✅ 训练: {run.epochs} 个 epoch, 最终损失 {run.final_loss:.4f}, 耗时 {run.duration}")

    open_model = pipeline.calibrate()
    print(f"✅ 评分器 {open_model.scorer.name}: η = {open_model.threshold.eta:.6g}")

    closed = pipeline.eval_closed()
    print(f"📊 闭集准确率 {closed.accuracy:.2%}, 1vs1-AUC {closed.auc_1vs1:.4f}")

    if not skip_open:
        loo = pipeline.eval_open()
        print(f"📊 留一法最佳评分器: {loo.best_scorer}")
    if not skip_cv:
        cv = pipeline.cross_validate()
        print(f"📊 交叉验证最佳增强模式 (1vs1-AUC): {cv.best['auc_1vs1']}")

    for path in pipeline.report():
        print(f"🖼️ {path}")
    return True


def main():
    parser = argparse.ArgumentParser(description="WDM 监控流水线")
    parser.add_argument(
        "mode",
        choices=sorted(PRESETS),
        help="运行规模: tiny(几秒钟冒烟), small(小批量), full(默认配置)"
    )
    parser.add_argument(
        "-o", "--output",
        type=Path,
        default=Path("runs"),
        help="输出目录 (默认: runs)"
    )
    parser.add_argument(
        "-c", "--config",
        type=Path,
        help="实验配置 JSON，预设覆盖项在其之上应用"
    )
    parser.add_argument("--skip-open", action="store_true", help="跳过留一法开集评估")
    parser.add_argument("--skip-cv", action="store_true", help="跳过交叉验证")
    parser.add_argument("--workers", type=int, help="并发线程数")

    args = parser.parse_args()

    output_dir = args.output / args.mode
    output_dir.mkdir(parents=True, exist_ok=True)

    print(f"📂 输出目录: {output_dir.absolute()}")
    print(f"🎯 运行规模: {args.mode}")
    print()

    if args.mode == "full":
        confirm = input("全量规模需要较长时间，确认开始？(y/N): ")
        if confirm.lower() != 'y':
            print("❌ 用户取消")
            return 0

    try:
        run_mode(args.mode, output_dir, args.config, args.skip_open, args.skip_cv, args.workers)
        print(f"\n🎉 完成！结果保存在: {output_dir}")
        return 0
    except KeyboardInterrupt:
        print("\n⏹️ 用户中断")
        return 130
    except WdmMonitorError as e:
        print(f"\n❌ 运行错误: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
