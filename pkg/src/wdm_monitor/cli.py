"""命令行接口"""

import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from .config import SCORER_NAMES
from .exceptions import ConfigError, WdmMonitorError
from .experiment import ExperimentConfig, config_hash
from .pipeline import MonitoringPipeline
from .reporting import DECISIONS_FILE
from .utils import setup_logging
from .wdm import read_dataset

logger = logging.getLogger(__name__)


def _split_names(value: Optional[str]) -> Optional[List[str]]:
    if not value:
        return None
    return [name.strip() for name in value.split(',') if name.strip()]


@click.group()
@click.option(
    '--config', '-c', 'config_path',
    type=click.Path(path_type=Path, dir_okay=False),
    help='实验配置 JSON 文件（缺省时使用默认配置）'
)
@click.option(
    '--output', '-o',
    type=click.Path(path_type=Path, file_okay=False),
    help='输出目录（覆盖配置中的 paths.output_dir）'
)
@click.option('--seed', type=int, help='随机种子（覆盖配置与环境变量）')
@click.option('--workers', type=int, help='并发线程数（覆盖配置与环境变量）')
@click.option('--verbose', '-v', is_flag=True, help='显示详细日志')
@click.option('--no-progress', is_flag=True, help='不显示进度条')
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], output: Optional[Path], seed: Optional[int],
        workers: Optional[int], verbose: bool, no_progress: bool) -> None:
    """
    晶圆缺陷图 (WDM) 监控工具

    在缺陷坐标上直接运行子流形稀疏卷积网络做闭集分类，
    并用潜在空间上的新颖性评分识别未知缺陷模式。

    示例:

        # 生成合成数据集并训练
        wdm-monitor -c experiment.json synth
        wdm-monitor -c experiment.json train

        # 校准阈值并对新 WDM 做开集分类
        wdm-monitor -c experiment.json calibrate
        wdm-monitor -c experiment.json classify new_wafers.wdm.jsonl

        # 留一法评估并绘图
        wdm-monitor -c experiment.json eval-open
        wdm-monitor -c experiment.json report
    """
    overrides: Dict[str, Any] = {}
    if output is not None:
        overrides['paths'] = {'output_dir': str(output)}
    if seed is not None:
        overrides['seed'] = seed
    if workers is not None:
        overrides['workers'] = workers
    cfg = ExperimentConfig.load(config_path, overrides=overrides)

    setup_logging(cfg.paths.resolve('output_dir'), verbose)
    logger.info(f"配置 hash={config_hash(cfg)}, seed={cfg.seed}, workers={cfg.workers}")
    ctx.obj = MonitoringPipeline(cfg, show_progress=not no_progress)


@cli.command()
@click.pass_obj
def synth(pipeline: MonitoringPipeline) -> None:
    """生成合成 WDM 数据集与划分清单"""
    dataset, split = pipeline.synth()
    click.echo(f"✅ 已生成 {len(dataset)} 个 WDM")
    click.echo(f"📂 数据集: {pipeline.cfg.paths.resolve('dataset')}")
    click.echo(f"📄 划分清单: {pipeline.cfg.paths.resolve('manifest')} "
               f"(训练 {len(split.train)} / 拟合 {len(split.gmm_fit)} / "
               f"阈值 {len(split.threshold)} / 测试 {len(split.test)})")


@cli.command()
@click.pass_obj
def train(pipeline: MonitoringPipeline) -> None:
    """训练 SSCN 并保存检查点"""
    run = pipeline.train()
    click.echo(f"✅ 训练完成: {run.epochs} 个 epoch, 最终损失 {run.final_loss:.4f}, "
               f"训练准确率 {run.train_accuracy:.1%}")
    click.echo(f"⏱️ 耗时: {run.duration}")
    click.echo(f"💾 检查点: {pipeline.cfg.paths.resolve('checkpoint')}")


@cli.command()
@click.option('--scorer', type=click.Choice(SCORER_NAMES), help='评分器（覆盖配置中的 scorer.name）')
@click.pass_obj
def calibrate(pipeline: MonitoringPipeline, scorer: Optional[str]) -> None:
    """拟合新颖性评分器并校准阈值 η"""
    if scorer is not None:
        pipeline.reconfigure('scorer', {'name': scorer})
    model = pipeline.calibrate()
    click.echo(f"✅ 评分器 {model.scorer.name}: η = {model.threshold.eta:.6g} "
               f"(α = {model.threshold.alpha}, 校准样本 {model.threshold.n_cal})")
    click.echo(f"💾 评分器: {pipeline.cfg.paths.resolve('scorer')}")


@cli.command('eval-closed')
@click.pass_obj
def eval_closed(pipeline: MonitoringPipeline) -> None:
    """测试集上的闭集评估"""
    result = pipeline.eval_closed()
    click.echo(f"📊 准确率: {result.accuracy:.2%}")
    click.echo(f"📈 1vsRest-AUC: {result.auc_1vsrest:.4f}")
    click.echo(f"📈 1vs1-AUC: {result.auc_1vs1:.4f}")
    for name, acc in zip(result.confusion.class_names, result.class_accuracy):
        click.echo(f"  📁 {name}: {acc:.2%}")


@cli.command('eval-open')
@click.option('--scorers', help='逗号分隔的评分器列表（覆盖配置中的 loo.scorers）')
@click.option('--held-out', help='逗号分隔的留出类别（覆盖配置中的 loo.held_out）')
@click.pass_obj
def eval_open(pipeline: MonitoringPipeline, scorers: Optional[str], held_out: Optional[str]) -> None:
    """留一法开集评估"""
    loo: Dict[str, Any] = {}
    if scorers:
        loo['scorers'] = _split_names(scorers)
    if held_out:
        loo['held_out'] = _split_names(held_out)
    if loo:
        pipeline.reconfigure('loo', loo)
    report = pipeline.eval_open()
    click.echo(f"📊 留出类别: {', '.join(report.classes)}")
    for row in report.summary_rows():
        marker = "🏆" if row['best'] else "  "
        click.echo(f"{marker} {row['scorer']}: 平均秩 {row['average_rank']:.4f}, "
                   f"Wilcoxon p = {row['wilcoxon_p']:.4g}")


@cli.command('cross-validate')
@click.option('--modes', help='逗号分隔的增强模式（none,geometric,full）')
@click.pass_obj
def cross_validate_cmd(pipeline: MonitoringPipeline, modes: Optional[str]) -> None:
    """k 折交叉验证比较增强模式"""
    report = pipeline.cross_validate(_split_names(modes))
    for row in report.summary_rows():
        click.echo(f"  📁 {row['mode']}: 准确率 {row['mean_accuracy']:.2%}, "
                   f"1vs1-AUC {row['mean_auc_1vs1']:.4f} (平均秩 {row['rank_auc_1vs1']:.2f})")


@cli.command()
@click.argument('input_path', type=click.Path(path_type=Path, dir_okay=False))
@click.option('--eta', type=float, help='覆盖校准得到的阈值 η（可用 inf / -inf）')
@click.option('--output', '-o', 'output', type=click.Path(path_type=Path, dir_okay=False),
              help='结果 CSV 路径（缺省写入报告目录）')
@click.pass_obj
def classify(pipeline: MonitoringPipeline, input_path: Path, eta: Optional[float],
             output: Optional[Path]) -> None:
    """对 JSONL 文件中的 WDM 做开集分类"""
    wdms = read_dataset(input_path)
    output = output or pipeline.reports_dir / DECISIONS_FILE
    decisions = pipeline.classify(wdms, eta=eta, output=output)
    for d in decisions:
        click.echo(json.dumps(d.to_dict(), ensure_ascii=False, sort_keys=True))
    novel = sum(1 for d in decisions if d.is_novel)
    click.echo(f"✅ {len(decisions)} 个 WDM，其中 {novel} 个判为 Novel；结果: {output}", err=True)


@cli.command()
@click.pass_obj
def report(pipeline: MonitoringPipeline) -> None:
    """从 CSV 报告生成 SVG 图"""
    for path in pipeline.report():
        click.echo(f"🖼️ {path}")


def main(argv: Optional[List[str]] = None) -> int:
    """命令行入口：返回退出码，出错时向 stderr 写一条 JSON 错误记录"""
    try:
        cli.main(args=argv, prog_name='wdm-monitor', standalone_mode=False)
        return 0
    except WdmMonitorError as e:
        click.echo(json.dumps(e.to_record(), ensure_ascii=False), err=True)
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("\n⚠️ 用户中断", err=True)
        return 130
    except KeyboardInterrupt:
        click.echo("\n⚠️ 用户中断", err=True)
        return 130
    except click.ClickException as e:
        e.show()
        record = ConfigError(e.format_message()).to_record()
        click.echo(json.dumps(record, ensure_ascii=False), err=True)
        return ConfigError.exit_code


if __name__ == '__main__':
    sys.exit(main())
