"""监控流水线：把各命令串成读取产物 → 计算 → 写出产物的步骤"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .evaluation import (
    ClosedSetResult, CrossValidationReport, LooReport, cross_validate, evaluate_closed_set,
    leave_one_out_protocol,
)
from .exceptions import DataError
from .experiment import (
    STREAM_SCORING, ExperimentConfig, fit_open_set, noise_distribution, provenance,
    train_network,
)
from .models import DatasetSplit, OpenSetDecision, TrainingRun, Wdm
from .network import Sscn, load_checkpoint, save_checkpoint
from .openset import OpenSetModel, load_scorer, save_scorer
from .reporting import (
    CLOSED_METRICS_FILE, CONFUSION_FIGURE, CONFUSION_FILE, CV_FILE, CV_SUMMARY_FILE,
    LOO_FILE, LOO_SAMPLES_FILE, LOO_SUMMARY_FILE, LOSS_FILE, ROC_FIGURE, confusion_frame,
    confusion_from_frame, loss_frame, plot_confusion_heatmap, plot_roc_curves, read_csv_report,
    records_frame, write_csv_report,
)
from .utils import make_progress, rng_stream, summarize_times
from .wdm import (
    generate_dataset, holdout_split, read_dataset, read_manifest, split_dataset, write_dataset,
    write_manifest,
)

logger = logging.getLogger(__name__)


class MonitoringPipeline:
    """WDM 监控流水线"""

    def __init__(self, cfg: ExperimentConfig, show_progress: bool = True):
        self.cfg = cfg
        self.show_progress = show_progress
        self.output_dir = cfg.paths.resolve('output_dir')
        self.reports_dir = cfg.paths.resolve('reports')
        self.provenance = provenance(cfg)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    # ------------------------------------------------------------ 产物读写

    def load_data(self) -> Tuple[List[Wdm], DatasetSplit]:
        """读取数据集与划分清单"""
        dataset = read_dataset(self.cfg.paths.resolve('dataset'))
        split = read_manifest(self.cfg.paths.resolve('manifest'), dataset)
        return dataset, split

    def load_model(self) -> Sscn:
        model, prov = load_checkpoint(self.cfg.paths.resolve('checkpoint'))
        if prov.get('config_hash') and prov['config_hash'] != self.provenance['config_hash']:
            logger.warning(f"检查点来自不同的配置 (hash={prov['config_hash']})")
        return model

    def load_open_set(self) -> OpenSetModel:
        open_model, _ = load_scorer(self.cfg.paths.resolve('scorer'), self.load_model())
        return open_model

    def reconfigure(self, section: str, values: Dict[str, Any]) -> None:
        """命令行选项覆盖某个配置段，并刷新来源信息"""
        data = self.cfg.to_dict()
        data[section] = {**data[section], **values}
        self.cfg = ExperimentConfig.from_dict(data)
        self.provenance = provenance(self.cfg)

    def _report_path(self, name: str) -> Path:
        return self.reports_dir / name

    # ------------------------------------------------------------ 步骤

    def synth(self) -> Tuple[List[Wdm], DatasetSplit]:
        """生成合成数据集并写出分层划分"""
        synth = self.cfg.synth
        counts = synth.class_counts()
        logger.info("=" * 60)
        logger.info(f"生成合成数据集: {counts}")
        logger.info("=" * 60)
        dataset = generate_dataset(counts, synth.grid_size, synth.radius, self.cfg.seed,
                                   synth.params, self.cfg.workers)
        dev, test = holdout_split(dataset, synth.test_fraction, self.cfg.seed)
        split = split_dataset(dataset, self.cfg.split_fractions, self.cfg.seed, dev)
        split.test = test
        split.validate(len(dataset))

        write_dataset(self.cfg.paths.resolve('dataset'), dataset)
        write_manifest(self.cfg.paths.resolve('manifest'), dataset, split, self.provenance)
        logger.info(f"划分: 训练 {len(split.train)}, 拟合 {len(split.gmm_fit)}, "
                    f"阈值 {len(split.threshold)}, 测试 {len(split.test)}")
        return dataset, split

    def train(self) -> TrainingRun:
        """训练 SSCN，写出检查点与损失曲线"""
        dataset, split = self.load_data()
        model, run, _ = train_network(self.cfg, dataset, split.train, show_progress=self.show_progress)
        for name, count in model.param_groups():
            logger.info(f"  参数组 {name}: {count}")
        save_checkpoint(model, self.cfg.paths.resolve('checkpoint'),
                        dict(self.provenance, train_run=run.to_dict()))
        write_csv_report(loss_frame(run.loss_trace), self._report_path(LOSS_FILE), self.provenance)
        return run

    def calibrate(self) -> OpenSetModel:
        """拟合所选评分器并校准 η"""
        dataset, split = self.load_data()
        model = self.load_model()
        noise = noise_distribution(self.cfg.augmentation, dataset, split.train)
        name = self.cfg.scorer.name
        open_model = fit_open_set(self.cfg, model, dataset, split, noise, [name])[name]
        save_scorer(self.cfg.paths.resolve('scorer'), open_model.scorer, open_model.threshold,
                    open_model.theta, open_model.noise, open_model.n_augment,
                    dict(self.provenance, scorer=name))
        return open_model

    def eval_closed(self) -> ClosedSetResult:
        """测试集上的闭集评估：混淆矩阵与 1vsRest / 1vs1 AUC"""
        dataset, split = self.load_data()
        if not split.test:
            raise DataError("划分清单中没有测试集（synth.test_fraction 为 0？）")
        model = self.load_model()
        noise = noise_distribution(self.cfg.augmentation, dataset, split.train)
        classes = list(model.config.class_names or [])
        theta = self.cfg.augmentation.common_set(classes, model.config.grid_size)
        result = evaluate_closed_set(model, dataset, split.test, theta, noise, self.cfg.scorer.n_augment,
                                     self.cfg.seed, self.cfg.workers)

        write_csv_report(confusion_frame(result.confusion), self._report_path(CONFUSION_FILE), self.provenance)
        summary = result.summary()
        row: Dict[str, Any] = {k: summary[k] for k in ('accuracy', 'auc_1vsrest', 'auc_1vs1')}
        row.update({f'acc_{name}': acc for name, acc in summary['class_accuracy'].items()})
        write_csv_report(records_frame([row]), self._report_path(CLOSED_METRICS_FILE), self.provenance)
        logger.info(f"闭集评估: 准确率 {result.accuracy:.2%}, 1vsRest-AUC {result.auc_1vsrest:.4f}, "
                    f"1vs1-AUC {result.auc_1vs1:.4f}")
        return result

    def eval_open(self) -> LooReport:
        """留一法开集评估"""
        dataset, _ = self.load_data()
        report = leave_one_out_protocol(dataset, self.cfg, show_progress=self.show_progress)
        write_csv_report(records_frame(report.rows), self._report_path(LOO_FILE), self.provenance)
        write_csv_report(records_frame(report.summary_rows()), self._report_path(LOO_SUMMARY_FILE),
                         self.provenance)
        write_csv_report(records_frame(report.samples), self._report_path(LOO_SAMPLES_FILE), self.provenance)
        return report

    def cross_validate(self, modes: Optional[Sequence[str]] = None) -> CrossValidationReport:
        """k 折交叉验证比较增强模式"""
        dataset, _ = self.load_data()
        report = cross_validate(dataset, self.cfg, modes, show_progress=self.show_progress)
        write_csv_report(records_frame(report.rows), self._report_path(CV_FILE), self.provenance)
        write_csv_report(records_frame(report.summary_rows()), self._report_path(CV_SUMMARY_FILE),
                         self.provenance)
        return report

    def classify(self, wdms: Sequence[Wdm], eta: Optional[float] = None,
                 output: Optional[Path] = None) -> List[OpenSetDecision]:
        """逐个 WDM 做开集分类；eta 非空时覆盖校准得到的 η"""
        open_model = self.load_open_set()
        grid_size = open_model.network.config.grid_size
        decisions = []
        progress = make_progress(len(wdms), "分类", enabled=self.show_progress)
        for i, w in enumerate(wdms):
            if w.grid_size != grid_size:
                raise DataError(f"WDM {w.id} 的网格大小 {w.grid_size} 与模型 {grid_size} 不一致")
            decisions.append(open_model.classify(w, rng_stream(self.cfg.seed, STREAM_SCORING, i),
                                                 eta=eta, workers=self.cfg.workers))
            progress.update()
        progress.finish()

        timing = summarize_times([d.elapsed for d in decisions])
        logger.info(f"分类 {timing['count']} 个 WDM，每个耗时 {timing['mean']:.4f} ± {timing['std']:.4f} 秒")
        if output is not None:
            records = []
            names = list(open_model.network.config.class_names or [])
            for d in decisions:
                record = {k: v for k, v in d.to_dict().items() if k != 'class_scores'}
                record.update({f'score_{n}': s for n, s in zip(names, d.class_scores)})
                records.append(record)
            write_csv_report(records_frame(records), output, self.provenance)
        return decisions

    def report(self) -> List[Path]:
        """从已有 CSV 生成 SVG：ROC 曲线与混淆矩阵热图"""
        written = []
        samples_path = self._report_path(LOO_SAMPLES_FILE)
        if samples_path.exists():
            samples, prov = read_csv_report(samples_path)
            path = self._report_path(ROC_FIGURE)
            plot_roc_curves(samples, path, prov)
            written.append(path)
        confusion_path = self._report_path(CONFUSION_FILE)
        if confusion_path.exists():
            frame, prov = read_csv_report(confusion_path)
            path = self._report_path(CONFUSION_FIGURE)
            plot_confusion_heatmap(confusion_from_frame(frame), path, prov)
            written.append(path)
        if not written:
            raise DataError(f"{self.reports_dir} 中没有可绘制的报告（先运行 eval-open 或 eval-closed）")
        return written
