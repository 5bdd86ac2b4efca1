"""测试监控流水线的完整流程"""

import math

import numpy as np
import pytest

from wdm_monitor.config import NOVEL_LABEL
from wdm_monitor.exceptions import DataError
from wdm_monitor.experiment import ExperimentConfig, config_hash
from wdm_monitor.pipeline import MonitoringPipeline
from wdm_monitor.reporting import (
    CLOSED_METRICS_FILE, CONFUSION_FIGURE, CONFUSION_FILE, CV_FILE, CV_SUMMARY_FILE, LOO_FILE,
    LOO_SAMPLES_FILE, LOO_SUMMARY_FILE, LOSS_FILE, ROC_FIGURE, read_csv_report,
)
from wdm_monitor.wdm import read_dataset
from tests.fixtures.sample_data import create_random_wdm, tiny_experiment_config


def make_pipeline(output_dir, **changes):
    data = tiny_experiment_config(str(output_dir))
    for section, values in changes.items():
        data[section] = {**data[section], **values}
    return MonitoringPipeline(ExperimentConfig.from_dict(data), show_progress=False)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """生成数据并训练一次，供本模块的测试共用"""
    pipeline = make_pipeline(tmp_path_factory.mktemp("pipeline") / "run")
    dataset, split = pipeline.synth()
    run = pipeline.train()
    return pipeline, dataset, split, run


class TestSynthAndTrain:
    """测试数据生成与训练步骤"""

    def test_dataset_written(self, trained):
        """测试数据集与划分清单写出后可以读回"""
        pipeline, dataset, split, _ = trained
        assert len(dataset) == 40
        assert read_dataset(pipeline.cfg.paths.resolve('dataset')) == dataset
        loaded_dataset, loaded_split = pipeline.load_data()
        assert loaded_split == split
        assert len(split.test) == 8
        assert all(w.outside_disk() == 0 for w in loaded_dataset)

    def test_checkpoint_and_loss(self, trained):
        """测试检查点按声明顺序记录类别，损失曲线每个 epoch 一行"""
        pipeline, _, _, run = trained
        model = pipeline.load_model()
        assert model.config.class_names == ['GeoScratch', 'Normal', 'Ring', 'Slice']
        assert model.config.grid_size == 32
        frame, prov = read_csv_report(pipeline.reports_dir / LOSS_FILE)
        assert frame['epoch'].tolist() == [1, 2]
        assert np.allclose(frame['loss'], run.loss_trace)
        assert prov['config_hash'] == config_hash(pipeline.cfg)
        assert all(math.isfinite(v) for v in run.loss_trace)


class TestOpenSet:
    """测试校准与开集分类"""

    def test_calibrate(self, trained):
        """测试校准样本数等于阈值划分大小"""
        pipeline, _, split, _ = trained
        open_model = pipeline.calibrate()
        assert open_model.threshold.n_cal == len(split.threshold)
        assert open_model.threshold.alpha == pytest.approx(0.05)
        assert pipeline.cfg.paths.resolve('scorer').exists()
        reloaded = pipeline.load_open_set()
        assert reloaded.threshold.eta == pytest.approx(open_model.threshold.eta)

    def test_classify_eta_extremes(self, trained, temp_dir):
        """测试 η=+∞ 时没有 Novel，η=-∞ 时全部为 Novel"""
        pipeline, dataset, split, _ = trained
        if not pipeline.cfg.paths.resolve('scorer').exists():
            pipeline.calibrate()
        wdms = [dataset[i] for i in split.test[:3]]
        known = pipeline.classify(wdms, eta=math.inf, output=temp_dir / "known.csv")
        assert all(not d.is_novel for d in known)
        assert all(d.label in pipeline.load_model().config.class_names for d in known)
        novel = pipeline.classify(wdms, eta=-math.inf)
        assert all(d.label == NOVEL_LABEL for d in novel)
        frame, _ = read_csv_report(temp_dir / "known.csv")
        assert frame['id'].tolist() == [w.id for w in wdms]
        assert 'score_Ring' in frame.columns

    def test_classify_deterministic(self, trained):
        """测试同一输入两次分类结果相同"""
        pipeline, dataset, split, _ = trained
        if not pipeline.cfg.paths.resolve('scorer').exists():
            pipeline.calibrate()
        wdms = [dataset[i] for i in split.test[:2]]
        first = [d.novelty_score for d in pipeline.classify(wdms)]
        second = [d.novelty_score for d in pipeline.classify(wdms)]
        assert first == second

    def test_classify_grid_mismatch(self, trained, rng):
        """测试网格大小与模型不一致时报数据错误"""
        pipeline, _, _, _ = trained
        if not pipeline.cfg.paths.resolve('scorer').exists():
            pipeline.calibrate()
        with pytest.raises(DataError):
            pipeline.classify([create_random_wdm(rng, "x", grid_size=16)])


class TestEvaluation:
    """测试闭集、留一法与交叉验证评估"""

    def test_eval_closed(self, trained):
        """测试混淆矩阵覆盖全部测试样本"""
        pipeline, _, split, _ = trained
        result = pipeline.eval_closed()
        assert result.confusion.counts.sum() == len(split.test)
        assert 0.0 <= result.auc_1vs1 <= 1.0
        assert np.allclose(result.posteriors.sum(axis=1), 1.0)
        frame, _ = read_csv_report(pipeline.reports_dir / CONFUSION_FILE)
        assert frame['true_class'].tolist() == result.confusion.class_names
        metrics, _ = read_csv_report(pipeline.reports_dir / CLOSED_METRICS_FILE)
        assert metrics['accuracy'].iloc[0] == pytest.approx(result.accuracy)

    def test_eval_open_deterministic(self, trained):
        """测试留一法报告两次运行字节相同"""
        pipeline, _, _, _ = trained
        report = pipeline.eval_open()
        first = {name: (pipeline.reports_dir / name).read_bytes()
                 for name in (LOO_FILE, LOO_SUMMARY_FILE, LOO_SAMPLES_FILE)}
        pipeline.eval_open()
        for name, content in first.items():
            assert (pipeline.reports_dir / name).read_bytes() == content

        assert report.classes == ['Ring']
        assert [row['scorer'] for row in report.rows] == ['gmm', 'softmax', 'ci']
        assert all(row['novel_class'] == 'Ring' for row in report.rows)
        assert all(row['n_novel'] == 10 for row in report.rows)
        assert sum(row['significant'] for row in report.rows) <= 1
        assert report.best_scorer in report.scorers

    def test_report_figures(self, trained):
        """测试从已有 CSV 生成 ROC 图与混淆矩阵热图"""
        pipeline, _, _, _ = trained
        if not (pipeline.reports_dir / LOO_SAMPLES_FILE).exists():
            pipeline.eval_open()
        if not (pipeline.reports_dir / CONFUSION_FILE).exists():
            pipeline.eval_closed()
        written = pipeline.report()
        assert [p.name for p in written] == [ROC_FIGURE, CONFUSION_FIGURE]
        content = written[0].read_bytes()
        pipeline.report()
        assert written[0].read_bytes() == content

    def test_report_without_inputs(self, temp_dir):
        """测试没有报告可绘制时报错"""
        pipeline = make_pipeline(temp_dir / "empty")
        with pytest.raises(DataError):
            pipeline.report()

    def test_cross_validate(self, trained):
        """测试每折每种模式一行，并给出两种 AUC 的平均秩"""
        pipeline, _, _, _ = trained
        report = pipeline.cross_validate()
        assert len(report.rows) == 2 * 2
        assert {row['mode'] for row in report.rows} == {'none', 'geometric'}
        for metric in ('auc_1vsrest', 'auc_1vs1'):
            assert sum(report.ranks[metric].values()) == pytest.approx(3.0)
        summary, _ = read_csv_report(pipeline.reports_dir / CV_SUMMARY_FILE)
        assert summary['mode'].tolist() == ['none', 'geometric']
        assert (pipeline.reports_dir / CV_FILE).exists()

    def test_seed_changes_dataset(self, temp_dir):
        """测试不同种子生成不同的数据集，相同种子生成相同的数据集"""
        a, _ = make_pipeline(temp_dir / "a").synth()
        b, _ = make_pipeline(temp_dir / "b").synth()
        data = tiny_experiment_config(str(temp_dir / "c"))
        data['seed'] = 8
        c, _ = MonitoringPipeline(ExperimentConfig.from_dict(data), show_progress=False).synth()
        assert a == b
        assert a != c
