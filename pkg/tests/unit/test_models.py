"""测试数据模型"""

import numpy as np
import pytest

from wdm_monitor.config import NOVEL_LABEL
from wdm_monitor.exceptions import CoordinateRangeError, DataError
from wdm_monitor.models import (
    ClassLabel, DatasetSplit, OpenSetDecision, TrainingRun, Wdm, index_by_id, labels_of,
)
from tests.fixtures.sample_data import SMALL_GRID, SMALL_RADIUS, create_sample_wdm


class TestClassLabel:
    """测试类别枚举"""

    def test_names(self):
        """测试 13 个类别按名称序列化"""
        assert len(ClassLabel.names()) == 13
        assert ClassLabel.parse('GeoScratch') is ClassLabel.GEO_SCRATCH
        assert str(ClassLabel.RING) == 'Ring'

    def test_unknown(self):
        """测试未知类别报错并列出合法名称"""
        with pytest.raises(DataError, match="BasketBall"):
            ClassLabel.parse('Scratch')


class TestWdm:
    """测试 WDM 数据模型"""

    def test_normalization(self):
        """测试坐标去重并按 (i, j) 排序"""
        w = Wdm("w", SMALL_GRID, SMALL_RADIUS, [[3, 2], [1, 5], [3, 2], [1, 4]], 'Ring')
        assert w.defects.tolist() == [[1, 4], [1, 5], [3, 2]]
        assert w.defects.dtype == np.int64
        assert w.label is ClassLabel.RING
        assert w.num_defects == 3

    def test_empty(self):
        """测试空缺陷集合"""
        w = Wdm("w", SMALL_GRID, SMALL_RADIUS)
        assert w.defects.shape == (0, 2)
        assert w.num_defects == 0
        assert w.outside_disk() == 0

    def test_out_of_range(self):
        """测试越界坐标报错"""
        with pytest.raises(CoordinateRangeError) as exc_info:
            Wdm("w", SMALL_GRID, SMALL_RADIUS, [[0, 0], [SMALL_GRID, 1]])
        assert exc_info.value.coord == (SMALL_GRID, 1)
        assert exc_info.value.exit_code == 3

    def test_invalid_shape(self):
        """测试坐标形状错误"""
        with pytest.raises(DataError):
            Wdm("w", SMALL_GRID, SMALL_RADIUS, [1, 2, 3])
        with pytest.raises(DataError):
            Wdm("w", 0, SMALL_RADIUS)
        with pytest.raises(DataError):
            Wdm("w", SMALL_GRID, 0.0)

    def test_geometry(self):
        """测试圆心与半径计算"""
        w = Wdm("w", 16, 7.68, [[0, 0], [7, 7], [8, 8]])
        assert w.center == 7.5
        assert w.radii() == pytest.approx([7.5 * np.sqrt(2), np.sqrt(0.5), np.sqrt(0.5)])
        assert w.outside_disk() == 1

    def test_with_defects(self, sample_wdm):
        """测试替换缺陷时保留元数据"""
        other = sample_wdm.with_defects([[2, 2]])
        assert other.id == sample_wdm.id
        assert other.label == sample_wdm.label
        assert other.defects.tolist() == [[2, 2]]
        assert sample_wdm.with_defects([], label=None).label is None

    def test_equality(self, sample_wdm):
        """测试按内容比较"""
        assert sample_wdm == create_sample_wdm()
        assert sample_wdm != sample_wdm.with_defects([[0, 0]])
        assert sample_wdm != sample_wdm.with_defects(sample_wdm.defects, label='Slice')

    def test_dict_round_trip(self, sample_wdm):
        """测试字典往返"""
        data = sample_wdm.to_dict()
        assert set(data) == {'id', 'k', 'radius', 'label', 'defects'}
        assert Wdm.from_dict(data) == sample_wdm

    def test_from_dict_errors(self, sample_wdm):
        """测试缺失字段、未知字段与未知标签"""
        data = sample_wdm.to_dict()
        with pytest.raises(DataError, match="radius"):
            Wdm.from_dict({k: v for k, v in data.items() if k != 'radius'})
        with pytest.raises(DataError, match="extra"):
            Wdm.from_dict({**data, 'extra': 1})
        with pytest.raises(DataError):
            Wdm.from_dict({**data, 'label': 'Scratch'})
        assert Wdm.from_dict({**data, 'label': None}).label is None


class TestDatasetSplit:
    """测试数据划分模型"""

    def test_validate(self):
        """测试互斥且覆盖全部样本"""
        split = DatasetSplit(train=[0, 3], gmm_fit=[1], threshold=[2], test=[4], seed=5)
        split.validate(5)
        with pytest.raises(DataError):
            DatasetSplit(train=[0, 1], gmm_fit=[1], threshold=[2]).validate(3)
        with pytest.raises(DataError):
            DatasetSplit(train=[0], gmm_fit=[1]).validate(3)

    def test_dict_round_trip(self):
        """测试字典往返"""
        split = DatasetSplit(train=[0, 3], gmm_fit=[1], threshold=[2], test=[4], seed=5)
        assert DatasetSplit.from_dict(split.to_dict()) == split


class TestTrainingRun:
    """测试训练结果模型"""

    def test_epochs(self):
        """测试按 epoch 记录损失"""
        run = TrainingRun(samples=10)
        assert np.isnan(run.final_loss)
        run.add_epoch(1.5)
        run.add_epoch(0.75)
        assert run.epochs == 2
        assert run.final_loss == 0.75

    def test_mark_completed(self):
        """测试标记完成"""
        run = TrainingRun()
        run.mark_completed()
        assert run.end_time != ""
        assert run.duration != ""
        assert run.to_dict()['duration'] == run.duration


class TestOpenSetDecision:
    """测试开集分类结果"""

    def test_novel(self):
        """测试 Novel 标签"""
        decision = OpenSetDecision("w", NOVEL_LABEL, 3.5, 2.0, [0.1, 0.9])
        assert decision.is_novel
        record = decision.to_dict()
        assert record['novel'] is True
        assert record['id'] == "w"
        assert record['class_scores'] == [0.1, 0.9]

    def test_known(self):
        """测试已知类别"""
        assert not OpenSetDecision("w", 'Ring', 1.0, 2.0).is_novel


class TestHelpers:
    """测试数据集辅助函数"""

    def test_labels_of(self, sample_wdm):
        """测试无标签记为空串"""
        assert labels_of([sample_wdm, sample_wdm.with_defects([], label=None)]) == ['Ring', '']

    def test_index_by_id(self):
        """测试 id 索引与重复 id"""
        a, b = create_sample_wdm("a"), create_sample_wdm("b")
        assert index_by_id([a, b]) == {'a': 0, 'b': 1}
        with pytest.raises(DataError, match="a"):
            index_by_id([a, b, a])
