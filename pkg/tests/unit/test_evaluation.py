"""测试评估统计量"""

from itertools import product

import numpy as np
import pytest

from wdm_monitor.evaluation import (
    _audit_leakage, auc_1vs1, auc_1vsrest, average_rank, class_accuracy, compare_to_best,
    confusion_matrix, mann_whitney_test, roc_auc, roc_curve, wilcoxon_signed_rank,
)
from wdm_monitor.exceptions import ConfigError, ContractError, DataError
from tests.fixtures.sample_data import (
    LOO_AUC_TABLE, LOO_AVERAGE_RANKS, LOO_SCORERS, create_sample_wdm,
)


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg))
    return total / (len(pos) * len(neg))


# 类别 0 完全可分，类别 1、2 有交叠
MIXED_SCORES = np.array([
    [0.9, 0.05, 0.05],
    [0.8, 0.1, 0.1],
    [0.3, 0.6, 0.1],
    [0.5, 0.1, 0.4],
    [0.2, 0.2, 0.6],
    [0.6, 0.1, 0.3],
])
MIXED_LABELS = np.array([0, 0, 1, 1, 2, 2])


class TestConfusionMatrix:
    """测试混淆矩阵"""

    def test_counts(self, closed_set_data):
        """测试 argmax 预测的计数与准确率"""
        true, scores = closed_set_data
        cm = confusion_matrix(true, scores.argmax(axis=1), 3, ['Normal', 'Ring', 'Slice'])
        assert np.array_equal(cm.counts, np.diag([2, 2, 2]))
        assert cm.accuracy == 1.0
        assert cm.row_sums.tolist() == [2, 2, 2]
        assert cm.to_dict()['class_names'] == ['Normal', 'Ring', 'Slice']

    def test_off_diagonal(self):
        """测试行为真实类别、列为预测类别"""
        cm = confusion_matrix([0, 0, 1], [1, 0, 1], 2)
        assert cm.counts.tolist() == [[1, 1], [0, 1]]
        assert cm.accuracy == pytest.approx(2 / 3)
        assert cm.class_names == ['0', '1']

    def test_class_accuracy_empty_row(self):
        """测试没有样本的类别准确率为 NaN"""
        cm = confusion_matrix([0, 0, 2], [0, 1, 2], 3)
        acc = class_accuracy(cm)
        assert acc[0] == 0.5
        assert np.isnan(acc[1])
        assert acc[2] == 1.0

    def test_invalid_input(self):
        """测试长度不一致与越界下标"""
        with pytest.raises(ContractError):
            confusion_matrix([0, 1], [0], 2)
        with pytest.raises(ContractError):
            confusion_matrix([0, 3], [0, 1], 2)


class TestRocAuc:
    """测试二分类 AUC 与 ROC 曲线"""

    def test_perfect_separation(self):
        """测试完全可分时 AUC 为 1"""
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [0, 0, 1, 1]) == 0.0

    def test_all_equal(self):
        """测试分数全相等时 AUC 为 0.5"""
        assert roc_auc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5

    def test_tie_counts_half(self):
        """测试正类 {3, 1} 对负类 {2} 的 AUC 为 0.5"""
        assert roc_auc([3.0, 1.0, 2.0], [True, True, False]) == 0.5

    def test_matches_pair_counting(self, rng):
        """测试与逐对计数的结果一致（含大量相等分数）"""
        for _ in range(50):
            n = int(rng.integers(4, 30))
            scores = rng.integers(0, 5, size=n).astype(float)
            labels = rng.random(n) < 0.5
            labels[0], labels[1] = True, False
            assert roc_auc(scores, labels) == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)

    def test_monotone_invariance(self, rng):
        """测试严格单调变换不改变 AUC"""
        scores = rng.normal(size=40)
        labels = np.arange(40) % 3 == 0
        assert roc_auc(np.exp(scores), labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)

    def test_single_class(self):
        """测试只有一个类别时报错"""
        with pytest.raises(DataError):
            roc_auc([0.1, 0.2], [1, 1])
        with pytest.raises(DataError):
            roc_auc([0.1, 0.2], [0, 2])

    def test_curve(self, rng):
        """测试 ROC 曲线端点、单调性及梯形面积等于 AUC"""
        scores = rng.integers(0, 8, size=60).astype(float)
        labels = rng.random(60) < 0.4
        fpr, tpr = roc_curve(scores, labels)
        assert (fpr[0], tpr[0]) == (0.0, 0.0)
        assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
        area = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
        assert area == pytest.approx(roc_auc(scores, labels), abs=1e-12)


class TestMulticlassAuc:
    """测试 1vsRest 与 1vs1 多类 AUC"""

    def test_perfect(self, closed_set_data):
        """测试完全可分的分数矩阵两种 AUC 都为 1"""
        true, scores = closed_set_data
        assert auc_1vsrest(scores, true) == 1.0
        assert auc_1vs1(scores, true) == 1.0

    def test_uniform_random(self, rng):
        """测试均匀随机分数的 1vsRest AUC 接近 0.5"""
        labels = np.repeat([0, 1, 2], 1000)
        scores = rng.random((3000, 3))
        assert auc_1vsrest(scores, labels) == pytest.approx(0.5, abs=0.03)
        assert auc_1vs1(scores, labels) == pytest.approx(0.5, abs=0.03)

    def test_rest_weighting(self):
        """测试 1vsRest 按类别频率加权"""
        assert auc_1vsrest(MIXED_SCORES, MIXED_LABELS) == pytest.approx((1.0 + 0.75 + 0.875) / 3)
        assert auc_1vsrest(MIXED_SCORES, MIXED_LABELS, class_freqs=[0, 1, 0]) == pytest.approx(0.75)
        assert auc_1vsrest(MIXED_SCORES, MIXED_LABELS, class_freqs=[0, 0, 2]) == pytest.approx(0.875)

    def test_duplication(self):
        """测试复制类别 0 的样本会改变 1vsRest，但不改变 1vs1"""
        idx = np.r_[np.arange(6), [0, 1, 0, 1]]
        scores, labels = MIXED_SCORES[idx], MIXED_LABELS[idx]
        assert auc_1vsrest(scores, labels) == pytest.approx(0.95)
        assert auc_1vsrest(scores, labels) != pytest.approx(auc_1vsrest(MIXED_SCORES, MIXED_LABELS))
        assert auc_1vs1(scores, labels) == pytest.approx(auc_1vs1(MIXED_SCORES, MIXED_LABELS), abs=1e-12)

    def test_two_class_reduction(self, rng):
        """测试两类时 1vs1 等于两个方向二分类 AUC 的均值"""
        scores = rng.random((30, 2))
        labels = np.arange(30) % 2
        expected = 0.5 * (roc_auc(scores[:, 0], labels == 0) + roc_auc(scores[:, 1], labels == 1))
        assert auc_1vs1(scores, labels) == pytest.approx(expected, abs=1e-12)

    def test_missing_class(self):
        """测试评估数据缺少某个类别时报错"""
        with pytest.raises(DataError):
            auc_1vs1(MIXED_SCORES, [0, 0, 1, 1, 1, 1])
        with pytest.raises(DataError):
            auc_1vsrest(MIXED_SCORES, [0, 0, 0, 1, 1, 1])

    def test_shape_mismatch(self):
        """测试分数矩阵与标签数量不一致"""
        with pytest.raises(ContractError):
            auc_1vs1(MIXED_SCORES, [0, 1, 2])
        with pytest.raises(ContractError):
            auc_1vsrest(MIXED_SCORES, MIXED_LABELS, class_freqs=[1, 1])


class TestMannWhitney:
    """测试 Mann-Whitney U 检验"""

    def test_complete_separation(self):
        """测试 {4,5,6} 对 {1,2,3}：U=9，精确 p=1/20"""
        u, p = mann_whitney_test([4, 5, 6], [1, 2, 3])
        assert u == 9.0
        assert p == pytest.approx(0.05)

    def test_identical_samples(self):
        """测试两组相同样本时 U 位于中心，双侧 p=1"""
        u, p = mann_whitney_test([1, 2, 3], [1, 2, 3], alternative='greater')
        assert u == 4.5
        assert p >= 0.5
        _, p_two = mann_whitney_test([1, 2, 3], [1, 2, 3], alternative='two-sided')
        assert p_two == pytest.approx(1.0)

    def test_swap(self, rng):
        """测试交换两组后 greater 的 p 等于原来 less 的 p"""
        a = rng.normal(0.5, 1.0, 5)
        b = rng.normal(0.0, 1.0, 6)
        u_ab, _ = mann_whitney_test(a, b)
        u_ba, p_ba = mann_whitney_test(b, a, alternative='greater')
        _, p_less = mann_whitney_test(a, b, alternative='less')
        assert u_ab + u_ba == pytest.approx(30.0)
        assert p_ba == pytest.approx(p_less, abs=1e-12)

    def test_u_matches_auc(self, rng):
        """测试 U / (n_a n_b) 等于把 a 当作正类的 AUC"""
        a = rng.integers(0, 6, 25).astype(float)
        b = rng.integers(0, 6, 30).astype(float)
        u, _ = mann_whitney_test(a, b)
        labels = np.r_[np.ones(25, bool), np.zeros(30, bool)]
        assert u / (25 * 30) == pytest.approx(roc_auc(np.r_[a, b], labels), abs=1e-12)

    def test_approximation_close_to_exact(self, rng):
        """测试 10 对 10 时正态近似与精确 p 接近"""
        a = rng.normal(0.8, 1.0, 10)
        b = rng.normal(0.0, 1.0, 10)
        _, p_exact = mann_whitney_test(a, b, method='exact')
        _, p_approx = mann_whitney_test(a, b, method='approx')
        assert p_approx == pytest.approx(p_exact, abs=0.01)

    def test_invalid(self):
        """测试空样本与非法参数"""
        with pytest.raises(DataError):
            mann_whitney_test([], [1.0])
        with pytest.raises(ConfigError):
            mann_whitney_test([1.0], [2.0], alternative='bigger')
        with pytest.raises(ConfigError):
            mann_whitney_test(np.arange(10), np.arange(10), method='bootstrap')


class TestWilcoxon:
    """测试 Wilcoxon 符号秩检验"""

    @pytest.mark.parametrize("n", [10, 12])
    def test_all_positive(self, n):
        """测试全部差值为正时精确 p = 2^-n"""
        w, p = wilcoxon_signed_rank(np.arange(1, n + 1) * 0.01)
        assert w == n * (n + 1) / 2
        assert p == pytest.approx(2.0 ** -n, rel=1e-9)

    def test_symmetric(self):
        """测试正负对称的差值：W+ 在中心，双侧 p=1"""
        diffs = [1, -1, 2, -2, 3, -3]
        w, p = wilcoxon_signed_rank(diffs)
        assert w == 10.5
        assert p >= 0.5
        _, p_two = wilcoxon_signed_rank(diffs, alternative='two-sided')
        assert p_two == pytest.approx(1.0)

    def test_zeros_dropped(self):
        """测试零差值被丢弃"""
        assert wilcoxon_signed_rank([0, 0, 1, 2]) == wilcoxon_signed_rank([1, 2])

    def test_approximation_close_to_exact(self):
        """测试 n=20 时正态近似与精确 p 相差不超过 0.005"""
        diffs = np.arange(1, 21, dtype=float)
        diffs[[3, 17, 18, 19]] *= -1
        w, p_exact = wilcoxon_signed_rank(diffs, method='exact')
        _, p_approx = wilcoxon_signed_rank(diffs, method='approx')
        assert w == 149.0
        assert 0.03 < p_exact < 0.08
        assert p_approx == pytest.approx(p_exact, abs=0.005)

    def test_degenerate(self):
        """测试全零或空差值时报错"""
        with pytest.raises(DataError):
            wilcoxon_signed_rank([0.0, 0.0, 0.0])
        with pytest.raises(DataError):
            wilcoxon_signed_rank([])


class TestAverageRank:
    """测试平均秩与最佳方法比较"""

    def test_always_best(self):
        """测试每次试验都最好的方法平均秩为 1"""
        table = np.array([[0.9, 0.8, 0.95], [0.5, 0.4, 0.6], [0.1, 0.2, 0.3]])
        assert average_rank(table).tolist() == [1.0, 2.0, 3.0]
        assert average_rank(table, higher_is_better=False).tolist() == [3.0, 2.0, 1.0]

    def test_ties(self):
        """测试并列时取平均秩"""
        assert average_rank([[0.7], [0.7], [0.1]]).tolist() == [1.5, 1.5, 3.0]

    def test_loo_table(self):
        """测试 12 个留出类别 × 7 个评分器的平均秩"""
        ranks = average_rank(np.asarray(LOO_AUC_TABLE).T)
        assert np.allclose(ranks, LOO_AVERAGE_RANKS, atol=1e-4)

    def test_compare_to_best(self):
        """测试最佳评分器及其对其余评分器的单侧 p 值"""
        best, ranks, p_values = compare_to_best(np.asarray(LOO_AUC_TABLE).T, LOO_SCORERS)
        assert best == 'GMM'
        assert ranks['GMM'] == pytest.approx(23 / 12)
        assert set(p_values) == set(LOO_SCORERS) - {'GMM'}
        assert all(0.0 < p <= 1.0 for p in p_values.values())
        # GMM 在 12 个类别中有 10 个优于 SME，W- = 1 + 2
        assert p_values['SME'] < 0.01

    def test_identical_methods(self):
        """测试与最佳方法完全相同的方法 p 为 NaN"""
        table = np.array([[0.9, 0.8, 0.7], [0.9, 0.8, 0.7], [0.1, 0.2, 0.3]])
        best, _, p_values = compare_to_best(table, ['a', 'b', 'c'])
        assert best == 'a'
        assert np.isnan(p_values['b'])
        assert p_values['c'] == pytest.approx(1 / 8)

    def test_empty(self):
        """测试空表报错"""
        with pytest.raises(DataError):
            average_rank(np.zeros((0, 3)))


class TestLeakageAudit:
    """测试留出类别的泄漏检查"""

    def test_clean_and_leaking(self):
        """测试干净划分返回计数，泄漏时报错"""
        dataset = [create_sample_wdm(f"w-{i}", label=label)
                   for i, label in enumerate(['Normal', 'Ring', 'Slice', 'Ring'])]
        counts = _audit_leakage(dataset, 'Ring', {'train': [0, 2], 'threshold': [0]})
        assert counts == {'train': 2, 'threshold': 1}
        with pytest.raises(ContractError):
            _audit_leakage(dataset, 'Ring', {'train': [0, 3]})
