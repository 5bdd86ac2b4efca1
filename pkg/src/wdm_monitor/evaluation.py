"""闭集与开集评估

混淆矩阵、基于秩的 ROC AUC、1vsRest / 1vs1 (Hand-Till) AUC、
Mann-Whitney 与 Wilcoxon 符号秩检验、平均秩，以及留一法和 k 折交叉验证驱动。
"""

import logging
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .augmentation import AugmentationPolicy, ClassTransformSet, NoiseDist
from .config import NORMAL_CLASS
from .exceptions import ConfigError, ContractError, DataError
from .experiment import (
    STREAM_SCORING, ExperimentConfig, fit_open_set, score_samples, train_network,
)
from .layers import softmax
from .models import ClassLabel, Wdm, labels_of
from .network import Sscn
from .utils import make_progress, parallel_map
from .wdm import holdout_split, kfold_indices, split_dataset

logger = logging.getLogger(__name__)

EXACT_MANN_WHITNEY_MAX = 12
EXACT_WILCOXON_MAX = 20
ALTERNATIVES = ('greater', 'less', 'two-sided')


# ---------------------------------------------------------------- 混淆矩阵


@dataclass
class ConfusionMatrix:
    """行 = 真实类别，列 = 预测类别"""
    counts: np.ndarray
    class_names: List[str] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def row_sums(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else float('nan')

    def to_dict(self) -> Dict[str, Any]:
        return {'counts': self.counts.tolist(), 'class_names': list(self.class_names)}


def confusion_matrix(true: Sequence[int], predicted: Sequence[int], num_classes: int,
                     class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    true_arr = np.asarray(true, dtype=np.int64)
    pred_arr = np.asarray(predicted, dtype=np.int64)
    if true_arr.shape != pred_arr.shape:
        raise ContractError(f"真实标签 {true_arr.shape} 与预测标签 {pred_arr.shape} 长度不一致")
    for arr in (true_arr, pred_arr):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"类别下标必须在 [0, {num_classes}) 内")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true_arr, pred_arr), 1)
    names = list(class_names) if class_names is not None else [str(i) for i in range(num_classes)]
    return ConfusionMatrix(counts, names)


def class_accuracy(cm: ConfusionMatrix) -> np.ndarray:
    """每类准确率（对角线 / 行和）；没有测试样本的类别为 NaN"""
    rows = cm.row_sums.astype(np.float64)
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(rows > 0, np.diag(cm.counts) / rows, np.nan)


# ---------------------------------------------------------------- AUC


def _binary(labels: Any) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.dtype != bool:
        arr = arr.astype(np.int64)
        if not np.isin(arr, (0, 1)).all():
            raise DataError("二分类标签必须是 0/1 或布尔值")
        arr = arr.astype(bool)
    return arr


def roc_auc(scores: Any, labels: Any) -> float:
    """秩统计量形式的 AUC：P(正 > 负) + ½P(相等)"""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels).ravel()
    if s.shape != y.shape:
        raise ContractError(f"分数 {s.shape} 与标签 {y.shape} 长度不一致")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("计算 AUC 需要同时存在正负样本")
    ranks = stats.rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Any, labels: Any) -> Tuple[np.ndarray, np.ndarray]:
    """按阈值从高到低扫描得到 (FPR, TPR)，从 (0, 0) 开始"""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = _binary(labels).ravel()
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("计算 ROC 曲线需要同时存在正负样本")
    order = np.argsort(-s, kind='mergesort')
    s_sorted = s[order]
    tp = np.cumsum(y[order])
    fp = np.cumsum(~y[order])
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s_sorted.size - 1]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return fpr, tpr


def _check_multiclass(score_matrix: Any, labels: Any) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(score_matrix, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != y.size:
        raise ContractError(f"分数矩阵形状 {scores.shape} 与标签数 {y.size} 不匹配")
    c = scores.shape[1]
    if c < 2:
        raise DataError("多类 AUC 至少需要 2 个类别")
    missing = [k for k in range(c) if not np.any(y == k)]
    if missing:
        raise DataError(f"以下类别在评估数据中没有样本: {missing}")
    return scores, y


def auc_1vsrest(score_matrix: Any, labels: Any, class_freqs: Optional[Sequence[float]] = None) -> float:
    """按类别频率加权的一对其余 AUC"""
    scores, y = _check_multiclass(score_matrix, labels)
    c = scores.shape[1]
    if class_freqs is None:
        freqs = np.bincount(y, minlength=c) / y.size
    else:
        freqs = np.asarray(class_freqs, dtype=np.float64)
        if freqs.shape != (c,):
            raise ContractError(f"类别频率长度 {freqs.shape} 与类别数 {c} 不一致")
        freqs = freqs / freqs.sum()
    return float(sum(freqs[k] * roc_auc(scores[:, k], y == k) for k in range(c)))


def auc_1vs1(score_matrix: Any, labels: Any) -> float:
    """Hand-Till 多类 AUC：所有类别对 ½[Â(i|j) + Â(j|i)] 的平均"""
    scores, y = _check_multiclass(score_matrix, labels)
    c = scores.shape[1]
    total = 0.0
    for i, j in combinations(range(c), 2):
        mask = (y == i) | (y == j)
        a_ij = roc_auc(scores[mask, i], y[mask] == i)
        a_ji = roc_auc(scores[mask, j], y[mask] == j)
        total += 0.5 * (a_ij + a_ji)
    return float(2.0 * total / (c * (c - 1)))


# ---------------------------------------------------------------- 统计检验


def _tail_p(values: np.ndarray, observed: float, alternative: str, center: float) -> float:
    """枚举分布上的单侧/双侧尾概率"""
    tol = 1e-9
    if alternative == 'greater':
        return float(np.mean(values >= observed - tol))
    if alternative == 'less':
        return float(np.mean(values <= observed + tol))
    dev = abs(observed - center)
    return float(np.mean(np.abs(values - center) >= dev - tol))


def _normal_p(stat: float, mean: float, sd: float, alternative: str) -> float:
    if sd <= 0:
        return 1.0
    if alternative == 'greater':
        return float(stats.norm.sf((stat - mean - 0.5) / sd))
    if alternative == 'less':
        return float(stats.norm.cdf((stat - mean + 0.5) / sd))
    z = (abs(stat - mean) - 0.5) / sd
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def mann_whitney_test(scores_a: Any, scores_b: Any, alternative: str = 'greater',
                      method: str = 'auto') -> Tuple[float, float]:
    """Mann-Whitney U 检验，返回 (U_a, p)

    U_a = a 中大于 b 的样本对数 + ½ 相等对数；greater 时 p = P(U ≥ U_a)。
    n_a + n_b ≤ 12 时枚举全部分组（在合并样本的中秩上精确计算），否则用
    带结校正与连续性校正的正态近似。
    """
    if alternative not in ALTERNATIVES:
        raise ConfigError(f"alternative 必须是 {ALTERNATIVES} 之一: {alternative}")
    a = np.asarray(scores_a, dtype=np.float64).ravel()
    b = np.asarray(scores_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise DataError("Mann-Whitney 检验的两组样本都不能为空")
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    ranks = stats.rankdata(np.concatenate([a, b]))
    offset = n_a * (n_a + 1) / 2.0
    u = float(ranks[:n_a].sum() - offset)
    center = n_a * n_b / 2.0

    if method == 'exact' or (method == 'auto' and n <= EXACT_MANN_WHITNEY_MAX):
        all_u = np.asarray([ranks[list(idx)].sum() - offset for idx in combinations(range(n), n_a)])
        return u, _tail_p(all_u, u, alternative, center)
    if method not in ('auto', 'approx'):
        raise ConfigError(f"method 必须是 auto / exact / approx: {method}")

    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(((tie_counts ** 3) - tie_counts).sum()) / (n * (n - 1))
    var = n_a * n_b / 12.0 * ((n + 1) - tie_term)
    return u, _normal_p(u, center, math.sqrt(max(var, 0.0)), alternative)


def _signed_rank_distribution(doubled_ranks: np.ndarray) -> np.ndarray:
    """2W 在零假设下的精确分布（子集和计数 / 2^n）"""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts / counts.sum()


def wilcoxon_signed_rank(diffs: Any, alternative: str = 'greater',
                         method: str = 'auto') -> Tuple[float, float]:
    """Wilcoxon 符号秩检验，返回 (W+, p)

    零差值被丢弃；|d| 的秩取平均秩；greater 时 p = P(W ≥ W+)。
    n ≤ 20 时使用精确分布（有结时在平均秩上精确计算），否则正态近似。
    """
    if alternative not in ALTERNATIVES:
        raise ConfigError(f"alternative 必须是 {ALTERNATIVES} 之一: {alternative}")
    d = np.asarray(diffs, dtype=np.float64).ravel()
    if d.size == 0:
        raise DataError("Wilcoxon 检验需要至少一个差值")
    d = d[d != 0]
    if d.size == 0:
        raise DataError("全部差值为零，Wilcoxon 检验无定义")
    n = d.size
    ranks = stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    center = n * (n + 1) / 4.0

    if method == 'exact' or (method == 'auto' and n <= EXACT_WILCOXON_MAX):
        doubled = np.rint(2 * ranks).astype(np.int64)
        probs = _signed_rank_distribution(doubled)
        support = np.arange(probs.size) / 2.0
        tol = 1e-9
        if alternative == 'greater':
            p = probs[support >= w - tol].sum()
        elif alternative == 'less':
            p = probs[support <= w + tol].sum()
        else:
            p = probs[np.abs(support - center) >= abs(w - center) - tol].sum()
        return w, float(min(1.0, p))
    if method not in ('auto', 'approx'):
        raise ConfigError(f"method 必须是 auto / exact / approx: {method}")

    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
    return w, _normal_p(w, center, math.sqrt(max(var, 0.0)), alternative)


def average_rank(metric_table: Any, higher_is_better: bool = True) -> np.ndarray:
    """metric_table 形状 (方法数, 试验数)；每次试验按平均秩排名后对试验求均值"""
    table = np.asarray(metric_table, dtype=np.float64)
    if table.ndim != 2 or table.size == 0:
        raise DataError("平均秩需要非空的 (方法, 试验) 二维表")
    keyed = -table if higher_is_better else table
    ranks = np.apply_along_axis(stats.rankdata, 0, keyed)
    return ranks.mean(axis=1)


def compare_to_best(metric_table: np.ndarray, names: Sequence[str]) -> Tuple[str, Dict[str, float], Dict[str, float]]:
    """平均秩与最佳方法对其余方法的单侧 Wilcoxon p 值

    返回 (最佳方法, {方法: 平均秩}, {方法: p})；差值全为零时 p 记为 NaN。
    """
    metric_table = np.asarray(metric_table, dtype=np.float64)
    ranks = average_rank(metric_table)
    best = int(np.argmin(ranks))
    p_values: Dict[str, float] = {}
    for m, name in enumerate(names):
        if m == best:
            continue
        diffs = metric_table[best] - metric_table[m]
        try:
            _, p_values[name] = wilcoxon_signed_rank(diffs, 'greater')
        except DataError:
            logger.warning(f"{names[best]} 与 {name} 的指标完全相同，Wilcoxon p 记为 NaN")
            p_values[name] = float('nan')
    return names[best], {name: float(r) for name, r in zip(names, ranks)}, p_values


# ---------------------------------------------------------------- 闭集评估


@dataclass
class ClosedSetResult:
    """测试集上的闭集分类结果"""
    confusion: ConfusionMatrix
    class_accuracy: np.ndarray
    auc_1vsrest: float
    auc_1vs1: float
    wdm_ids: List[str]
    true: np.ndarray
    predicted: np.ndarray
    posteriors: np.ndarray

    @property
    def accuracy(self) -> float:
        return self.confusion.accuracy

    def summary(self) -> Dict[str, Any]:
        return {
            'accuracy': self.accuracy,
            'auc_1vsrest': self.auc_1vsrest,
            'auc_1vs1': self.auc_1vs1,
            'class_accuracy': {name: float(a) for name, a in
                               zip(self.confusion.class_names, self.class_accuracy)},
        }


def evaluate_closed_set(model: Sscn, dataset: Sequence[Wdm], indices: Sequence[int],
                        theta: ClassTransformSet, noise: Optional[NoiseDist], n_augment: int,
                        seed: int, workers: int = 1) -> ClosedSetResult:
    """在 A_w 上平均类别分数后取 argmax；AUC 使用平均分数的 SoftMax 后验"""
    if not indices:
        raise DataError("测试集为空")
    index = model.class_index()
    for i in indices:
        if dataset[i].label is None or dataset[i].label.value not in index:
            raise DataError(f"测试样本 {dataset[i].id} 的标签 {dataset[i].label} 不在网络类别中")
    _, mean_scores = score_samples(model, {}, dataset, indices, theta, noise, n_augment,
                                   seed, STREAM_SCORING, workers)
    true = np.asarray([index[dataset[i].label.value] for i in indices])
    predicted = mean_scores.argmax(axis=1)
    names = list(model.config.class_names or [str(k) for k in range(model.config.num_classes)])
    cm = confusion_matrix(true, predicted, model.config.num_classes, names)
    posteriors = softmax(mean_scores)
    return ClosedSetResult(
        confusion=cm,
        class_accuracy=class_accuracy(cm),
        auc_1vsrest=auc_1vsrest(posteriors, true),
        auc_1vs1=auc_1vs1(posteriors, true),
        wdm_ids=[dataset[i].id for i in indices],
        true=true,
        predicted=predicted,
        posteriors=posteriors,
    )


@dataclass
class CrossValidationReport:
    """k 折交叉验证：每折每种增强模式的闭集指标"""
    modes: List[str]
    folds: int
    class_names: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    ranks: Dict[str, Dict[str, float]] = field(default_factory=dict)
    wilcoxon: Dict[str, Dict[str, float]] = field(default_factory=dict)
    best: Dict[str, str] = field(default_factory=dict)

    def metric_table(self, metric: str) -> np.ndarray:
        """(模式数, 折数) 的指标表"""
        table = np.full((len(self.modes), self.folds), np.nan)
        for row in self.rows:
            table[self.modes.index(row['mode']), row['fold']] = row[metric]
        return table

    def summary_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for m, mode in enumerate(self.modes):
            row: Dict[str, Any] = {'mode': mode}
            for metric in ('accuracy', 'auc_1vsrest', 'auc_1vs1'):
                row[f'mean_{metric}'] = float(np.nanmean(self.metric_table(metric)[m]))
            for metric in ('auc_1vsrest', 'auc_1vs1'):
                row[f'rank_{metric}'] = self.ranks[metric][mode]
                row[f'wilcoxon_p_{metric}'] = self.wilcoxon[metric].get(mode, float('nan'))
            rows.append(row)
        return rows


def cross_validate(dataset: Sequence[Wdm], cfg: ExperimentConfig, modes: Optional[Sequence[str]] = None,
                   show_progress: bool = False) -> CrossValidationReport:
    """分层 k 折，每折每种增强模式训练一个 SSCN 并在测试折上评估"""
    modes = list(modes or cfg.cv.modes)
    labels = labels_of(dataset)
    classes = [label.value for label in ClassLabel if label.value in set(labels)]
    folds = kfold_indices(labels, cfg.cv.folds, cfg.seed)
    report = CrossValidationReport(modes=modes, folds=len(folds), class_names=classes)
    progress = make_progress(len(folds) * len(modes), "交叉验证", enabled=show_progress)

    for fold, (train_idx, test_idx) in enumerate(folds):
        for mode in modes:
            policy = AugmentationPolicy.from_dict({**cfg.augmentation.to_dict(), 'mode': mode})
            model, _, noise = train_network(cfg, dataset, train_idx, classes, policy)
            theta = policy.common_set(classes, model.config.grid_size)
            result = evaluate_closed_set(model, dataset, test_idx, theta, noise,
                                         cfg.scorer.n_augment, cfg.seed, cfg.workers)
            row: Dict[str, Any] = {'fold': fold, 'mode': mode, 'accuracy': result.accuracy,
                                   'auc_1vsrest': result.auc_1vsrest, 'auc_1vs1': result.auc_1vs1}
            for name, acc in zip(classes, result.class_accuracy):
                row[f'acc_{name}'] = float(acc)
            report.rows.append(row)
            logger.info(f"第 {fold + 1}/{len(folds)} 折 [{mode}]: 准确率 {result.accuracy:.2%}, "
                        f"1vs1-AUC {result.auc_1vs1:.4f}")
            progress.update()
    progress.finish()

    for metric in ('auc_1vsrest', 'auc_1vs1'):
        best, ranks, p_values = compare_to_best(report.metric_table(metric), modes)
        report.best[metric] = best
        report.ranks[metric] = ranks
        report.wilcoxon[metric] = p_values
    return report


# ---------------------------------------------------------------- 留一法


@dataclass
class HeldOutResult:
    """留出一个类别的一次实验"""
    novel_class: str
    rows: List[Dict[str, Any]]
    samples: List[Dict[str, Any]]
    audit: Dict[str, int]


@dataclass
class LooReport:
    """留一法报告：每个 (新类, 评分器) 一行，另附平均秩与 Wilcoxon p 值"""
    classes: List[str]
    scorers: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    samples: List[Dict[str, Any]] = field(default_factory=list)
    average_ranks: Dict[str, float] = field(default_factory=dict)
    wilcoxon: Dict[str, float] = field(default_factory=dict)
    best_scorer: str = ""

    def auc_table(self) -> np.ndarray:
        """(评分器数, 新类数) 的 AUC 表"""
        table = np.full((len(self.scorers), len(self.classes)), np.nan)
        for row in self.rows:
            table[self.scorers.index(row['scorer']), self.classes.index(row['novel_class'])] = row['auc']
        return table

    def summary_rows(self) -> List[Dict[str, Any]]:
        return [
            {
                'scorer': name,
                'average_rank': self.average_ranks[name],
                'wilcoxon_p': self.wilcoxon.get(name, float('nan')),
                'best': name == self.best_scorer,
            }
            for name in self.scorers
        ]


def _audit_leakage(dataset: Sequence[Wdm], novel_class: str, splits: Dict[str, Sequence[int]]) -> Dict[str, int]:
    """按 id 检查留出类别没有进入任何训练/拟合/阈值划分"""
    novel_ids = {w.id for w in dataset if w.label is not None and w.label.value == novel_class}
    counts = {}
    for name, indices in splits.items():
        leaked = [dataset[i].id for i in indices if dataset[i].id in novel_ids]
        if leaked:
            raise ContractError(f"留出类别 {novel_class} 泄漏到 {name} 划分: {leaked[:5]}")
        counts[name] = len(indices)
    return counts


def run_held_out(dataset: Sequence[Wdm], cfg: ExperimentConfig, novel_class: str) -> HeldOutResult:
    """留出 novel_class：在其余类别上训练并拟合评分器，再以 novel_class 为正类计算 AUC"""
    known_idx = [i for i, w in enumerate(dataset) if w.label.value != novel_class]
    novel_idx = [i for i, w in enumerate(dataset) if w.label.value == novel_class]
    if not novel_idx:
        raise DataError(f"数据集中没有类别 {novel_class} 的样本")

    dev_idx, test_idx = holdout_split(dataset, cfg.loo.test_fraction, cfg.seed, known_idx)
    split = split_dataset(dataset, cfg.split_fractions, cfg.seed, dev_idx)
    for name in ('gmm_fit', 'threshold'):
        if not getattr(split, name):
            raise DataError(f"留出 {novel_class} 后 {name} 划分为空（类别样本太少）")
    if not test_idx:
        raise DataError(f"留出 {novel_class} 后已知类别测试集为空")
    audit = _audit_leakage(dataset, novel_class, {'train': split.train, 'gmm_fit': split.gmm_fit,
                                                  'threshold': split.threshold})

    logger.info(f"留出类别 {novel_class}: 训练 {len(split.train)}, 拟合 {len(split.gmm_fit)}, "
                f"阈值 {len(split.threshold)}, 已知测试 {len(test_idx)}, 新类 {len(novel_idx)}")
    model, _, noise = train_network(cfg, dataset, split.train)
    open_models = fit_open_set(cfg, model, dataset, split, noise, cfg.loo.scorers)
    scorers = {name: m.scorer for name, m in open_models.items()}
    first = open_models[cfg.loo.scorers[0]]

    eval_idx = list(test_idx) + novel_idx
    is_novel = np.asarray([False] * len(test_idx) + [True] * len(novel_idx))
    novelty, _ = score_samples(model, scorers, dataset, eval_idx, first.theta, noise,
                               first.n_augment, cfg.seed, STREAM_SCORING, cfg.workers)

    rows = []
    samples = []
    for name in cfg.loo.scorers:
        s = novelty[name]
        eta = open_models[name].threshold.eta
        u, p = mann_whitney_test(s[is_novel], s[~is_novel], 'greater')
        rows.append({
            'novel_class': novel_class,
            'scorer': name,
            'auc': roc_auc(s, is_novel),
            'mw_u': u,
            'mw_p': p,
            'eta': eta,
            'fpr': float(np.mean(s[~is_novel] > eta)),
            'tpr': float(np.mean(s[is_novel] > eta)),
            'n_known': int((~is_novel).sum()),
            'n_novel': int(is_novel.sum()),
        })
        samples.extend(
            {'novel_class': novel_class, 'scorer': name, 'id': dataset[i].id,
             'is_novel': bool(flag), 'score': float(score)}
            for i, flag, score in zip(eval_idx, is_novel, s)
        )

    best = max(rows, key=lambda r: r['auc'])
    for row in rows:
        row['significant'] = bool(row is best and row['mw_p'] <= cfg.loo.significance)
    return HeldOutResult(novel_class, rows, samples, audit)


def leave_one_out_protocol(dataset: Sequence[Wdm], cfg: ExperimentConfig,
                           show_progress: bool = False) -> LooReport:
    """对每个缺陷类别（Normal 除外）做一次留出实验并汇总"""
    if any(w.label is None for w in dataset):
        raise DataError("留一法需要全部 WDM 带标签")
    present = [label.value for label in ClassLabel if label in {w.label for w in dataset}]
    if len(present) < 3 or NORMAL_CLASS not in present:
        raise DataError(f"留一法至少需要 3 个类别且包含 Normal，当前类别: {present}")
    held_out = list(cfg.loo.held_out) if cfg.loo.held_out else [c for c in present if c != NORMAL_CLASS]
    missing = [c for c in held_out if c not in present]
    if missing:
        raise DataError(f"留出类别不在数据集中: {missing}")

    progress = make_progress(len(held_out), "留一法", enabled=show_progress)

    def run(novel_class: str) -> HeldOutResult:
        result = run_held_out(dataset, cfg, novel_class)
        progress.update()
        return result

    results = parallel_map(run, held_out, cfg.workers)
    progress.finish()

    report = LooReport(classes=held_out, scorers=list(cfg.loo.scorers))
    for result in results:
        report.rows.extend(result.rows)
        report.samples.extend(result.samples)
    best, ranks, p_values = compare_to_best(report.auc_table(), report.scorers)
    report.best_scorer = best
    report.average_ranks = ranks
    report.wilcoxon = p_values
    logger.info(f"留一法完成: 最佳评分器 {best} (平均秩 {ranks[best]:.4f})")
    return report
