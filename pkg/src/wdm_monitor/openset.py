"""潜在空间上的新颖性评分器与开集分类器

所有新颖性分数都取 "越大越新颖" 的方向：
gmm（负对数似然）、softmax（-max p）、presoftmax（-max v）、sme（熵）、
openmax（Weibull CDF）、iforest（异常分数）、ci（超出置信区间的维数）。
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, special, stats

from .augmentation import ClassTransformSet, NoiseDist, make_test_batch
from .config import (
    ALPHA, CI_LAMBDA, DEFAULT_SEED, GMM_MAX_CONDITION, GMM_MAX_ITER, GMM_RIDGE_RATIO,
    GMM_TOL, IFOREST_SUBSAMPLE, IFOREST_TREES, NOVEL_LABEL, OPENMAX_TAIL_SIZE,
    SCORER_NAMES, TEST_AUGMENTATIONS, reject_unknown_keys, require,
)
from .exceptions import ConfigError, ContractError, DataError
from .layers import softmax
from .models import OpenSetDecision, Wdm
from .network import Sscn, embed
from .utils import load_json, rng_stream, save_json

logger = logging.getLogger(__name__)

EULER_GAMMA = 0.5772156649
DEGENERATE_WEIBULL_SHAPE = 50.0
SCALE_FLOOR = 1e-12
SIGMA_FLOOR = 1e-12


@dataclass
class ScorerConfig:
    """新颖性评分器配置"""
    name: str = 'gmm'
    alpha: float = ALPHA
    n_augment: int = TEST_AUGMENTATIONS
    gmm_init: str = 'class'
    gmm_tol: float = GMM_TOL
    gmm_max_iter: int = GMM_MAX_ITER
    fit_augment_copies: int = 0
    tail_size: int = OPENMAX_TAIL_SIZE
    ci_lambda: float = CI_LAMBDA
    iforest_trees: int = IFOREST_TREES
    iforest_subsample: int = IFOREST_SUBSAMPLE
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        require(self.name in SCORER_NAMES, f"未知评分器 {self.name!r}；可选: {', '.join(SCORER_NAMES)}")
        require(0 < self.alpha <= 1, f"alpha 必须在 (0, 1] 内: {self.alpha}")
        require(self.n_augment >= 1, f"n_augment 必须 ≥ 1: {self.n_augment}")
        require(self.gmm_init in ('class', 'farthest'), f"gmm_init 必须是 class 或 farthest: {self.gmm_init}")
        require(self.gmm_max_iter >= 1, "gmm_max_iter 必须 ≥ 1")
        require(self.fit_augment_copies >= 0, "fit_augment_copies 不能为负")
        require(self.tail_size >= 1, "tail_size 必须 ≥ 1")
        require(self.ci_lambda > 0, "ci_lambda 必须为正")
        require(self.iforest_trees >= 1 and self.iforest_subsample >= 2, "iforest 参数不合法")

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ScorerConfig':
        reject_unknown_keys('scorer', data, cls.__dataclass_fields__)
        return cls(**data)


# ---------------------------------------------------------------- GMM


@dataclass
class Gmm:
    """高斯混合模型 φ̂：每个分量对应一个已知类别"""
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    covariance_type: str = 'full'
    ridge: float = 0.0
    log_likelihood: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def k(self) -> int:
        return int(self.weights.shape[0])

    @property
    def d(self) -> int:
        return int(self.means.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'weights': self.weights.tolist(),
            'means': self.means.tolist(),
            'covariances': self.covariances.tolist(),
            'covariance_type': self.covariance_type,
            'ridge': self.ridge,
            'log_likelihood': list(self.log_likelihood),
            'converged': self.converged,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Gmm':
        return cls(
            weights=np.asarray(data['weights'], dtype=np.float64),
            means=np.asarray(data['means'], dtype=np.float64),
            covariances=np.asarray(data['covariances'], dtype=np.float64),
            covariance_type=data.get('covariance_type', 'full'),
            ridge=float(data.get('ridge', 0.0)),
            log_likelihood=list(data.get('log_likelihood', [])),
            converged=bool(data.get('converged', False)),
        )


def _component_log_density(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """(n, k) 的 log N(x; μ_i, Σ_i)，使用 Cholesky 分解"""
    n, d = x.shape
    out = np.empty((n, means.shape[0]))
    for i, (mu, cov) in enumerate(zip(means, covs)):
        chol = linalg.cholesky(cov, lower=True)
        z = linalg.solve_triangular(chol, (x - mu).T, lower=True)
        log_det = 2.0 * np.log(np.diag(chol)).sum()
        out[:, i] = -0.5 * (d * np.log(2 * np.pi) + log_det + (z * z).sum(axis=0))
    return out


def _farthest_point_means(x: np.ndarray, k: int) -> np.ndarray:
    center = x.mean(axis=0)
    chosen = [int(np.argmax(((x - center) ** 2).sum(axis=1)))]
    dist = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def _m_step(x: np.ndarray, resp: np.ndarray, prior: float, diagonal: bool,
            previous: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """带固定岭先验的 M 步：Σ_i = S_i + (prior / N_i) I"""
    n, d = x.shape
    nk = resp.sum(axis=0)
    weights = nk / n
    means = np.empty((resp.shape[1], d))
    covs = np.empty((resp.shape[1], d, d))
    for i in range(resp.shape[1]):
        if nk[i] < 1e-10:
            # 空分量沿用上一轮参数；初始轮退化为全局均值与协方差
            if previous is not None:
                means[i], covs[i] = previous[0][i], previous[1][i]
            else:
                means[i] = x.mean(axis=0)
                covs[i] = np.cov(x, rowvar=False, bias=True).reshape(d, d) + prior / n * np.eye(d)
            continue
        means[i] = resp[:, i] @ x / nk[i]
        diff = x - means[i]
        if diagonal:
            covs[i] = np.diag((resp[:, i] @ (diff * diff)) / nk[i])
        else:
            covs[i] = (resp[:, i, None] * diff).T @ diff / nk[i]
        covs[i] += (prior / nk[i]) * np.eye(d)
    return weights, means, covs


def _penalized_ll(x: np.ndarray, weights: np.ndarray, means: np.ndarray, covs: np.ndarray,
                  prior: float) -> Tuple[float, np.ndarray]:
    with np.errstate(divide='ignore'):
        log_w = np.log(weights)
    log_p = _component_log_density(x, means, covs) + log_w
    lse = special.logsumexp(log_p, axis=1)
    penalty = -0.5 * prior * sum(np.trace(np.linalg.inv(c)) for c in covs)
    return float(lse.sum() + penalty), np.exp(log_p - lse[:, None])


def _run_em(x: np.ndarray, resp: np.ndarray, prior: float, diagonal: bool, tol: float,
            max_iter: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[float], bool]:
    weights, means, covs = _m_step(x, resp, prior, diagonal)
    trace: List[float] = []
    converged = False
    for _ in range(max_iter):
        ll, resp = _penalized_ll(x, weights, means, covs, prior)
        if trace and abs(ll - trace[-1]) <= tol * max(1.0, abs(trace[-1])):
            trace.append(ll)
            converged = True
            break
        trace.append(ll)
        weights, means, covs = _m_step(x, resp, prior, diagonal, (means, covs))
    return weights, means, covs, trace, converged


def gmm_fit_em(latents: Any, k: int, init: str = 'class', labels: Optional[Sequence[Any]] = None,
               tol: float = GMM_TOL, max_iter: int = GMM_MAX_ITER,
               ridge_ratio: float = GMM_RIDGE_RATIO) -> Gmm:
    """EM 拟合 k 分量全协方差 GMM

    岭强度 ε = ridge_ratio × 平均对角方差，作为固定先验加入每个协方差，
    log_likelihood 记录带该先验的目标，逐次迭代不下降。
    条件数超过上限时退回对角协方差重新拟合。
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n, d = x.shape
    if d < 1:
        raise DataError("潜在向量维度必须 ≥ 1")
    if k < 1 or k > n:
        raise DataError(f"GMM 分量数 k={k} 必须在 [1, 样本数 {n}] 内")

    mean_var = float(x.var(axis=0).mean())
    ridge = ridge_ratio * mean_var
    if ridge <= 0:
        ridge = ridge_ratio
        logger.warning(f"GMM 拟合数据方差为零（全部相同），使用绝对岭 {ridge:g} 防止奇异")
    prior = ridge * n / k

    if init == 'class' and labels is not None:
        classes = sorted(set(labels), key=str)
        if len(classes) != k:
            raise DataError(f"按类别初始化需要 {k} 个类别，实际有 {len(classes)} 个")
        lab = np.asarray([classes.index(l) for l in labels])
        resp = np.eye(k)[lab]
    elif init in ('class', 'farthest'):
        means0 = _farthest_point_means(x, k)
        nearest = np.argmin(((x[:, None, :] - means0[None]) ** 2).sum(axis=2), axis=1)
        resp = np.eye(k)[nearest]
    else:
        raise ConfigError(f"未知 GMM 初始化方式: {init}")

    weights, means, covs, trace, converged = _run_em(x, resp, prior, False, tol, max_iter)
    cov_type = 'full'
    condition = max(np.linalg.cond(c) for c in covs)
    if not np.isfinite(condition) or condition > GMM_MAX_CONDITION:
        logger.warning(f"GMM 协方差条件数 {condition:.3g} 超过上限，退回对角协方差")
        weights, means, covs, trace, converged = _run_em(x, resp, prior, True, tol, max_iter)
        cov_type = 'diag'

    logger.info(f"GMM 拟合完成: k={k}, d={d}, {len(trace)} 次迭代, 目标 {trace[-1]:.4f}")
    return Gmm(weights, means, covs, cov_type, ridge, trace, converged)


def gmm_score_many(g: Gmm, x: Any) -> np.ndarray:
    """批量负对数似然 S = -log Σ a_i N(x; μ_i, Σ_i)"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != g.d:
        raise ContractError(f"GMM 维度 {g.d} 与输入维度 {arr.shape[1]} 不一致")
    with np.errstate(divide='ignore'):
        log_w = np.log(g.weights)
    return -special.logsumexp(_component_log_density(arr, g.means, g.covariances) + log_w, axis=1)


def gmm_score(g: Gmm, x: Any) -> float:
    """单个潜在向量的新颖性分数"""
    return float(gmm_score_many(g, x)[0])


# ---------------------------------------------------------------- 阈值


@dataclass
class CalibratedThreshold:
    """阈值 η：校准分数的经验 (1-α) 分位点"""
    eta: float
    alpha: float
    n_cal: int

    def is_novel(self, score: float) -> bool:
        return score > self.eta

    def to_dict(self) -> Dict[str, Any]:
        return {'eta': self.eta, 'alpha': self.alpha, 'n_cal': self.n_cal}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CalibratedThreshold':
        return cls(float(data['eta']), float(data['alpha']), int(data['n_cal']))


def calibrate_threshold(scores: Any, alpha: float = ALPHA) -> CalibratedThreshold:
    """η = 最小的校准分数 q，使 |{s ≥ q}| / n ≤ α；不存在时取最大分数"""
    s = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if s.size == 0:
        raise DataError("阈值校准需要至少一个分数")
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha 必须在 (0, 1] 内: {alpha}")
    n = s.size
    values = np.unique(s)
    at_or_above = n - np.searchsorted(s, values, side='left')
    ok = at_or_above <= alpha * n + 1e-9
    eta = float(values[int(np.argmax(ok))]) if ok.any() else float(s[-1])
    return CalibratedThreshold(eta=eta, alpha=alpha, n_cal=n)


# ---------------------------------------------------------------- SoftMax / PreSoftMax / SME


def baseline_scores(v: Any, p: Optional[Any] = None) -> Dict[str, float]:
    """softmax: -max p；presoftmax: -max v；sme: 后验熵"""
    v = np.asarray(v, dtype=np.float64)
    p = softmax(v) if p is None else np.asarray(p, dtype=np.float64)
    return {
        'softmax': float(-p.max()),
        'presoftmax': float(-v.max()),
        'sme': float(special.entr(p).sum()),
    }


# ---------------------------------------------------------------- OpenMax


@dataclass
class OpenMaxModel:
    """每类 MAV 与尾部距离的 Weibull 模型"""
    mavs: np.ndarray
    has_model: np.ndarray
    shapes: np.ndarray
    scales: np.ndarray
    tail_size: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mavs': self.mavs.tolist(),
            'has_model': self.has_model.tolist(),
            'shapes': self.shapes.tolist(),
            'scales': self.scales.tolist(),
            'tail_size': self.tail_size,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OpenMaxModel':
        return cls(
            mavs=np.asarray(data['mavs'], dtype=np.float64),
            has_model=np.asarray(data['has_model'], dtype=bool),
            shapes=np.asarray(data['shapes'], dtype=np.float64),
            scales=np.asarray(data['scales'], dtype=np.float64),
            tail_size=int(data['tail_size']),
        )


def _fit_weibull(tail: np.ndarray) -> Tuple[float, float]:
    """对尾部距离做 MLE（位置固定为 0）；退化时用大形状参数 + 尺度下限"""
    positive = tail[tail > 0]
    d0 = float(tail.max()) if tail.size else 0.0
    if positive.size < 2 or np.ptp(positive) <= 1e-12 * max(1.0, d0):
        return DEGENERATE_WEIBULL_SHAPE, max(d0, SCALE_FLOOR)
    try:
        shape, _, scale = stats.weibull_min.fit(positive, floc=0)
    except Exception as e:
        logger.warning(f"Weibull 拟合失败，改用退化模型: {e}")
        return DEGENERATE_WEIBULL_SHAPE, max(d0, SCALE_FLOOR)
    if not (np.isfinite(shape) and np.isfinite(scale)) or shape <= 0:
        return DEGENERATE_WEIBULL_SHAPE, max(d0, SCALE_FLOOR)
    return float(shape), float(max(scale, SCALE_FLOOR))


def openmax_fit(train_vs: Any, labels: Any, predictions: Any,
                tail_size: int = OPENMAX_TAIL_SIZE) -> OpenMaxModel:
    """只用被正确分类的训练样本的分数向量拟合 MAV 与 Weibull"""
    vs = np.asarray(train_vs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    c = vs.shape[1]
    mavs = np.zeros((c, c))
    has_model = np.zeros(c, dtype=bool)
    shapes = np.full(c, DEGENERATE_WEIBULL_SHAPE)
    scales = np.full(c, SCALE_FLOOR)

    for cls in range(c):
        correct = vs[(labels == cls) & (predictions == cls)]
        if correct.shape[0] == 0:
            logger.warning(f"OpenMax: 类别 {cls} 没有被正确分类的训练样本，已排除")
            continue
        if correct.shape[0] < tail_size:
            logger.debug(f"OpenMax: 类别 {cls} 只有 {correct.shape[0]} 个正确样本，尾部改用全部样本")
        mavs[cls] = correct.mean(axis=0)
        dist = np.linalg.norm(correct - mavs[cls], axis=1)
        tail = np.sort(dist)[-tail_size:]
        shapes[cls], scales[cls] = _fit_weibull(tail)
        has_model[cls] = True

    if not has_model.any():
        raise DataError("OpenMax: 没有任何类别有正确分类的训练样本")
    return OpenMaxModel(mavs, has_model, shapes, scales, tail_size)


def openmax_score_many(m: OpenMaxModel, vs: Any) -> np.ndarray:
    """Weibull CDF(到预测类 MAV 的距离)；预测类无模型时用最近的 MAV"""
    vs = np.atleast_2d(np.asarray(vs, dtype=np.float64))
    modeled = np.flatnonzero(m.has_model)
    out = np.empty(vs.shape[0])
    for r, v in enumerate(vs):
        cls = int(np.argmax(v))
        if not m.has_model[cls]:
            cls = int(modeled[np.argmin(np.linalg.norm(m.mavs[modeled] - v, axis=1))])
        dist = float(np.linalg.norm(v - m.mavs[cls]))
        out[r] = stats.weibull_min.cdf(dist, m.shapes[cls], loc=0.0, scale=m.scales[cls])
    return out


def openmax_score(m: OpenMaxModel, v: Any) -> float:
    return float(openmax_score_many(m, v)[0])


# ---------------------------------------------------------------- CI


@dataclass
class CiModel:
    """逐维均值/标准差置信区间"""
    mean: np.ndarray
    std: np.ndarray
    lam: float = CI_LAMBDA
    flagged: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist(), 'lam': self.lam,
                'flagged': list(self.flagged)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CiModel':
        return cls(np.asarray(data['mean'], dtype=np.float64), np.asarray(data['std'], dtype=np.float64),
                   float(data['lam']), [int(i) for i in data.get('flagged', [])])


def ci_fit(latents: Any, lam: float = CI_LAMBDA) -> CiModel:
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DataError("CI 拟合至少需要 2 个样本")
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1)
    flagged = [int(j) for j in np.flatnonzero(std < SIGMA_FLOOR)]
    if flagged:
        logger.warning(f"CI: {len(flagged)} 个维度方差为零，σ 下限取 {SIGMA_FLOOR:g}")
    return CiModel(mean, np.maximum(std, SIGMA_FLOOR), lam, flagged)


def ci_score_many(m: CiModel, x: Any) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if arr.shape[1] != m.mean.shape[0]:
        raise ContractError(f"CI 维度 {m.mean.shape[0]} 与输入维度 {arr.shape[1]} 不一致")
    return (np.abs(arr - m.mean) > m.lam * m.std).sum(axis=1).astype(np.float64)


def ci_score(m: CiModel, x: Any) -> int:
    """超出 μ̂ ± λσ̂ 的维数"""
    return int(ci_score_many(m, x)[0])


# ---------------------------------------------------------------- Isolation Forest


def average_path_length(n: int) -> float:
    """c(n) = 2H(n-1) - 2(n-1)/n，H(m) = ln m + γ；n ≤ 1 时为 0"""
    if n <= 1:
        return 0.0
    return 2.0 * (math.log(n - 1) + EULER_GAMMA) - 2.0 * (n - 1) / n


@dataclass
class IsolationTree:
    """数组形式的隔离树；feature = -1 表示叶子"""
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray

    def to_dict(self) -> Dict[str, Any]:
        return {k: getattr(self, k).tolist() for k in ('feature', 'threshold', 'left', 'right', 'size')}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'IsolationTree':
        return cls(
            feature=np.asarray(data['feature'], dtype=np.int64),
            threshold=np.asarray(data['threshold'], dtype=np.float64),
            left=np.asarray(data['left'], dtype=np.int64),
            right=np.asarray(data['right'], dtype=np.int64),
            size=np.asarray(data['size'], dtype=np.int64),
        )


@dataclass
class IsolationForest:
    """t 棵随机轴切分树，子样本大小 s"""
    trees: List[IsolationTree]
    subsample: int
    seed: int

    @property
    def normalizer(self) -> float:
        return average_path_length(self.subsample)

    def to_dict(self) -> Dict[str, Any]:
        return {'trees': [t.to_dict() for t in self.trees], 'subsample': self.subsample, 'seed': self.seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'IsolationForest':
        return cls([IsolationTree.from_dict(t) for t in data['trees']], int(data['subsample']), int(data['seed']))


def _grow_tree(x: np.ndarray, height_limit: int, rng: np.random.Generator) -> IsolationTree:
    feature: List[int] = []
    threshold: List[float] = []
    left: List[int] = []
    right: List[int] = []
    size: List[int] = []

    def new_node(n: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        return len(size) - 1

    root = new_node(x.shape[0])
    stack = [(root, np.arange(x.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        if depth >= height_limit or rows.size <= 1:
            continue
        sub = x[rows]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        candidates = np.flatnonzero(hi > lo)
        if candidates.size == 0:
            continue
        q = int(candidates[int(rng.integers(0, candidates.size))])
        split = float(rng.uniform(lo[q], hi[q]))
        go_left = sub[:, q] < split
        l_node = new_node(int(go_left.sum()))
        r_node = new_node(int((~go_left).sum()))
        feature[node], threshold[node] = q, split
        left[node], right[node] = l_node, r_node
        stack.append((r_node, rows[~go_left], depth + 1))
        stack.append((l_node, rows[go_left], depth + 1))

    return IsolationTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        size=np.asarray(size, dtype=np.int64),
    )


def iforest_fit(latents: Any, t: int = IFOREST_TREES, s: int = IFOREST_SUBSAMPLE,
                seed: int = DEFAULT_SEED) -> IsolationForest:
    """每棵树使用独立随机流，高度上限 ⌈log2 s⌉"""
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 2:
        raise DataError("Isolation Forest 至少需要 2 个样本")
    s = min(s, x.shape[0])
    height_limit = int(math.ceil(math.log2(s)))
    trees = []
    for tree_idx in range(t):
        rng = rng_stream(seed, 7, tree_idx)
        rows = rng.choice(x.shape[0], size=s, replace=False)
        trees.append(_grow_tree(x[rows], height_limit, rng))
    return IsolationForest(trees, s, seed)


def _path_lengths(tree: IsolationTree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(x.shape[0], dtype=np.int64)
    depth = np.zeros(x.shape[0])
    active = tree.feature[node] >= 0
    while active.any():
        idx = np.flatnonzero(active)
        feat = tree.feature[node[idx]]
        go_left = x[idx, feat] < tree.threshold[node[idx]]
        node[idx] = np.where(go_left, tree.left[node[idx]], tree.right[node[idx]])
        depth[idx] += 1
        active = tree.feature[node] >= 0
    leaf_sizes = tree.size[node]
    return depth + np.array([average_path_length(int(n)) for n in leaf_sizes])


def iforest_score_many(f: IsolationForest, x: Any) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mean_path = np.mean([_path_lengths(tree, arr) for tree in f.trees], axis=0)
    c = f.normalizer
    if c <= 0:
        return np.full(arr.shape[0], 0.5)
    return np.power(2.0, -mean_path / c)


def iforest_score(f: IsolationForest, x: Any) -> float:
    """2^(-E[h(x)] / c(s))"""
    return float(iforest_score_many(f, x)[0])


# ---------------------------------------------------------------- 统一评分接口


@dataclass
class NoveltyScorer:
    """按名称选择的已拟合评分器"""
    name: str
    model: Any = None

    def score(self, latents: np.ndarray, class_scores: np.ndarray) -> np.ndarray:
        """批量新颖性分数（越大越新颖）"""
        latents = np.atleast_2d(latents)
        class_scores = np.atleast_2d(class_scores)
        if self.name == 'gmm':
            return gmm_score_many(self.model, latents)
        if self.name in ('softmax', 'presoftmax', 'sme'):
            return np.asarray([baseline_scores(v)[self.name] for v in class_scores])
        if self.name == 'openmax':
            return openmax_score_many(self.model, class_scores)
        if self.name == 'ci':
            return ci_score_many(self.model, latents)
        if self.name == 'iforest':
            return iforest_score_many(self.model, latents)
        raise ConfigError(f"未知评分器 {self.name!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 'model': self.model.to_dict() if self.model is not None else None}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NoveltyScorer':
        name = data['name']
        loaders = {'gmm': Gmm, 'openmax': OpenMaxModel, 'ci': CiModel, 'iforest': IsolationForest}
        model_data = data.get('model')
        model = loaders[name].from_dict(model_data) if name in loaders and model_data else None
        return cls(name, model)


def fit_scorer(cfg: ScorerConfig, fit_latents: np.ndarray, fit_labels: Sequence[Any],
               train_scores: Optional[np.ndarray] = None,
               train_labels: Optional[Sequence[int]] = None,
               classes: Optional[Sequence[str]] = None) -> NoveltyScorer:
    """gmm / ci / iforest 用拟合集潜在向量；openmax 用训练集分数向量

    给出 classes 时 GMM 分量数固定为已知类别数，拟合集缺少某个类别时报数据错误。
    """
    name = cfg.name
    if name == 'gmm':
        present = {str(getattr(label, 'value', label)) for label in fit_labels}
        if classes is not None:
            missing = [c for c in classes if c not in present]
            if missing:
                raise DataError(f"GMM 拟合集缺少已知类别 {missing}，每个类别至少需要 1 个样本")
        k = len(classes) if classes is not None else len(present)
        return NoveltyScorer(name, gmm_fit_em(fit_latents, k, cfg.gmm_init, list(fit_labels),
                                              cfg.gmm_tol, cfg.gmm_max_iter))
    if name == 'ci':
        return NoveltyScorer(name, ci_fit(fit_latents, cfg.ci_lambda))
    if name == 'iforest':
        return NoveltyScorer(name, iforest_fit(fit_latents, cfg.iforest_trees, cfg.iforest_subsample, cfg.seed))
    if name == 'openmax':
        if train_scores is None or train_labels is None:
            raise ContractError("OpenMax 需要训练集分数向量与标签")
        preds = np.argmax(train_scores, axis=1)
        return NoveltyScorer(name, openmax_fit(train_scores, train_labels, preds, cfg.tail_size))
    return NoveltyScorer(name)


# ---------------------------------------------------------------- 开集分类器


@dataclass
class OpenSetModel:
    """训练好的网络 + 评分器 + 阈值 η + 测试变换集 Θ，实现 K(w)"""
    network: Sscn
    scorer: NoveltyScorer
    threshold: CalibratedThreshold
    theta: ClassTransformSet
    noise: Optional[NoiseDist] = None
    n_augment: int = TEST_AUGMENTATIONS

    def classify(self, w: Wdm, rng: np.random.Generator, eta: Optional[float] = None,
                 workers: int = 1) -> OpenSetDecision:
        return open_classify(self.network, self.scorer, self.threshold.eta if eta is None else eta,
                             w, self.n_augment, self.theta, rng, self.noise, workers)


def embed_augmented(network: Sscn, w: Wdm, n: int, theta: ClassTransformSet, rng: np.random.Generator,
                    noise: Optional[NoiseDist] = None, workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """A_w 中每个元素的 (latents, scores)，形状 (n, d) 与 (n, #L)

    Θ 只含恒等变换时 A_w 的 n 个元素相同，只计算一次。
    """
    if theta.is_identity:
        n = 1
    batch = make_test_batch(w, n, theta, noise, rng)
    return embed(network, batch, workers=workers)


def augmented_scores(network: Sscn, scorer: NoveltyScorer, w: Wdm, n: int, theta: ClassTransformSet,
                     rng: np.random.Generator, noise: Optional[NoiseDist] = None,
                     workers: int = 1) -> Tuple[float, np.ndarray]:
    """A_w 上的平均新颖性分数 S̄ 与平均类别分数"""
    latents, scores = embed_augmented(network, w, n, theta, rng, noise, workers)
    novelty = scorer.score(latents, scores)
    return float(np.mean(novelty)), scores.mean(axis=0)


def open_classify(network: Sscn, scorer: NoveltyScorer, eta: float, w: Wdm, n: int,
                  theta: ClassTransformSet, rng: np.random.Generator,
                  noise: Optional[NoiseDist] = None, workers: int = 1) -> OpenSetDecision:
    """S̄ > η 判为 Novel，否则取平均类别分数的 argmax（并列取最小下标）"""
    if n < 1:
        raise ContractError(f"增强数 N 必须 ≥ 1: {n}")
    start = time.perf_counter()
    s_bar, mean_scores = augmented_scores(network, scorer, w, n, theta, rng, noise, workers)
    if s_bar > eta:
        label = NOVEL_LABEL
    else:
        label = network.class_name(int(np.argmax(mean_scores)))
    return OpenSetDecision(
        wdm_id=w.id,
        label=label,
        novelty_score=s_bar,
        eta=float(eta),
        class_scores=mean_scores.tolist(),
        elapsed=time.perf_counter() - start,
    )


def save_scorer(path: Path, scorer: NoveltyScorer, threshold: CalibratedThreshold,
                theta: ClassTransformSet, noise: Optional[NoiseDist], n_augment: int,
                provenance: Optional[Dict[str, Any]] = None) -> None:
    """评分器产物（JSON）：名称、拟合参数、η、α、测试变换集与来源信息"""
    payload = {
        'scorer': scorer.to_dict(),
        'threshold': threshold.to_dict(),
        'theta': theta.to_dict(),
        'noise': noise.to_dict() if noise is not None else None,
        'n_augment': n_augment,
        'provenance': provenance or {},
    }
    save_json(payload, path)
    logger.info(f"评分器已保存: {path}")


def load_scorer(path: Path, network: Sscn) -> Tuple[OpenSetModel, Dict[str, Any]]:
    """读取评分器产物并与网络组装为 OpenSetModel"""
    payload = load_json(path)
    missing = [key for key in ('scorer', 'threshold', 'theta') if key not in payload]
    if missing:
        raise DataError(f"评分器文件缺少字段: {', '.join(missing)}")
    noise = NoiseDist.from_dict(payload['noise']) if payload.get('noise') else None
    model = OpenSetModel(
        network=network,
        scorer=NoveltyScorer.from_dict(payload['scorer']),
        threshold=CalibratedThreshold.from_dict(payload['threshold']),
        theta=ClassTransformSet.from_dict(payload['theta']),
        noise=noise,
        n_augment=int(payload.get('n_augment', TEST_AUGMENTATIONS)),
    )
    return model, payload.get('provenance', {})
