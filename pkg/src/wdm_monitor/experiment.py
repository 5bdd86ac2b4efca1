"""实验配置与训练/拟合流程

ExperimentConfig 把路径、合成数据、网络、训练、增强、评分器、留一法与交叉验证
配置组织在一个 JSON 文件中；环境变量 WDM_MONITOR_WORKERS / WDM_MONITOR_SEED
在读取文件后覆盖对应字段。
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .augmentation import (
    MODES, AugmentationPolicy, Augmenter, ClassTransformSet, NoiseDist, augment_for_training,
)
from .config import (
    DEFAULT_GRID_SIZE, DEFAULT_OUTPUT_DIR, DEFAULT_SEED, NORMAL_CLASS, RADIUS_RATIO,
    SCORER_NAMES, SPLIT_FRACTIONS, TEST_FRACTION, WORKERS, env_overrides,
    reject_unknown_keys, require, scaled_class_counts,
)
from .exceptions import ConfigError, DataError
from .models import ClassLabel, DatasetSplit, TrainingRun, Wdm
from .network import Sscn, SscnConfig, TrainConfig, build_network, embed, fit
from .openset import (
    NoveltyScorer, OpenSetModel, ScorerConfig, calibrate_threshold, embed_augmented, fit_scorer,
)
from .utils import load_json, parallel_map, rng_stream, stable_hash

logger = logging.getLogger(__name__)

DEFAULT_CLASSES = ['Normal', 'Ring', 'Slice', 'GeoScratch']

# 随机流编号（与 network / wdm / openset 中的编号互不重叠）
STREAM_CALIBRATION = 8
STREAM_SCORING = 9
STREAM_FIT_AUGMENT = 10


def check_class_names(section: str, names: Iterable[str]) -> None:
    """配置中的类别名必须合法（报配置错误而非数据错误）"""
    for name in names:
        try:
            ClassLabel.parse(name)
        except DataError as e:
            raise ConfigError(f"配置段 {section}: {e}") from e


@dataclass
class PathsConfig:
    """产物路径，相对路径以 output_dir 为根"""
    output_dir: str = str(DEFAULT_OUTPUT_DIR)
    dataset: str = "dataset.wdm.jsonl"
    manifest: str = "manifest.json"
    checkpoint: str = "model.ckpt"
    scorer: str = "scorer.json"
    reports: str = "reports"

    def resolve(self, name: str) -> Path:
        value = Path(getattr(self, name))
        if name == 'output_dir' or value.is_absolute():
            return value
        return Path(self.output_dir) / value

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PathsConfig':
        reject_unknown_keys('paths', data, cls.__dataclass_fields__)
        return cls(**{k: str(v) for k, v in data.items()})


@dataclass
class SynthConfig:
    """合成数据集配置

    counts 显式给出每类数量；否则 total 非空时按类别先验缩放，再否则每类 per_class 个。
    """
    classes: List[str] = field(default_factory=lambda: list(DEFAULT_CLASSES))
    per_class: int = 200
    total: Optional[int] = None
    counts: Optional[Dict[str, int]] = None
    grid_size: int = DEFAULT_GRID_SIZE
    radius_ratio: float = RADIUS_RATIO
    params: Dict[str, Dict[str, float]] = field(default_factory=dict)
    test_fraction: float = TEST_FRACTION

    def __post_init__(self) -> None:
        require(len(self.classes) >= 2, "至少需要 2 个类别")
        check_class_names('synth', self.classes)
        require(self.per_class >= 1, f"per_class 必须 ≥ 1: {self.per_class}")
        require(self.grid_size >= 2, f"grid_size 必须 ≥ 2: {self.grid_size}")
        require(0 < self.radius_ratio <= 0.5, f"radius_ratio 必须在 (0, 0.5] 内: {self.radius_ratio}")
        require(0 <= self.test_fraction < 1, f"test_fraction 必须在 [0, 1) 内: {self.test_fraction}")
        if self.counts is not None:
            check_class_names('synth.counts', self.counts)
            for name, count in self.counts.items():
                require(int(count) >= 0, f"类别 {name} 的数量不能为负")

    @property
    def radius(self) -> float:
        return self.radius_ratio * self.grid_size

    def class_counts(self) -> Dict[str, int]:
        if self.counts is not None:
            return {name: int(c) for name, c in self.counts.items()}
        if self.total is not None:
            return scaled_class_counts(self.total, self.classes)
        return {name: self.per_class for name in self.classes}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'classes': list(self.classes),
            'per_class': self.per_class,
            'total': self.total,
            'counts': dict(self.counts) if self.counts is not None else None,
            'grid_size': self.grid_size,
            'radius_ratio': self.radius_ratio,
            'params': {k: dict(v) for k, v in self.params.items()},
            'test_fraction': self.test_fraction,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SynthConfig':
        reject_unknown_keys('synth', data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass
class LooConfig:
    """留一法配置；held_out 为空时轮流留出除 Normal 外的全部类别"""
    scorers: List[str] = field(default_factory=lambda: list(SCORER_NAMES))
    held_out: Optional[List[str]] = None
    test_fraction: float = TEST_FRACTION
    significance: float = 0.05

    def __post_init__(self) -> None:
        require(bool(self.scorers), "scorers 不能为空")
        for name in self.scorers:
            require(name in SCORER_NAMES, f"未知评分器 {name!r}；可选: {', '.join(SCORER_NAMES)}")
        require(len(set(self.scorers)) == len(self.scorers), "scorers 中有重复项")
        if self.held_out is not None:
            check_class_names('loo.held_out', self.held_out)
            require(NORMAL_CLASS not in self.held_out, "Normal 类始终是已知类别，不能留出")
        require(0 < self.test_fraction < 1, f"test_fraction 必须在 (0, 1) 内: {self.test_fraction}")
        require(0 < self.significance < 1, "significance 必须在 (0, 1) 内")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scorers': list(self.scorers),
            'held_out': list(self.held_out) if self.held_out is not None else None,
            'test_fraction': self.test_fraction,
            'significance': self.significance,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LooConfig':
        reject_unknown_keys('loo', data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass
class CrossValidationConfig:
    """k 折交叉验证配置，modes 为要比较的增强模式"""
    folds: int = 10
    modes: List[str] = field(default_factory=lambda: list(MODES))

    def __post_init__(self) -> None:
        require(self.folds >= 2, f"folds 必须 ≥ 2: {self.folds}")
        require(bool(self.modes), "modes 不能为空")
        for mode in self.modes:
            require(mode in MODES, f"增强模式必须是 {MODES} 之一: {mode}")

    def to_dict(self) -> Dict[str, Any]:
        return {'folds': self.folds, 'modes': list(self.modes)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'CrossValidationConfig':
        reject_unknown_keys('cv', data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass
class ExperimentConfig:
    """完整实验配置"""
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: SscnConfig = field(default_factory=SscnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    loo: LooConfig = field(default_factory=LooConfig)
    cv: CrossValidationConfig = field(default_factory=CrossValidationConfig)
    split_fractions: List[float] = field(default_factory=lambda: list(SPLIT_FRACTIONS))
    seed: int = DEFAULT_SEED
    workers: int = WORKERS

    SECTIONS = {
        'paths': PathsConfig, 'synth': SynthConfig, 'network': SscnConfig, 'train': TrainConfig,
        'augmentation': AugmentationPolicy, 'scorer': ScorerConfig, 'loo': LooConfig,
        'cv': CrossValidationConfig,
    }

    def __post_init__(self) -> None:
        require(self.workers >= 1, f"workers 必须 ≥ 1: {self.workers}")
        require(len(self.split_fractions) == 3 and abs(sum(self.split_fractions) - 1.0) < 1e-9,
                f"split_fractions 必须是三个和为 1 的比例: {self.split_fractions}")

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {name: getattr(self, name).to_dict() for name in self.SECTIONS}
        data['split_fractions'] = list(self.split_fractions)
        data['seed'] = self.seed
        data['workers'] = self.workers
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        """从字典创建实例；缺省的配置段使用默认值"""
        reject_unknown_keys('config', data, list(cls.SECTIONS) + ['split_fractions', 'seed', 'workers'])
        kwargs: Dict[str, Any] = {}
        for name, section_cls in cls.SECTIONS.items():
            if name in data:
                kwargs[name] = section_cls.from_dict(data[name])
        for name in ('split_fractions', 'seed', 'workers'):
            if name in data:
                kwargs[name] = data[name]
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(f"配置无效: {e}")

    @classmethod
    def load(cls, path: Optional[Path] = None, apply_env: bool = True,
             overrides: Optional[Dict[str, Any]] = None) -> 'ExperimentConfig':
        """读取 JSON 配置（path 为空时使用默认值），再依次应用环境变量与命令行覆盖

        overrides 中值为字典的项与同名配置段逐字段合并。
        """
        data: Dict[str, Any] = {}
        if path is not None:
            try:
                data = load_json(path)
            except DataError as e:
                raise ConfigError(str(e))
        if apply_env:
            data.update(env_overrides())
        for key, value in (overrides or {}).items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        cfg = cls.from_dict(data)
        logger.debug(f"配置已加载: hash={config_hash(cfg)}, seed={cfg.seed}")
        return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    """规范 JSON 的 SHA-256 前 16 位"""
    return stable_hash(cfg.to_dict())


def provenance(cfg: ExperimentConfig, **extra: Any) -> Dict[str, Any]:
    """嵌入每个产物的来源信息"""
    record: Dict[str, Any] = {'config_hash': config_hash(cfg), 'seed': cfg.seed}
    record.update(extra)
    return record


# ---------------------------------------------------------------- 训练与拟合


def known_classes(dataset: Sequence[Wdm], indices: Sequence[int]) -> List[str]:
    """按 ClassLabel 声明顺序列出 indices 中出现的类别"""
    present = {dataset[i].label for i in indices}
    if None in present:
        raise DataError("训练数据中存在无标签的 WDM")
    return [label.value for label in ClassLabel if label in present]


def network_config_for(cfg: ExperimentConfig, classes: Sequence[str], grid_size: int) -> SscnConfig:
    """用类别清单与网格大小补全网络配置"""
    data = cfg.network.to_dict()
    data.update({'num_classes': len(classes), 'class_names': list(classes),
                 'grid_size': grid_size, 'seed': cfg.seed})
    return SscnConfig.from_dict(data)


def noise_distribution(policy: AugmentationPolicy, dataset: Sequence[Wdm],
                       indices: Sequence[int]) -> Optional[NoiseDist]:
    """训练集 Normal 样本的缺陷数经验分布（策略中显式给出时优先）"""
    if policy.mode != 'full':
        return None
    if policy.noise_counts:
        return NoiseDist(policy.noise_counts)
    normals = [i for i in indices if dataset[i].label == ClassLabel.NORMAL]
    if not normals:
        logger.warning("训练集中没有 Normal 样本，关闭噪声注入")
        return None
    return NoiseDist.from_dataset(dataset, normals)


def train_network(cfg: ExperimentConfig, dataset: Sequence[Wdm], train_idx: Sequence[int],
                  classes: Optional[Sequence[str]] = None,
                  policy: Optional[AugmentationPolicy] = None,
                  show_progress: bool = False) -> Tuple[Sscn, TrainingRun, Optional[NoiseDist]]:
    """在 train_idx 上训练 SSCN，返回 (网络, 训练记录, 噪声分布)"""
    if not train_idx:
        raise DataError("训练集为空")
    classes = list(classes) if classes is not None else known_classes(dataset, train_idx)
    grid_size = dataset[train_idx[0]].grid_size
    model = build_network(network_config_for(cfg, classes, grid_size))
    logger.info(f"网络结构:\n{model.summary()}")

    policy = policy or cfg.augmentation
    noise = noise_distribution(policy, dataset, train_idx)
    train_set = [dataset[i] for i in train_idx]
    augmenter = Augmenter(policy, grid_size, noise, pool=train_set) if policy.mode != 'none' else None
    train_cfg = TrainConfig.from_dict({**cfg.train.to_dict(), 'seed': cfg.seed})
    run = fit(model, train_set, train_cfg, augmenter, workers=cfg.workers, show_progress=show_progress)
    return model, run, noise


def fit_latents(cfg: ExperimentConfig, model: Sscn, dataset: Sequence[Wdm], fit_idx: Sequence[int],
                noise: Optional[NoiseDist]) -> Tuple[np.ndarray, List[str]]:
    """拟合集潜在向量；fit_augment_copies > 0 时追加按类别增强的副本"""
    samples = [dataset[i] for i in fit_idx]
    labels = [w.label.value for w in samples]
    grid_size = model.config.grid_size
    for copy in range(cfg.scorer.fit_augment_copies):
        for i in fit_idx:
            w = dataset[i]
            theta = cfg.augmentation.class_set(w.label, grid_size)
            rng = rng_stream(cfg.seed, STREAM_FIT_AUGMENT, copy, i)
            samples.append(augment_for_training(w, w.label, theta, noise, rng))
            labels.append(w.label.value)
    latents, _ = embed(model, samples, workers=cfg.workers)
    return latents, labels


def score_samples(model: Sscn, scorers: Dict[str, NoveltyScorer], dataset: Sequence[Wdm],
                  indices: Sequence[int], theta: ClassTransformSet, noise: Optional[NoiseDist],
                  n_augment: int, seed: int, stream: int,
                  workers: int = 1) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """对每个样本构造 A_w，返回各评分器的 S̄ 与平均类别分数

    每个样本使用 (seed, stream, 下标) 随机流，同一个 A_w 供全部评分器共用。
    """
    def one(i: int) -> Tuple[Dict[str, float], np.ndarray]:
        rng = rng_stream(seed, stream, i)
        latents, scores = embed_augmented(model, dataset[i], n_augment, theta, rng, noise)
        return ({name: float(np.mean(s.score(latents, scores))) for name, s in scorers.items()},
                scores.mean(axis=0))

    results = parallel_map(one, list(indices), workers)
    novelty = {name: np.asarray([r[0][name] for r in results]) for name in scorers}
    mean_scores = (np.stack([r[1] for r in results]) if results
                   else np.zeros((0, model.config.num_classes)))
    return novelty, mean_scores


def fit_open_set(cfg: ExperimentConfig, model: Sscn, dataset: Sequence[Wdm], split: DatasetSplit,
                 noise: Optional[NoiseDist], scorer_names: Optional[Sequence[str]] = None,
                 ) -> Dict[str, OpenSetModel]:
    """拟合评分器并在 threshold 划分上校准 η，返回 {评分器名: OpenSetModel}"""
    scorer_names = list(scorer_names or [cfg.scorer.name])
    if not split.gmm_fit:
        raise DataError("gmm_fit 划分为空，无法拟合新颖性评分器")
    if not split.threshold:
        raise DataError("threshold 划分为空，无法校准阈值")
    classes = list(model.config.class_names or [])
    theta = cfg.augmentation.common_set(classes, model.config.grid_size)

    latents, labels = fit_latents(cfg, model, dataset, split.gmm_fit, noise)
    train_scores, train_labels = None, None
    if 'openmax' in scorer_names:
        _, train_scores = embed(model, [dataset[i] for i in split.train], workers=cfg.workers)
        index = model.class_index()
        train_labels = [index[dataset[i].label.value] for i in split.train]

    scorers: Dict[str, NoveltyScorer] = {}
    for name in scorer_names:
        scorer_cfg = ScorerConfig.from_dict({**cfg.scorer.to_dict(), 'name': name, 'seed': cfg.seed})
        scorers[name] = fit_scorer(scorer_cfg, latents, labels, train_scores, train_labels, classes)
        logger.info(f"评分器 {name} 拟合完成")

    cal_scores, _ = score_samples(model, scorers, dataset, split.threshold, theta, noise,
                                  cfg.scorer.n_augment, cfg.seed, STREAM_CALIBRATION, cfg.workers)
    models: Dict[str, OpenSetModel] = {}
    for name, scorer in scorers.items():
        threshold = calibrate_threshold(cal_scores[name], cfg.scorer.alpha)
        logger.info(f"评分器 {name}: η={threshold.eta:.6g} (α={threshold.alpha}, n={threshold.n_cal})")
        models[name] = OpenSetModel(model, scorer, threshold, theta, noise, cfg.scorer.n_augment)
    return models
