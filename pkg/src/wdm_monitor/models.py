"""数据模型"""

from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from .config import NOVEL_LABEL
from .exceptions import CoordinateRangeError, DataError


class ClassLabel(str, Enum):
    """WDM 类别（封闭枚举，按名称序列化）"""

    BASKETBALL = 'BasketBall'
    CLUSTER_BIG = 'ClusterBig'
    CLUSTER_SMALL = 'ClusterSmall'
    DONUT = 'Donut'
    FINGERPRINTS = 'Fingerprints'
    GEO_SCRATCH = 'GeoScratch'
    GRID = 'Grid'
    HALF_MOON = 'HalfMoon'
    INCOMPLETE = 'Incomplete'
    NORMAL = 'Normal'
    RING = 'Ring'
    SLICE = 'Slice'
    ZIGZAG = 'ZigZag'

    @classmethod
    def names(cls) -> List[str]:
        """全部合法名称"""
        return [member.value for member in cls]

    @classmethod
    def parse(cls, name: str) -> 'ClassLabel':
        """按名称解析，未知名称报错并列出合法名称"""
        try:
            return cls(name)
        except ValueError:
            raise DataError(f"未知类别 {name!r}；合法类别: {', '.join(cls.names())}")

    def __str__(self) -> str:
        return self.value


def _normalize_defects(defects: Any, grid_size: int) -> np.ndarray:
    """转为去重、按 (i, j) 排序的 int64 数组，并检查范围"""
    arr = np.asarray(defects, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"缺陷坐标必须是 [[i, j], ...] 形式，实际形状 {arr.shape}")
    bad = np.flatnonzero(((arr < 0) | (arr >= grid_size)).any(axis=1))
    if bad.size:
        raise CoordinateRangeError(arr[bad[0]], grid_size)
    return np.unique(arr, axis=0)


@dataclass(eq=False)
class Wdm:
    """晶圆缺陷图（Wafer Defect Map）

    defects 为 (n, 2) 的 int64 数组，去重且按 (i, j) 排序；晶圆圆心位于网格中心。
    """
    id: str
    grid_size: int
    radius: float
    defects: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    label: Optional[ClassLabel] = None

    def __post_init__(self) -> None:
        """规范化坐标与标签"""
        if self.grid_size < 1:
            raise DataError(f"网格大小必须为正整数: {self.grid_size}")
        if self.radius <= 0:
            raise DataError(f"晶圆半径必须为正: {self.radius}")
        self.defects = _normalize_defects(self.defects, self.grid_size)
        if self.label is not None and not isinstance(self.label, ClassLabel):
            self.label = ClassLabel.parse(self.label)

    @property
    def center(self) -> float:
        """网格中心坐标（两个维度相同）"""
        return (self.grid_size - 1) / 2.0

    @property
    def num_defects(self) -> int:
        return int(self.defects.shape[0])

    def radii(self) -> np.ndarray:
        """各缺陷到圆心的距离"""
        return np.hypot(self.defects[:, 0] - self.center, self.defects[:, 1] - self.center)

    def outside_disk(self) -> int:
        """落在晶圆外的缺陷数"""
        return int(np.count_nonzero(self.radii() > self.radius + 1e-9))

    def with_defects(self, defects: Any, label: Any = ...) -> 'Wdm':
        """保留元数据，替换缺陷集合"""
        return Wdm(
            id=self.id,
            grid_size=self.grid_size,
            radius=self.radius,
            defects=defects,
            label=self.label if label is ... else label,
        )

    def to_sparse(self) -> Any:
        """转为单通道稀疏张量"""
        from .sparse_tensor import SparseTensor
        return SparseTensor.from_points(self.defects, self.grid_size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Wdm):
            return NotImplemented
        return (
            self.id == other.id
            and self.grid_size == other.grid_size
            and self.radius == other.radius
            and self.label == other.label
            and np.array_equal(self.defects, other.defects)
        )

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典（JSONL 行格式）"""
        return {
            'id': self.id,
            'k': int(self.grid_size),
            'radius': float(self.radius),
            'label': self.label.value if self.label is not None else None,
            'defects': self.defects.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Wdm':
        """从字典创建实例"""
        missing = [key for key in ('id', 'k', 'radius', 'defects') if key not in data]
        if missing:
            raise DataError(f"缺少字段: {', '.join(missing)}")
        unknown = sorted(set(data) - {'id', 'k', 'radius', 'label', 'defects'})
        if unknown:
            raise DataError(f"未知字段: {', '.join(unknown)}")
        label = data.get('label')
        return cls(
            id=str(data['id']),
            grid_size=int(data['k']),
            radius=float(data['radius']),
            defects=data['defects'],
            label=ClassLabel.parse(label) if label is not None else None,
        )


@dataclass
class DatasetSplit:
    """分层划分结果（索引列表）"""
    train: List[int] = field(default_factory=list)
    gmm_fit: List[int] = field(default_factory=list)
    threshold: List[int] = field(default_factory=list)
    test: List[int] = field(default_factory=list)
    seed: int = 0

    def all_indices(self) -> List[int]:
        return self.train + self.gmm_fit + self.threshold + self.test

    def validate(self, n: int) -> None:
        """检查互斥且覆盖全部样本"""
        indices = self.all_indices()
        if len(indices) != len(set(indices)):
            raise DataError("数据划分存在重叠样本")
        if sorted(indices) != list(range(n)):
            raise DataError(f"数据划分未覆盖全部 {n} 个样本")

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return {
            'train': list(self.train),
            'gmm_fit': list(self.gmm_fit),
            'threshold': list(self.threshold),
            'test': list(self.test),
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DatasetSplit':
        """从字典创建实例"""
        return cls(
            train=[int(i) for i in data.get('train', [])],
            gmm_fit=[int(i) for i in data.get('gmm_fit', [])],
            threshold=[int(i) for i in data.get('threshold', [])],
            test=[int(i) for i in data.get('test', [])],
            seed=int(data.get('seed', 0)),
        )


@dataclass
class TrainingRun:
    """训练结果数据模型"""
    epochs: int = 0
    samples: int = 0
    loss_trace: List[float] = field(default_factory=list)
    train_accuracy: float = 0.0
    start_time: str = field(default_factory=lambda: datetime.now().isoformat())
    end_time: str = ""
    duration: str = ""

    def mark_completed(self) -> None:
        """标记训练完成"""
        self.end_time = datetime.now().isoformat()
        start = datetime.fromisoformat(self.start_time)
        end = datetime.fromisoformat(self.end_time)
        self.duration = str(end - start)

    def add_epoch(self, loss: float) -> None:
        self.loss_trace.append(float(loss))
        self.epochs = len(self.loss_trace)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float('nan')

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return {
            'epochs': self.epochs,
            'samples': self.samples,
            'loss_trace': list(self.loss_trace),
            'train_accuracy': self.train_accuracy,
            'start_time': self.start_time,
            'end_time': self.end_time,
            'duration': self.duration,
        }


@dataclass
class OpenSetDecision:
    """单个 WDM 的开集分类结果"""
    wdm_id: str
    label: str
    novelty_score: float
    eta: float
    class_scores: List[float] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def is_novel(self) -> bool:
        return self.label == NOVEL_LABEL

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return {
            'id': self.wdm_id,
            'label': self.label,
            'novel': self.is_novel,
            'novelty_score': self.novelty_score,
            'eta': self.eta,
            'class_scores': [float(v) for v in self.class_scores],
            'elapsed': self.elapsed,
        }


def labels_of(dataset: Sequence[Wdm]) -> List[str]:
    """数据集标签列表（无标签记为空串）"""
    return [w.label.value if w.label is not None else '' for w in dataset]


def index_by_id(dataset: Iterable[Wdm]) -> Dict[str, int]:
    """id -> 下标，重复 id 报错"""
    index: Dict[str, int] = {}
    for i, w in enumerate(dataset):
        if w.id in index:
            raise DataError(f"重复的 WDM id: {w.id}")
        index[w.id] = i
    return index
