"""保持标签的变换代数：类别变换集、测试时公共变换集、噪声注入与随机混合

几何变换固定按 旋转 → 水平翻转 → 平移 的顺序作用；逆变换按相反顺序作用，
由 GeoParams.reverse_order 标记。旋转是网格上精确的 90° 下标置换，无插值。
"""

import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import (
    MIXING_CLASSES, NORMAL_CLASS, ROTATIONS, TRANSLATION_RATIO,
    reject_unknown_keys, require,
)
from .exceptions import ConfigError, ContractError, DataError
from .models import ClassLabel, Wdm
from .utils import load_json
from .wdm import uniform_polar

logger = logging.getLogger(__name__)

MODES = ('none', 'geometric', 'full')


@dataclass(frozen=True)
class GeoParams:
    """几何变换参数 θ：旋转 β、可选水平翻转、方向 φ 与距离 d 的平移"""
    rotation: int = 0
    flip: bool = False
    direction: float = 0.0
    distance: float = 0.0
    reverse_order: bool = False

    def __post_init__(self) -> None:
        if self.rotation not in ROTATIONS:
            raise ContractError(f"旋转角必须是 {ROTATIONS} 之一: {self.rotation}")
        if self.distance < 0:
            raise ContractError(f"平移距离不能为负: {self.distance}")

    def offset(self) -> Tuple[int, int]:
        """平移的整数网格偏移 (di, dj)，长度不超过 distance

        取整后超长时，把绝对值较大的分量向 0 收一格，直到回到半径内。
        """
        di = int(np.rint(self.distance * np.sin(self.direction)))
        dj = int(np.rint(self.distance * np.cos(self.direction)))
        while di * di + dj * dj > self.distance * self.distance + 1e-9:
            if abs(di) >= abs(dj):
                di -= int(np.sign(di))
            else:
                dj -= int(np.sign(dj))
        return di, dj

    def to_dict(self) -> Dict[str, Any]:
        return {
            'rotation': self.rotation,
            'flip': self.flip,
            'direction': self.direction,
            'distance': self.distance,
            'reverse_order': self.reverse_order,
        }


IDENTITY = GeoParams()


def _rotate(coords: np.ndarray, rotation: int, grid_size: int) -> np.ndarray:
    out = coords
    for _ in range((rotation // 90) % 4):
        out = np.stack([out[:, 1], grid_size - 1 - out[:, 0]], axis=1)
    return out


def _flip(coords: np.ndarray, grid_size: int) -> np.ndarray:
    return np.stack([coords[:, 0], grid_size - 1 - coords[:, 1]], axis=1)


def _translate(coords: np.ndarray, g: GeoParams) -> np.ndarray:
    di, dj = g.offset()
    return coords + np.array([di, dj], dtype=np.int64)


def _inside_disk(coords: np.ndarray, w: Wdm) -> np.ndarray:
    radii = np.hypot(coords[:, 0] - w.center, coords[:, 1] - w.center)
    in_grid = ((coords >= 0) & (coords < w.grid_size)).all(axis=1)
    return in_grid & (radii <= w.radius + 1e-9)


def apply_geometric(w: Wdm, g: GeoParams) -> Wdm:
    """绕晶圆中心作用几何变换；平移出晶圆的点被丢弃，标签不变"""
    coords = w.defects
    if coords.shape[0] == 0:
        return w.with_defects(coords)
    if g.reverse_order:
        coords = _translate(coords, g)
        coords = coords[_inside_disk(coords, w)]
        if g.flip:
            coords = _flip(coords, w.grid_size)
        coords = _rotate(coords, g.rotation, w.grid_size)
    else:
        coords = _rotate(coords, g.rotation, w.grid_size)
        if g.flip:
            coords = _flip(coords, w.grid_size)
        coords = _translate(coords, g)
        coords = coords[_inside_disk(coords, w)]
    return w.with_defects(coords)


def inverse_geometric(g: GeoParams) -> GeoParams:
    """逆变换：旋转取反、翻转自逆、平移反向，并按相反顺序作用"""
    return GeoParams(
        rotation=(-g.rotation) % 360,
        flip=g.flip,
        direction=float((g.direction + np.pi) % (2 * np.pi)),
        distance=g.distance,
        reverse_order=not g.reverse_order,
    )


@dataclass(frozen=True)
class ClassTransformSet:
    """某一类别的变换集合 Θ_ℓ"""
    rotations: Tuple[int, ...] = ROTATIONS
    allow_flip: bool = True
    max_translation: float = 0.0
    noise: bool = False
    mixing: bool = False

    def __post_init__(self) -> None:
        if not self.rotations:
            raise ConfigError("旋转集合不能为空")
        for r in self.rotations:
            if r not in ROTATIONS:
                raise ConfigError(f"旋转角必须是 {ROTATIONS} 之一: {r}")
            if (-r) % 360 not in self.rotations:
                raise ConfigError(f"旋转集合 {self.rotations} 对取逆不封闭（缺少 {(-r) % 360}）")
        if self.max_translation < 0:
            raise ConfigError(f"最大平移距离不能为负: {self.max_translation}")

    @classmethod
    def identity(cls) -> 'ClassTransformSet':
        return cls(rotations=(0,), allow_flip=False, max_translation=0.0, noise=False, mixing=False)

    @property
    def is_identity(self) -> bool:
        return (self.rotations == (0,) and not self.allow_flip and self.max_translation == 0
                and not self.noise and not self.mixing)

    def sample(self, rng: np.random.Generator) -> GeoParams:
        """从集合中随机取一个几何变换"""
        rotation = int(self.rotations[int(rng.integers(0, len(self.rotations)))])
        flip = bool(self.allow_flip and rng.random() < 0.5)
        direction = float(rng.uniform(0.0, 2 * np.pi))
        distance = float(rng.uniform(0.0, self.max_translation)) if self.max_translation > 0 else 0.0
        return GeoParams(rotation=rotation, flip=flip, direction=direction, distance=distance)

    def contains(self, g: GeoParams) -> bool:
        """判断 g 是否属于该集合"""
        return (g.rotation in self.rotations
                and (self.allow_flip or not g.flip)
                and g.distance <= self.max_translation + 1e-12)

    def lattice(self, directions: int = 8, distances: int = 3) -> List[GeoParams]:
        """参数格点：旋转 × 翻转 × 方向 × 距离 × 作用顺序"""
        flips = (False, True) if self.allow_flip else (False,)
        phis = [2 * np.pi * k / directions for k in range(directions)]
        if self.max_translation > 0 and distances > 1:
            ds = list(np.linspace(0.0, self.max_translation, distances))
        else:
            ds = [0.0]
        return [
            GeoParams(rotation=r, flip=f, direction=float(phi), distance=float(d), reverse_order=rev)
            for r, f, phi, d, rev in product(self.rotations, flips, phis, ds, (False, True))
        ]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'rotations': list(self.rotations),
            'allow_flip': self.allow_flip,
            'max_translation': self.max_translation,
            'noise': self.noise,
            'mixing': self.mixing,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ClassTransformSet':
        reject_unknown_keys('transform_set', data, cls.__dataclass_fields__)
        values = dict(data)
        if 'rotations' in values:
            values['rotations'] = tuple(int(r) for r in values['rotations'])
        return cls(**values)


def common_transform_set(sets: Iterable[ClassTransformSet]) -> ClassTransformSet:
    """公共测试集 Θ = ∩ Θ_ℓ，随机混合总是被排除"""
    sets = list(sets)
    if not sets:
        raise ConfigError("至少需要一个类别变换集")
    rotations = set(sets[0].rotations)
    for s in sets[1:]:
        rotations &= set(s.rotations)
    if not rotations:
        raise ConfigError("各类别变换集的旋转交集为空")
    return ClassTransformSet(
        rotations=tuple(sorted(rotations)),
        allow_flip=all(s.allow_flip for s in sets),
        max_translation=min(s.max_translation for s in sets),
        noise=all(s.noise for s in sets),
        mixing=False,
    )


@dataclass
class NoiseDist:
    """Normal WDM 缺陷数的经验分布 ψ̂（有序计数，均匀抽取）"""
    counts: np.ndarray

    def __post_init__(self) -> None:
        self.counts = np.sort(np.asarray(self.counts, dtype=np.int64).ravel())
        if self.counts.size == 0:
            raise DataError("噪声分布为空")
        if (self.counts < 0).any():
            raise DataError("噪声计数不能为负")

    @classmethod
    def from_wdms(cls, wdms: Iterable[Wdm]) -> 'NoiseDist':
        return cls(np.asarray([w.num_defects for w in wdms], dtype=np.int64))

    @classmethod
    def from_dataset(cls, dataset: Sequence[Wdm], indices: Optional[Sequence[int]] = None) -> 'NoiseDist':
        """取 Normal 样本的缺陷数"""
        pool = dataset if indices is None else [dataset[i] for i in indices]
        normals = [w for w in pool if w.label is not None and w.label.value == NORMAL_CLASS]
        if not normals:
            raise DataError("数据中没有 Normal 样本，无法估计噪声分布")
        return cls.from_wdms(normals)

    def sample(self, rng: np.random.Generator) -> int:
        return int(self.counts[int(rng.integers(0, self.counts.size))])

    def to_dict(self) -> Dict[str, Any]:
        return {'counts': self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NoiseDist':
        return cls(np.asarray(data['counts'], dtype=np.int64))


def noise_inject(w: Wdm, dist: NoiseDist, rng: np.random.Generator) -> Wdm:
    """在均匀极坐标位置注入 D ~ ψ̂ 个缺陷；原有缺陷全部保留，标签不变"""
    count = dist.sample(rng)
    if count == 0:
        return w
    added = uniform_polar(count, w.radius, w.center, w.grid_size, rng)
    return w.with_defects(np.concatenate([w.defects, added]))


def _angles(coords: np.ndarray, center: float) -> np.ndarray:
    return np.mod(np.arctan2(coords[:, 0] - center, coords[:, 1] - center), 2 * np.pi)


def random_mix(sources: Sequence[Wdm], rng: np.random.Generator,
               bounds: Optional[Sequence[float]] = None) -> Wdm:
    """把各源的随机扇形裁剪叠加在一起

    扇形由起始角和 len(sources) - 1 个切点构成，恰好划分整个圆盘；
    bounds 可显式给出 len(sources) + 1 个单调角度（末端 = 起点 + 2π）。
    """
    if len(sources) < 2:
        raise ContractError("随机混合至少需要两个源 WDM")
    labels = {w.label for w in sources}
    if len(labels) != 1:
        raise ContractError(f"随机混合的源必须同类: {sorted(str(l) for l in labels)}")
    base = sources[0]
    for w in sources[1:]:
        if w.grid_size != base.grid_size or w.radius != base.radius:
            raise ContractError("随机混合的源必须有相同的网格与半径")

    n = len(sources)
    if bounds is None:
        start = float(rng.uniform(0.0, 2 * np.pi))
        cuts = np.sort(rng.uniform(0.0, 2 * np.pi, size=n - 1))
        edges = np.concatenate([[0.0], cuts, [2 * np.pi]]) + start
    else:
        edges = np.asarray(bounds, dtype=np.float64)
        if edges.size != n + 1 or np.any(np.diff(edges) < 0):
            raise ContractError("bounds 必须是 len(sources)+1 个单调递增的角度")

    pieces = []
    for s, w in enumerate(sources):
        if w.num_defects == 0:
            continue
        rel = np.mod(_angles(w.defects, w.center) - edges[0], 2 * np.pi)
        lo, hi = edges[s] - edges[0], edges[s + 1] - edges[0]
        mask = (rel >= lo) & (rel < hi) if s < n - 1 else (rel >= lo) & (rel <= hi)
        pieces.append(w.defects[mask])
    coords = np.concatenate(pieces) if pieces else np.zeros((0, 2), dtype=np.int64)
    return base.with_defects(coords)


@dataclass
class AugmentationPolicy:
    """增强策略（可从 JSON 文件读取）

    mode: none 关闭增强；geometric 仅旋转/翻转/平移；full 额外启用噪声注入和类别随机混合。
    """
    mode: str = 'full'
    rotations: List[int] = field(default_factory=lambda: list(ROTATIONS))
    allow_flip: bool = True
    translation_ratio: float = TRANSLATION_RATIO
    mixing_classes: List[str] = field(default_factory=lambda: list(MIXING_CLASSES))
    mix_sources: int = 2
    overrides: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    noise_counts: Optional[List[int]] = None

    def __post_init__(self) -> None:
        require(self.mode in MODES, f"增强模式必须是 {MODES} 之一: {self.mode}")
        require(self.translation_ratio >= 0, "translation_ratio 不能为负")
        require(self.mix_sources >= 2, "mix_sources 必须 ≥ 2")
        for name in list(self.mixing_classes) + list(self.overrides):
            try:
                ClassLabel.parse(name)
            except DataError as e:
                raise ConfigError(f"增强策略: {e}") from e
        for name, values in self.overrides.items():
            reject_unknown_keys(f"augmentation.overrides.{name}", values,
                                ('rotations', 'allow_flip', 'translation_ratio', 'noise', 'mixing'))

    def class_set(self, label: Any, grid_size: int) -> ClassTransformSet:
        """类别 ℓ 的变换集 Θ_ℓ"""
        name = label.value if isinstance(label, ClassLabel) else str(label)
        if self.mode == 'none':
            return ClassTransformSet.identity()
        settings: Dict[str, Any] = {
            'rotations': self.rotations,
            'allow_flip': self.allow_flip,
            'translation_ratio': self.translation_ratio,
            'noise': self.mode == 'full',
            'mixing': self.mode == 'full' and name in self.mixing_classes,
        }
        settings.update(self.overrides.get(name, {}))
        if self.mode == 'geometric':
            settings['noise'] = False
            settings['mixing'] = False
        return ClassTransformSet(
            rotations=tuple(int(r) for r in settings['rotations']),
            allow_flip=bool(settings['allow_flip']),
            max_translation=float(settings['translation_ratio']) * grid_size,
            noise=bool(settings['noise']),
            mixing=bool(settings['mixing']),
        )

    def common_set(self, labels: Iterable[Any], grid_size: int) -> ClassTransformSet:
        return common_transform_set(self.class_set(label, grid_size) for label in labels)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'mode': self.mode,
            'rotations': list(self.rotations),
            'allow_flip': self.allow_flip,
            'translation_ratio': self.translation_ratio,
            'mixing_classes': list(self.mixing_classes),
            'mix_sources': self.mix_sources,
            'overrides': {k: dict(v) for k, v in self.overrides.items()},
            'noise_counts': list(self.noise_counts) if self.noise_counts is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'AugmentationPolicy':
        reject_unknown_keys('augmentation', data, cls.__dataclass_fields__)
        return cls(**data)

    @classmethod
    def load(cls, path: Path) -> 'AugmentationPolicy':
        return cls.from_dict(load_json(path))


def augment_for_training(w: Wdm, label: Any, theta: ClassTransformSet, noise: Optional[NoiseDist],
                         rng: np.random.Generator, pool: Sequence[Wdm] = (),
                         mix_sources: int = 2) -> Wdm:
    """从 Θ_ℓ 采样：可选随机混合 → 几何变换 → 噪声注入，标签不变"""
    label = label if isinstance(label, ClassLabel) else ClassLabel.parse(label)
    if w.label != label:
        raise ContractError(f"样本 {w.id} 的标签 {w.label} 与请求的类别 {label} 不一致")

    out = w
    if theta.mixing:
        partners = [p for p in pool if p.label == label and p.id != w.id]
        if partners:
            picks = rng.choice(len(partners), size=min(mix_sources - 1, len(partners)), replace=False)
            out = random_mix([w] + [partners[int(i)] for i in picks], rng)
    out = apply_geometric(out, theta.sample(rng))
    if theta.noise and noise is not None:
        out = noise_inject(out, noise, rng)
    return out


def make_test_batch(w: Wdm, n: int, theta: ClassTransformSet, noise: Optional[NoiseDist],
                    rng: np.random.Generator) -> List[Wdm]:
    """测试时增强集合 A_w：从公共集合 Θ 独立抽取 n 次（从不混合）"""
    if n < 1:
        raise ContractError(f"增强数 N 必须 ≥ 1: {n}")
    if theta.mixing:
        raise ContractError("测试时变换集不能包含随机混合")
    batch = []
    for _ in range(n):
        out = apply_geometric(w, theta.sample(rng))
        if theta.noise and noise is not None:
            out = noise_inject(out, noise, rng)
        batch.append(out)
    return batch


class Augmenter:
    """训练用增强器：按样本标签选择 Θ_ℓ，可作为 fit 的 augmenter 参数"""

    def __init__(self, policy: AugmentationPolicy, grid_size: int, noise: Optional[NoiseDist],
                 pool: Sequence[Wdm] = ()):
        self.policy = policy
        self.grid_size = grid_size
        self.noise = noise
        self._pools: Dict[Optional[ClassLabel], List[Wdm]] = {}
        for p in pool:
            self._pools.setdefault(p.label, []).append(p)
        self._sets: Dict[Optional[ClassLabel], ClassTransformSet] = {}

    def transform_set(self, label: ClassLabel) -> ClassTransformSet:
        if label not in self._sets:
            self._sets[label] = self.policy.class_set(label, self.grid_size)
        return self._sets[label]

    def __call__(self, w: Wdm, rng: np.random.Generator) -> Wdm:
        if w.label is None:
            raise ContractError(f"训练样本 {w.id} 没有标签")
        theta = self.transform_set(w.label)
        return augment_for_training(w, w.label, theta, self.noise, rng,
                                    self._pools.get(w.label, []), self.policy.mix_sources)
