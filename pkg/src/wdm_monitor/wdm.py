"""WDM 编解码、分层划分与合成数据生成

合成数据仅用于本地验证，模式形状是参数化的近似，并非真实检测机数据。
半径类参数（r0、width 等）均以晶圆半径 R 为单位。
"""

import json
import logging
from pathlib import Path
from typing import IO, Any, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .config import (
    DATASET_SUFFIX, MIN_SPLIT_CLASS_SIZE, NORMAL_NOISE_LAMBDA, SPLIT_FRACTIONS,
    default_radius, reject_unknown_keys, require,
)
from .exceptions import ConfigError, DataError, WdmMonitorError
from .models import ClassLabel, DatasetSplit, Wdm, index_by_id, labels_of
from .utils import load_json, parallel_map, rng_stream, save_json

logger = logging.getLogger(__name__)

DEFAULT_PATTERN_POINTS = 300

# ---------------------------------------------------------------- 编解码


def encode_wdm(w: Wdm) -> str:
    """编码为一行 JSON"""
    return json.dumps(w.to_dict(), separators=(',', ':'))


def decode_wdm(line: str, line_no: int = 1) -> Wdm:
    """解码一行 JSON，错误信息带行号"""
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"第 {line_no} 行 JSON 格式错误: {e.msg}")
    if not isinstance(data, dict):
        raise DataError(f"第 {line_no} 行必须是 JSON 对象")
    try:
        return Wdm.from_dict(data)
    except WdmMonitorError as e:
        raise DataError(f"第 {line_no} 行: {e}") from e
    except (TypeError, ValueError) as e:
        raise DataError(f"第 {line_no} 行字段类型错误: {e}") from e


def iter_wdms(stream: IO[str]) -> Iterator[Wdm]:
    """逐行读取 JSONL 流，跳过空行"""
    for line_no, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        w = decode_wdm(line, line_no)
        outside = w.outside_disk()
        if outside:
            logger.warning(f"WDM {w.id} 有 {outside} 个缺陷位于晶圆半径之外")
        yield w


def write_wdms(stream: IO[str], dataset: Iterable[Wdm]) -> int:
    count = 0
    for w in dataset:
        stream.write(encode_wdm(w) + "\n")
        count += 1
    return count


def read_dataset(path: Path) -> List[Wdm]:
    """读取 .wdm.jsonl 数据集"""
    if not path.exists():
        raise DataError(f"数据集不存在: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        dataset = list(iter_wdms(f))
    index_by_id(dataset)
    logger.info(f"读取数据集 {path}: {len(dataset)} 个 WDM")
    return dataset


def write_dataset(path: Path, dataset: Sequence[Wdm]) -> None:
    """写出 .wdm.jsonl 数据集"""
    if not path.name.endswith(DATASET_SUFFIX):
        logger.warning(f"数据集文件名建议以 {DATASET_SUFFIX} 结尾: {path.name}")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        count = write_wdms(f, dataset)
    logger.info(f"数据集已保存: {path} ({count} 个 WDM)")


def write_manifest(path: Path, dataset: Sequence[Wdm], split: DatasetSplit,
                   provenance: Optional[Dict[str, Any]] = None) -> None:
    """按 id 记录划分成员"""
    ids = [w.id for w in dataset]
    manifest = {
        'provenance': provenance or {},
        'seed': split.seed,
        'splits': {name: [ids[i] for i in indices]
                   for name, indices in split.to_dict().items() if name != 'seed'},
    }
    save_json(manifest, path)


def read_manifest(path: Path, dataset: Sequence[Wdm]) -> DatasetSplit:
    """读取划分清单并映射回下标"""
    manifest = load_json(path)
    index = index_by_id(dataset)
    splits = manifest.get('splits', {})
    resolved: Dict[str, Any] = {'seed': manifest.get('seed', 0)}
    for name in ('train', 'gmm_fit', 'threshold', 'test'):
        try:
            resolved[name] = [index[i] for i in splits.get(name, [])]
        except KeyError as e:
            raise DataError(f"划分清单引用了不存在的 WDM id: {e.args[0]}")
    split = DatasetSplit.from_dict(resolved)
    split.validate(len(dataset))
    return split


# ---------------------------------------------------------------- 合成数据

PARAM_DEFAULTS: Dict[str, Dict[str, float]] = {
    'Normal': {'lam': NORMAL_NOISE_LAMBDA},
    'Ring': {'r0': 0.0, 'width': 0.05},
    'Donut': {'r0': 0.0, 'width': 0.1},
    'HalfMoon': {'span': np.pi},
    'Slice': {'span': 0.0},
    'GeoScratch': {'segments': 2, 'jitter': 0.006},
    'ZigZag': {'segments': 7, 'jitter': 0.004},
    'Grid': {'lines': 5, 'jitter': 0.004},
    'ClusterBig': {'sigma': 0.12},
    'ClusterSmall': {'sigma': 0.03, 'blobs': 2},
    'Fingerprints': {'arcs': 5, 'gap': 0.03},
    'BasketBall': {'jitter': 0.006},
    'Incomplete': {'span': 1.5 * np.pi},
}
COMMON_PARAMS = {'noise': NORMAL_NOISE_LAMBDA, 'points': DEFAULT_PATTERN_POINTS}


def _resolve_params(label: ClassLabel, params: Optional[Mapping[str, float]]) -> Dict[str, float]:
    merged = dict(COMMON_PARAMS)
    merged.update(PARAM_DEFAULTS[label.value])
    if params:
        reject_unknown_keys(f"synth.{label.value}", params, merged)
        merged.update({k: float(v) for k, v in params.items()})
    return merged


def _polar_to_grid(r: np.ndarray, theta: np.ndarray, center: float) -> np.ndarray:
    i = np.rint(center + r * np.sin(theta))
    j = np.rint(center + r * np.cos(theta))
    return np.stack([i, j], axis=1).astype(np.int64)


def _keep(points: np.ndarray, center: float, r_min: float, r_max: float, grid_size: int) -> np.ndarray:
    """保留落在网格内且半径（取整后）位于 [r_min, r_max] 的点"""
    if points.size == 0:
        return points.reshape(0, 2)
    radii = np.hypot(points[:, 0] - center, points[:, 1] - center)
    inside = ((points >= 0) & (points < grid_size)).all(axis=1)
    mask = inside & (radii >= r_min - 1e-9) & (radii <= r_max + 1e-9)
    return points[mask]


def snap_inside(points: np.ndarray, center: float, radius: float) -> np.ndarray:
    """取整后落到圆外的点逐格向圆心移动，直到回到圆内"""
    points = points.copy()
    for _ in range(4):
        radii = np.hypot(points[:, 0] - center, points[:, 1] - center)
        outside = radii > radius + 1e-9
        if not outside.any():
            break
        step = np.sign(center - points[outside]).astype(np.int64)
        points[outside] += step
    return points


def uniform_polar(n: int, radius: float, center: float, grid_size: int,
                  rng: np.random.Generator) -> np.ndarray:
    """角度与半径分别在 [0, 2π) × [0, R] 上均匀采样（靠近圆心处更密）"""
    theta = rng.uniform(0.0, 2 * np.pi, size=n)
    r = rng.uniform(0.0, radius, size=n)
    points = snap_inside(_polar_to_grid(r, theta, center), center, radius)
    return _keep(points, center, 0.0, radius, grid_size)


def _annulus(n: int, r_lo: float, r_hi: float, theta_lo: float, theta_hi: float,
             center: float, grid_size: int, rng: np.random.Generator) -> np.ndarray:
    theta = rng.uniform(theta_lo, theta_hi, size=n)
    r = rng.uniform(r_lo, r_hi, size=n)
    return _keep(_polar_to_grid(r, theta, center), center, r_lo, r_hi, grid_size)


def _polyline(n: int, vertices: np.ndarray, jitter: float, rng: np.random.Generator) -> np.ndarray:
    """沿折线（连续坐标，相对圆心）均匀撒点并加抖动"""
    seg = np.diff(vertices, axis=0)
    lengths = np.hypot(seg[:, 0], seg[:, 1])
    if lengths.sum() == 0:
        return np.repeat(vertices[:1], n, axis=0)
    which = rng.choice(len(seg), size=n, p=lengths / lengths.sum())
    t = rng.uniform(0.0, 1.0, size=n)
    pts = vertices[which] + seg[which] * t[:, None]
    return pts + rng.normal(0.0, jitter, size=pts.shape)


def _cartesian_to_grid(pts: np.ndarray, center: float) -> np.ndarray:
    return np.rint(center + pts).astype(np.int64).reshape(-1, 2)


def _random_direction(rng: np.random.Generator) -> float:
    return float(rng.uniform(0.0, 2 * np.pi))


ZIGZAG_STEP_RATIO = 0.12


def zigzag_vertices(start: np.ndarray, phi: float, segments: int, step: float) -> np.ndarray:
    """沿单位方向 (cos φ, sin φ) 每步前进 step，法向交替偏移 ±step/2"""
    direction = np.array([np.cos(phi), np.sin(phi)])
    normal = np.array([-direction[1], direction[0]])
    s = np.arange(segments + 1)[:, None]
    side = np.where(s % 2 == 1, 0.5, -0.5)
    return np.asarray(start, dtype=np.float64) + direction * step * s + normal * step * side


def _pattern_points(label: ClassLabel, p: Dict[str, float], grid_size: int, radius: float,
                    center: float, rng: np.random.Generator) -> np.ndarray:
    n = int(p['points'])
    R = radius
    name = label.value

    if name == 'Normal':
        return uniform_polar(int(rng.poisson(p['lam'])), R, center, grid_size, rng)

    if name in ('Ring', 'Donut'):
        lo, hi = (0.55, 0.85) if name == 'Ring' else (0.3, 0.5)
        r0 = p['r0'] if p['r0'] > 0 else rng.uniform(lo, hi)
        width = p['width']
        return _annulus(n, (r0 - width) * R, min(r0 + width, 1.0) * R, 0.0, 2 * np.pi,
                        center, grid_size, rng)

    if name in ('HalfMoon', 'Incomplete'):
        start = _random_direction(rng)
        r_lo = 0.8 if name == 'HalfMoon' else 0.9
        count = n if name == 'HalfMoon' else max(1, n // 3)
        return _annulus(count, r_lo * R, R, start, start + p['span'], center, grid_size, rng)

    if name == 'Slice':
        start = _random_direction(rng)
        span = p['span'] if p['span'] > 0 else rng.uniform(0.3, 0.6)
        return _annulus(n, 0.0, R, start, start + span, center, grid_size, rng)

    if name in ('GeoScratch', 'ZigZag'):
        k = int(p['segments'])
        if name == 'GeoScratch':
            vertices = rng.uniform(-0.7 * R, 0.7 * R, size=(k + 1, 2))
        else:
            start = rng.uniform(-0.6 * R, 0.6 * R, size=2)
            vertices = zigzag_vertices(start, _random_direction(rng), k, ZIGZAG_STEP_RATIO * R)
        pts = _polyline(n, vertices, p['jitter'] * R, rng)
        return _keep(_cartesian_to_grid(pts, center), center, 0.0, R, grid_size)

    if name == 'Grid':
        lines = int(p['lines'])
        offset = rng.uniform(-0.5 * R, 0.0)
        spacing = 0.9 * R / max(lines - 1, 1)
        positions = offset + spacing * np.arange(lines)
        along = rng.uniform(-0.6 * R, 0.6 * R, size=n)
        which = rng.integers(0, lines, size=n)
        vertical = rng.random(n) < 0.5
        across = positions[which] + rng.normal(0.0, p['jitter'] * R, size=n)
        pts = np.where(vertical[:, None], np.stack([along, across], 1), np.stack([across, along], 1))
        return _keep(_cartesian_to_grid(pts, center), center, 0.0, R, grid_size)

    if name in ('ClusterBig', 'ClusterSmall'):
        blobs = 1 if name == 'ClusterBig' else int(p['blobs'])
        chunks = []
        for b in range(blobs):
            theta = _random_direction(rng)
            rad = rng.uniform(0.0, 0.7 * R)
            mu = np.array([rad * np.sin(theta), rad * np.cos(theta)])
            chunks.append(mu + rng.normal(0.0, p['sigma'] * R, size=(n // blobs, 2)))
        pts = np.concatenate(chunks)
        return _keep(_cartesian_to_grid(pts, center), center, 0.0, R, grid_size)

    if name == 'Fingerprints':
        arcs = int(p['arcs'])
        theta0 = _random_direction(rng)
        focus = 1.1 * R * np.array([np.sin(theta0), np.cos(theta0)])
        radii = 0.4 * R + p['gap'] * R * np.arange(arcs)
        which = rng.integers(0, arcs, size=n)
        phi = theta0 + np.pi + rng.uniform(-0.35, 0.35, size=n)
        rr = radii[which] + rng.normal(0.0, 0.003 * R, size=n)
        pts = focus + np.stack([rr * np.sin(phi), rr * np.cos(phi)], axis=1)
        return _keep(_cartesian_to_grid(pts, center), center, 0.0, R, grid_size)

    if name == 'BasketBall':
        theta0 = _random_direction(rng)
        axis = np.array([np.sin(theta0), np.cos(theta0)])
        chunks = []
        third = n // 3
        for sign in (-1.0, 1.0):
            focus = sign * 1.5 * R * axis
            phi = theta0 + (np.pi if sign > 0 else 0.0) + rng.uniform(-0.6, 0.6, size=third)
            rr = 1.2 * R + rng.normal(0.0, p['jitter'] * R, size=third)
            chunks.append(focus + np.stack([rr * np.sin(phi), rr * np.cos(phi)], axis=1))
        normal = np.array([-axis[1], axis[0]])
        t = rng.uniform(-R, R, size=n - 2 * third)
        chunks.append(t[:, None] * normal + rng.normal(0.0, p['jitter'] * R, size=(t.size, 2)))
        pts = np.concatenate(chunks)
        return _keep(_cartesian_to_grid(pts, center), center, 0.0, R, grid_size)

    raise ConfigError(f"没有 {name} 的生成器")


def synth_generate(label: Any, params: Optional[Mapping[str, float]], grid_size: int,
                   radius: float, rng: np.random.Generator, wdm_id: str = "") -> Wdm:
    """生成一个带类别特征几何 + 背景噪声的合成 WDM，所有点都在晶圆内"""
    label = label if isinstance(label, ClassLabel) else ClassLabel.parse(label)
    p = _resolve_params(label, params)
    center = (grid_size - 1) / 2.0
    pattern = _pattern_points(label, p, grid_size, radius, center, rng)
    noise_count = int(rng.poisson(p['noise'])) if label != ClassLabel.NORMAL and p['noise'] > 0 else 0
    noise = uniform_polar(noise_count, radius, center, grid_size, rng)
    defects = np.concatenate([pattern.reshape(-1, 2), noise.reshape(-1, 2)])
    return Wdm(id=wdm_id or f"{label.value}-synthetic", grid_size=grid_size, radius=radius,
               defects=defects, label=label)


def generate_dataset(counts: Mapping[str, int], grid_size: int, radius: Optional[float] = None,
                     seed: int = 0, params: Optional[Mapping[str, Mapping[str, float]]] = None,
                     workers: int = 1, id_prefix: str = "") -> List[Wdm]:
    """按类别数量生成合成数据集，每个样本使用独立随机流"""
    radius = default_radius(grid_size) if radius is None else radius
    params = params or {}
    jobs: List[Tuple[ClassLabel, int]] = []
    for name, count in counts.items():
        label = ClassLabel.parse(name)
        require(count >= 0, f"类别 {name} 的数量不能为负: {count}")
        jobs.extend((label, i) for i in range(int(count)))
    order = {label: pos for pos, label in enumerate(ClassLabel)}

    def make(job: Tuple[ClassLabel, int]) -> Wdm:
        label, i = job
        rng = rng_stream(seed, 4, order[label], i)
        return synth_generate(label, params.get(label.value), grid_size, radius, rng,
                              wdm_id=f"{id_prefix}{label.value}-{i:05d}")

    dataset = parallel_map(make, jobs, workers)
    logger.info(f"生成合成数据集: {len(dataset)} 个 WDM, K={grid_size}, R={radius:.1f}")
    return dataset


def radial_histogram(w: Wdm, bins: int = 8) -> np.ndarray:
    """归一化的径向直方图（半径以 R 为单位）"""
    if w.num_defects == 0:
        return np.zeros(bins)
    hist, _ = np.histogram(w.radii() / w.radius, bins=bins, range=(0.0, 1.0))
    return hist / hist.sum()


# ---------------------------------------------------------------- 划分


def _group_by_label(labels: Sequence[str], indices: Sequence[int]) -> Dict[str, List[int]]:
    groups: Dict[str, List[int]] = {}
    for i in indices:
        groups.setdefault(labels[i], []).append(int(i))
    return dict(sorted(groups.items()))


def _portion(fraction: float, n: int) -> int:
    return max(1, int(round(fraction * n))) if fraction > 0 else 0


def split_dataset(dataset: Sequence[Wdm], fractions: Sequence[float] = SPLIT_FRACTIONS,
                  seed: int = 0, indices: Optional[Sequence[int]] = None) -> DatasetSplit:
    """按类别分层划分为 train / gmm_fit / threshold

    每类取 round(f·n) 个进入 gmm_fit 与 threshold（比例非零时至少 1 个，保证每个已知类
    都有 GMM 分量），其余进入 train；
    少于 3 个样本的类别全部进入 train 并给出警告。
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"划分比例必须是三个非负数且和为 1: {list(fractions)}")
    labels = labels_of(dataset)
    pool = list(range(len(dataset))) if indices is None else [int(i) for i in indices]

    split = DatasetSplit(seed=seed)
    for pos, (label, members) in enumerate(_group_by_label(labels, pool).items()):
        n = len(members)
        if n < MIN_SPLIT_CLASS_SIZE:
            logger.warning(f"类别 {label or '(无标签)'} 只有 {n} 个样本，全部划入训练集")
            split.train.extend(members)
            continue
        perm = [members[i] for i in rng_stream(seed, 3, pos).permutation(n)]
        n_fit = _portion(fractions[1], n)
        n_thr = _portion(fractions[2], n)
        split.gmm_fit.extend(perm[:n_fit])
        split.threshold.extend(perm[n_fit:n_fit + n_thr])
        split.train.extend(perm[n_fit + n_thr:])

    split.train.sort()
    split.gmm_fit.sort()
    split.threshold.sort()
    return split


def holdout_split(dataset: Sequence[Wdm], fraction: float, seed: int = 0,
                  indices: Optional[Sequence[int]] = None) -> Tuple[List[int], List[int]]:
    """分层留出测试集，返回 (dev, test)"""
    require(0.0 <= fraction < 1.0, f"测试比例必须在 [0, 1) 内: {fraction}")
    labels = labels_of(dataset)
    pool = list(range(len(dataset))) if indices is None else [int(i) for i in indices]
    dev: List[int] = []
    test: List[int] = []
    for pos, (label, members) in enumerate(_group_by_label(labels, pool).items()):
        n = len(members)
        n_test = int(round(fraction * n)) if n >= MIN_SPLIT_CLASS_SIZE else 0
        perm = [members[i] for i in rng_stream(seed, 5, pos).permutation(n)]
        test.extend(perm[:n_test])
        dev.extend(perm[n_test:])
    return sorted(dev), sorted(test)


def kfold_indices(labels: Sequence[str], k: int, seed: int = 0) -> List[Tuple[List[int], List[int]]]:
    """分层 k 折：每个样本恰好出现在一个测试折中"""
    require(k >= 2, f"折数必须 ≥ 2: {k}")
    folds: List[List[int]] = [[] for _ in range(k)]
    start = 0
    for pos, (label, members) in enumerate(_group_by_label(labels, range(len(labels))).items()):
        perm = [members[i] for i in rng_stream(seed, 6, pos).permutation(len(members))]
        for r, idx in enumerate(perm):
            folds[(start + r) % k].append(idx)
        start += len(perm)
    result = []
    for f in range(k):
        test = sorted(folds[f])
        held = set(test)
        train = [i for i in range(len(labels)) if i not in held]
        result.append((train, test))
    return result
