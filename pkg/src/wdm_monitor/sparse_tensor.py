"""超大二维网格上的坐标列表稀疏张量与 rulebook 构建

站点以 (i << 32) | j 打包为 int64 键并按键排序（即先 i 后 j），
查找使用二分搜索，因此构建和查找的开销只与活跃站点数有关，与网格大小无关。
卷积采用互相关约定：y[u] = sum_δ W[δ] · x[u + δ]。
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Set, Tuple

import numpy as np

from .config import MAX_DENSE_GRID
from .exceptions import ConfigError, ContractError, CoordinateRangeError

logger = logging.getLogger(__name__)

SUBMANIFOLD = 'submanifold'
POOL2 = 'pool2'
_SHIFT = np.int64(32)
_LOW_MASK = np.int64(0xFFFFFFFF)


class Coord(NamedTuple):
    """网格坐标（行 i，列 j）"""
    i: int
    j: int


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """(n, 2) 坐标 -> (n,) int64 键"""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return (coords[:, 0] << _SHIFT) | coords[:, 1]


def unpack_keys(keys: np.ndarray) -> np.ndarray:
    """(n,) int64 键 -> (n, 2) 坐标"""
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([keys >> _SHIFT, keys & _LOW_MASK], axis=1)


def as_coord_array(support: Any) -> np.ndarray:
    """把集合/列表/数组/稀疏张量统一为 (n, 2) int64 数组（未去重）"""
    if isinstance(support, SparseTensor):
        return support.coords
    if isinstance(support, np.ndarray):
        return support.astype(np.int64, copy=False).reshape(-1, 2)
    items = list(support)
    if not items:
        return np.zeros((0, 2), dtype=np.int64)
    return np.asarray([(int(c[0]), int(c[1])) for c in items], dtype=np.int64)


def _check_range(coords: np.ndarray, grid_size: int) -> None:
    bad = np.flatnonzero(((coords < 0) | (coords >= grid_size)).any(axis=1))
    if bad.size:
        raise CoordinateRangeError(coords[bad[0]], grid_size)


def _sorted_unique(coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    keys = np.unique(pack_keys(coords))
    return unpack_keys(keys), keys


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """在有序键中查找，未命中返回 -1"""
    if sorted_keys.size == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(sorted_keys, query)
    pos_clipped = np.minimum(pos, sorted_keys.size - 1)
    found = sorted_keys[pos_clipped] == query
    return np.where(found, pos_clipped, -1).astype(np.int64)


class SparseTensor:
    """活跃站点 -> 特征向量 的映射

    支撑集只由坐标成员关系决定，特征全零的站点仍然是活跃的。
    构建后不可变，可在线程间共享。
    """

    __slots__ = ('grid_size', 'coords', 'keys', 'features')

    def __init__(self, grid_size: int, coords: Any, features: Any):
        coords = as_coord_array(coords)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2:
            raise ContractError(f"特征必须是二维数组 (n, channels)，实际维度 {features.ndim}")
        if features.shape[0] != coords.shape[0]:
            raise ContractError(
                f"站点数 {coords.shape[0]} 与特征行数 {features.shape[0]} 不一致"
            )
        if features.shape[1] < 1:
            raise ContractError("通道数必须 ≥ 1")
        _check_range(coords, grid_size)

        keys = pack_keys(coords)
        order = np.argsort(keys, kind='stable')
        keys = keys[order]
        if keys.size > 1 and np.any(keys[1:] == keys[:-1]):
            raise ContractError("稀疏张量中存在重复站点")

        self.grid_size = int(grid_size)
        self.keys = keys
        self.coords = coords[order]
        self.features = features[order]
        for arr in (self.keys, self.coords, self.features):
            arr.setflags(write=False)

    @classmethod
    def from_points(cls, coords: Any, grid_size: int) -> 'SparseTensor':
        """由坐标列表构建单通道二值张量，重复坐标折叠为一个站点"""
        arr = as_coord_array(coords)
        _check_range(arr, grid_size)
        unique, _ = _sorted_unique(arr)
        return cls(grid_size, unique, np.ones((unique.shape[0], 1)))

    @classmethod
    def from_sites(cls, sites: Dict[Tuple[int, int], Any], grid_size: int,
                   channels: Optional[int] = None) -> 'SparseTensor':
        """由 {坐标: 特征} 字典构建"""
        if not sites:
            return cls.empty(grid_size, channels or 1)
        coords = np.asarray([(int(c[0]), int(c[1])) for c in sites], dtype=np.int64)
        features = np.asarray(
            [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in sites.values()]
        )
        if channels is not None and features.shape[1] != channels:
            raise ContractError(f"特征长度 {features.shape[1]} 与通道数 {channels} 不一致")
        return cls(grid_size, coords, features)

    @classmethod
    def empty(cls, grid_size: int, channels: int = 1) -> 'SparseTensor':
        return cls(grid_size, np.zeros((0, 2), dtype=np.int64), np.zeros((0, channels)))

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def num_active(self) -> int:
        return int(self.keys.shape[0])

    @property
    def sites(self) -> Dict[Coord, np.ndarray]:
        """按排序顺序的 {Coord: 特征} 视图"""
        return {Coord(int(i), int(j)): f for (i, j), f in zip(self.coords, self.features)}

    def support(self) -> Set[Coord]:
        return {Coord(int(i), int(j)) for i, j in self.coords}

    def same_support(self, other: 'SparseTensor') -> bool:
        return self.grid_size == other.grid_size and np.array_equal(self.keys, other.keys)

    def with_features(self, features: Any) -> 'SparseTensor':
        """保持支撑集，替换特征"""
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != self.num_active:
            raise ContractError(
                f"特征形状 {features.shape} 与活跃站点数 {self.num_active} 不匹配"
            )
        out = object.__new__(SparseTensor)
        out.grid_size = self.grid_size
        out.keys = self.keys
        out.coords = self.coords
        out.features = features.copy()
        out.features.setflags(write=False)
        return out

    def lookup(self, coords: Any) -> np.ndarray:
        """坐标 -> 行下标，非活跃返回 -1"""
        return _lookup(self.keys, pack_keys(as_coord_array(coords)))

    def to_dense(self) -> np.ndarray:
        """稠密数组 (K, K, C)，仅用作测试参照"""
        if self.grid_size > MAX_DENSE_GRID:
            raise ContractError(
                f"网格 {self.grid_size} 超过稠密化上限 {MAX_DENSE_GRID}"
            )
        dense = np.zeros((self.grid_size, self.grid_size, self.channels))
        if self.num_active:
            dense[self.coords[:, 0], self.coords[:, 1]] = self.features
        return dense

    def __repr__(self) -> str:
        return (f"SparseTensor(grid_size={self.grid_size}, channels={self.channels}, "
                f"active={self.num_active})")


@dataclass(frozen=True)
class RuleBook:
    """(输入站点, 核偏移, 输出站点) 规则集合，按偏移分组存放

    pairs[o] = (in_idx, out_idx)：偏移 o 下的输入行与输出行下标，
    同一偏移内 out_idx 互不重复，因此 scatter 可以直接用 += 完成。
    """
    mode: str
    kernel_size: int
    grid_size: int
    input_keys: np.ndarray
    output_coords: np.ndarray
    pairs: Tuple[Tuple[np.ndarray, np.ndarray], ...]

    @property
    def num_offsets(self) -> int:
        return len(self.pairs)

    @property
    def num_rules(self) -> int:
        return int(sum(in_idx.size for in_idx, _ in self.pairs))

    @property
    def num_outputs(self) -> int:
        return int(self.output_coords.shape[0])

    @property
    def output_grid_size(self) -> int:
        return self.grid_size if self.mode == SUBMANIFOLD else (self.grid_size + 1) // 2

    @property
    def output_keys(self) -> np.ndarray:
        return pack_keys(self.output_coords)

    @property
    def output_support(self) -> Set[Coord]:
        return {Coord(int(i), int(j)) for i, j in self.output_coords}

    @property
    def rules(self) -> List[Tuple[Coord, int, Coord]]:
        """展开的规则列表，按 (输出站点, 偏移) 排序"""
        input_coords = unpack_keys(self.input_keys)
        flat: List[Tuple[int, int, int]] = []
        for offset, (in_idx, out_idx) in enumerate(self.pairs):
            flat.extend(zip(out_idx.tolist(), [offset] * in_idx.size, in_idx.tolist()))
        flat.sort()
        return [
            (Coord(*map(int, input_coords[i])), o, Coord(*map(int, self.output_coords[u])))
            for u, o, i in flat
        ]

    def check_input(self, x: SparseTensor) -> None:
        """确认张量与构建该 rulebook 的支撑集一致"""
        if x.grid_size != self.grid_size or not np.array_equal(x.keys, self.input_keys):
            raise ContractError(
                f"rulebook（{self.mode}，{self.input_keys.size} 个站点）与输入支撑集"
                f"（{x.num_active} 个站点）不匹配"
            )


def build_submanifold_rulebook(support: Any, kernel_size: int, grid_size: int) -> RuleBook:
    """子流形卷积 rulebook：输出支撑集等于输入支撑集

    对每个输出站点 u 与偏移 δ，当 u + δ 在支撑集内且在网格范围内时生成一条规则；
    偏移下标按 (di, dj) 的行优先顺序编号。
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"子流形卷积核大小必须为正奇数，实际为 {kernel_size}")
    coords = as_coord_array(support)
    _check_range(coords, grid_size)
    coords, keys = _sorted_unique(coords)

    r = kernel_size // 2
    pairs = []
    all_rows = np.arange(keys.size, dtype=np.int64)
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if keys.size == 0:
                pairs.append((np.zeros(0, np.int64), np.zeros(0, np.int64)))
                continue
            neighbor = coords + np.array([di, dj], dtype=np.int64)
            inside = ((neighbor >= 0) & (neighbor < grid_size)).all(axis=1)
            found = np.full(keys.size, -1, dtype=np.int64)
            found[inside] = _lookup(keys, pack_keys(neighbor[inside]))
            hit = found >= 0
            pairs.append((found[hit], all_rows[hit]))

    logger.debug(f"子流形 rulebook: {keys.size} 个站点, {sum(p[0].size for p in pairs)} 条规则")
    return RuleBook(
        mode=SUBMANIFOLD,
        kernel_size=kernel_size,
        grid_size=int(grid_size),
        input_keys=keys,
        output_coords=coords,
        pairs=tuple(pairs),
    )


def build_pool_rulebook(support: Any, grid_size: int) -> RuleBook:
    """步长 2 池化 rulebook：每个输入站点归入 (⌊i/2⌋, ⌊j/2⌋)

    偏移下标为 (i % 2) * 2 + (j % 2)；没有活跃输入的 2×2 窗口不产生输出。
    """
    coords = as_coord_array(support)
    _check_range(coords, grid_size)
    coords, keys = _sorted_unique(coords)

    halved = coords // 2
    out_keys = np.unique(pack_keys(halved))
    out_rows = _lookup(out_keys, pack_keys(halved))
    offsets = (coords[:, 0] % 2) * 2 + (coords[:, 1] % 2)
    all_rows = np.arange(keys.size, dtype=np.int64)
    pairs = tuple(
        (all_rows[offsets == o], out_rows[offsets == o]) for o in range(4)
    )
    return RuleBook(
        mode=POOL2,
        kernel_size=2,
        grid_size=int(grid_size),
        input_keys=keys,
        output_coords=unpack_keys(out_keys),
        pairs=pairs,
    )


def pooled_grid_size(grid_size: int, times: int = 1) -> int:
    """池化 times 次后的网格大小 ⌈K / 2^times⌉"""
    size = int(grid_size)
    for _ in range(times):
        size = (size + 1) // 2
    return size


def supports_equal(tensors: Iterable[SparseTensor], others: Iterable[SparseTensor]) -> bool:
    """逐个比较支撑集；批次长度不同视为不相等"""
    tensors, others = list(tensors), list(others)
    return len(tensors) == len(others) and all(a.same_support(b) for a, b in zip(tensors, others))
