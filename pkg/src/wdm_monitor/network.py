"""SSCN 网络：SSC 块堆叠、到潜在向量的最终卷积、FC + SoftMax 头，以及 Adam 训练"""

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, BATCH_SIZE, BN_EPS, BN_MOMENTUM,
    DEFAULT_GRID_SIZE, DEFAULT_SEED, DESK_BLOCK_CHANNELS, DESK_LATENT_DIM,
    EPOCHS, KERNEL_SIZE, LEARNING_RATE, reject_unknown_keys, require,
)
from .exceptions import ConfigError, ContractError, DataError
from .layers import (
    EVAL, TRAIN, BatchNorm, LayerCache, SscLayer, batchnorm_backward,
    batchnorm_forward, log_softmax, maxpool2_backward, maxpool2_forward,
    relu_backward, relu_forward, softmax, ssc_backward, ssc_forward,
)
from .models import TrainingRun, Wdm
from .sparse_tensor import (
    SparseTensor, build_pool_rulebook, build_submanifold_rulebook, pooled_grid_size,
)
from .utils import make_progress, parallel_map, rng_stream

logger = logging.getLogger(__name__)

Augmenter = Callable[[Wdm, np.random.Generator], Wdm]


@dataclass
class SscnConfig:
    """网络结构配置"""
    num_blocks: int = len(DESK_BLOCK_CHANNELS)
    block_channels: List[int] = field(default_factory=lambda: list(DESK_BLOCK_CHANNELS))
    kernel_size: Union[int, List[int]] = KERNEL_SIZE
    latent_dim: int = DESK_LATENT_DIM
    num_classes: int = 2
    grid_size: int = DEFAULT_GRID_SIZE
    seed: int = DEFAULT_SEED
    in_channels: int = 1
    bn_momentum: float = BN_MOMENTUM
    bn_eps: float = BN_EPS
    class_names: Optional[List[str]] = None

    def __post_init__(self) -> None:
        self.block_channels = [int(c) for c in self.block_channels]
        require(self.num_blocks >= 1, f"num_blocks 必须 ≥ 1: {self.num_blocks}")
        require(len(self.block_channels) == self.num_blocks,
                f"block_channels 长度 {len(self.block_channels)} 与 num_blocks {self.num_blocks} 不一致")
        require(all(c >= 1 for c in self.block_channels), "block_channels 必须全为正整数")
        require(self.latent_dim > 0, f"latent_dim 必须为正: {self.latent_dim}")
        require(self.num_classes >= 2, f"num_classes 必须 ≥ 2: {self.num_classes}")
        require(self.in_channels >= 1, "in_channels 必须 ≥ 1")
        require(2 ** self.num_blocks <= self.grid_size,
                f"下采样倍数 2^{self.num_blocks} 超过网格大小 {self.grid_size}")
        for k in self.kernel_sizes:
            require(k >= 1 and k % 2 == 1, f"卷积核大小必须为正奇数: {k}")
        if self.class_names is not None:
            self.class_names = [str(c) for c in self.class_names]
            require(len(self.class_names) == self.num_classes,
                    f"class_names 数量 {len(self.class_names)} 与 num_classes {self.num_classes} 不一致")

    @property
    def kernel_sizes(self) -> List[int]:
        if isinstance(self.kernel_size, int):
            return [self.kernel_size] * self.num_blocks
        sizes = [int(k) for k in self.kernel_size]
        require(len(sizes) == self.num_blocks, "kernel_size 列表长度必须等于 num_blocks")
        return sizes

    @property
    def residual_extent(self) -> int:
        """num_blocks 次池化后的残余网格边长 ⌈K / 2^num_blocks⌉"""
        return pooled_grid_size(self.grid_size, self.num_blocks)

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return {
            'num_blocks': self.num_blocks,
            'block_channels': list(self.block_channels),
            'kernel_size': self.kernel_size if isinstance(self.kernel_size, int) else list(self.kernel_size),
            'latent_dim': self.latent_dim,
            'num_classes': self.num_classes,
            'grid_size': self.grid_size,
            'seed': self.seed,
            'in_channels': self.in_channels,
            'bn_momentum': self.bn_momentum,
            'bn_eps': self.bn_eps,
            'class_names': list(self.class_names) if self.class_names is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SscnConfig':
        """从字典创建实例（拒绝未知字段）"""
        reject_unknown_keys('network', data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass
class TrainConfig:
    """训练配置"""
    learning_rate: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    seed: int = DEFAULT_SEED

    def __post_init__(self) -> None:
        require(self.learning_rate > 0, f"learning_rate 必须为正: {self.learning_rate}")
        require(0 < self.beta1 < 1 and 0 < self.beta2 < 1, "Adam beta 必须在 (0, 1) 内")
        require(self.eps > 0, "Adam eps 必须为正")
        require(self.batch_size >= 1, f"batch_size 必须 ≥ 1: {self.batch_size}")
        require(self.epochs >= 1, f"epochs 必须 ≥ 1: {self.epochs}")

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典"""
        return {
            'learning_rate': self.learning_rate,
            'beta1': self.beta1,
            'beta2': self.beta2,
            'eps': self.eps,
            'batch_size': self.batch_size,
            'epochs': self.epochs,
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainConfig':
        """从字典创建实例（拒绝未知字段）"""
        reject_unknown_keys('train', data, cls.__dataclass_fields__)
        return cls(**data)


@dataclass
class SscnBlock:
    """SSC → BN → ReLU → 池化"""
    ssc: SscLayer
    bn: BatchNorm


class Sscn:
    """子流形稀疏卷积网络"""

    def __init__(self, config: SscnConfig, blocks: List[SscnBlock],
                 final_weight: np.ndarray, final_bias: np.ndarray,
                 fc_weight: np.ndarray, fc_bias: np.ndarray):
        self.config = config
        self.blocks = blocks
        self.final_weight = final_weight
        self.final_bias = final_bias
        self.fc_weight = fc_weight
        self.fc_bias = fc_bias
        cells = config.residual_extent ** 2 * config.block_channels[-1]
        if final_weight.shape != (cells, config.latent_dim):
            raise ContractError(f"最终卷积权重形状应为 {(cells, config.latent_dim)}")
        if fc_weight.shape != (config.latent_dim, config.num_classes):
            raise ContractError(f"FC 权重形状应为 {(config.latent_dim, config.num_classes)}")

    def params(self) -> 'OrderedDict[str, np.ndarray]':
        """可训练参数（返回的是模型内数组本身，原地修改即更新模型）"""
        out: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        for b, block in enumerate(self.blocks):
            out[f'blocks.{b}.ssc.weight'] = block.ssc.weight
            out[f'blocks.{b}.ssc.bias'] = block.ssc.bias
            out[f'blocks.{b}.bn.gamma'] = block.bn.gamma
            out[f'blocks.{b}.bn.beta'] = block.bn.beta
        out['final.weight'] = self.final_weight
        out['final.bias'] = self.final_bias
        out['fc.weight'] = self.fc_weight
        out['fc.bias'] = self.fc_bias
        return out

    def buffers(self) -> 'OrderedDict[str, np.ndarray]':
        """非训练状态（BN 运行统计量）"""
        out: 'OrderedDict[str, np.ndarray]' = OrderedDict()
        for b, block in enumerate(self.blocks):
            out[f'blocks.{b}.bn.running_mean'] = block.bn.running_mean
            out[f'blocks.{b}.bn.running_var'] = block.bn.running_var
        return out

    @property
    def param_count(self) -> int:
        return int(sum(p.size for p in self.params().values()))

    def param_groups(self) -> List[Tuple[str, int]]:
        """按层分组的参数量"""
        groups: List[Tuple[str, int]] = []
        for b, block in enumerate(self.blocks):
            groups.append((f'blocks.{b}.ssc', block.ssc.param_count))
            groups.append((f'blocks.{b}.bn', block.bn.param_count))
        groups.append(('final', int(self.final_weight.size + self.final_bias.size)))
        groups.append(('fc', int(self.fc_weight.size + self.fc_bias.size)))
        return groups

    def set_mode(self, mode: str) -> None:
        for block in self.blocks:
            block.bn.mode = mode

    @property
    def mode(self) -> str:
        return self.blocks[0].bn.mode

    def class_name(self, index: int) -> str:
        names = self.config.class_names
        return names[index] if names is not None else str(index)

    def class_index(self) -> Dict[str, int]:
        names = self.config.class_names
        if names is None:
            raise ContractError("网络配置缺少 class_names，无法映射标签")
        return {name: i for i, name in enumerate(names)}

    def summary(self) -> str:
        """网络结构摘要表"""
        lines = [f"{'层':<20}{'参数量':>10}"]
        for name, count in self.param_groups():
            lines.append(f"{name:<20}{count:>10}")
        lines.append(f"{'合计':<20}{self.param_count:>10}")
        return "\n".join(lines)


def build_network(cfg: SscnConfig, rng_seed: Optional[int] = None) -> Sscn:
    """按配置构建网络，He 初始化（按 fan-in 缩放），固定种子时结果确定"""
    seed = cfg.seed if rng_seed is None else rng_seed
    rng = rng_stream(seed, 0)
    blocks = []
    in_ch = cfg.in_channels
    for out_ch, k in zip(cfg.block_channels, cfg.kernel_sizes):
        ssc = SscLayer.initialize(k, in_ch, out_ch, rng)
        bn = BatchNorm(out_ch, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        blocks.append(SscnBlock(ssc, bn))
        in_ch = out_ch

    cells = cfg.residual_extent ** 2 * in_ch
    final_weight = rng.normal(0.0, np.sqrt(1.0 / in_ch), size=(cells, cfg.latent_dim))
    fc_weight = rng.normal(0.0, np.sqrt(1.0 / cfg.latent_dim), size=(cfg.latent_dim, cfg.num_classes))
    model = Sscn(cfg, blocks, final_weight, np.zeros(cfg.latent_dim),
                 fc_weight, np.zeros(cfg.num_classes))
    logger.debug(f"构建网络: {cfg.num_blocks} 个块, 残余网格 {cfg.residual_extent}, 参数量 {model.param_count}")
    return model


@dataclass
class ForwardCache:
    """整批前向的反向传播记录"""
    blocks: List[Dict[str, Any]]
    final_rows: List[np.ndarray]
    final_inputs: List[SparseTensor]
    latents: np.ndarray


def _check_inputs(model: Sscn, batch: Sequence[SparseTensor]) -> None:
    cfg = model.config
    for t in batch:
        if t.grid_size != cfg.grid_size:
            raise ContractError(f"输入网格 {t.grid_size} 与网络配置 {cfg.grid_size} 不一致")
        if t.channels != cfg.in_channels:
            raise ContractError(f"输入通道 {t.channels} 与网络配置 {cfg.in_channels} 不一致")


def forward_batch(model: Sscn, batch: Sequence[SparseTensor], mode: Optional[str] = None,
                  workers: int = 1, update_running: bool = True
                  ) -> Tuple[np.ndarray, np.ndarray, ForwardCache]:
    """整批前向：返回 (latents (B, L), scores (B, #L), cache)

    BN 的统计量跨整批活跃站点汇总，其余层逐样本计算。
    """
    if not batch:
        raise DataError("前向传播收到空批次")
    _check_inputs(model, batch)
    if mode is not None:
        model.set_mode(mode)

    xs = list(batch)
    block_caches: List[Dict[str, Any]] = []
    for block in model.blocks:
        k = block.ssc.kernel_size

        def conv(x: SparseTensor, layer: SscLayer = block.ssc, k: int = k) -> Tuple[SparseTensor, LayerCache]:
            rb = build_submanifold_rulebook(x, k, x.grid_size)
            return ssc_forward(layer, x, rb)

        conv_out = parallel_map(conv, xs, workers)
        bn_out, bn_cache = batchnorm_forward(block.bn, [y for y, _ in conv_out], update_running)
        relu_out = [relu_forward(y) for y in bn_out]
        pool_out = parallel_map(
            lambda x: maxpool2_forward(x, build_pool_rulebook(x, x.grid_size)),
            [y for y, _ in relu_out], workers,
        )
        block_caches.append({
            'ssc': [c for _, c in conv_out],
            'bn': bn_cache,
            'relu': [c for _, c in relu_out],
            'pool': [c for _, c in pool_out],
        })
        xs = [y for y, _ in pool_out]

    extent = model.config.residual_extent
    channels = model.config.block_channels[-1]
    w_cells = model.final_weight.reshape(extent * extent, channels, model.config.latent_dim)
    latents = np.tile(model.final_bias, (len(xs), 1))
    rows = []
    for s, x in enumerate(xs):
        cell = x.coords[:, 0] * extent + x.coords[:, 1]
        rows.append(cell)
        if cell.size:
            latents[s] += np.einsum('sc,scl->l', x.features, w_cells[cell])
    scores = latents @ model.fc_weight + model.fc_bias
    return latents, scores, ForwardCache(block_caches, rows, xs, latents)


def backward_batch(model: Sscn, cache: ForwardCache, d_scores: np.ndarray,
                   d_latents: Optional[np.ndarray] = None) -> 'OrderedDict[str, np.ndarray]':
    """整批反向：返回与 params() 同名同形的梯度"""
    cfg = model.config
    grads: 'OrderedDict[str, np.ndarray]' = OrderedDict(
        (name, np.zeros_like(p)) for name, p in model.params().items()
    )
    grads['fc.weight'] = cache.latents.T @ d_scores
    grads['fc.bias'] = d_scores.sum(axis=0)
    d_lat = d_scores @ model.fc_weight.T
    if d_latents is not None:
        d_lat = d_lat + d_latents

    extent = cfg.residual_extent
    channels = cfg.block_channels[-1]
    w_cells = model.final_weight.reshape(extent * extent, channels, cfg.latent_dim)
    g_cells = np.zeros_like(w_cells)
    grads['final.bias'] = d_lat.sum(axis=0)
    gs: List[SparseTensor] = []
    for s, (x, cell) in enumerate(zip(cache.final_inputs, cache.final_rows)):
        if cell.size:
            g_cells[cell] += x.features[:, :, None] * d_lat[s][None, None, :]
            gs.append(x.with_features(np.einsum('scl,l->sc', w_cells[cell], d_lat[s])))
        else:
            gs.append(x.with_features(np.zeros((0, channels))))
    grads['final.weight'] = g_cells.reshape(model.final_weight.shape)

    for b in reversed(range(len(model.blocks))):
        block = model.blocks[b]
        bc = cache.blocks[b]
        gs = [maxpool2_backward(c, g) for c, g in zip(bc['pool'], gs)]
        gs = [relu_backward(c, g) for c, g in zip(bc['relu'], gs)]
        gs, g_gamma, g_beta = batchnorm_backward(block.bn, bc['bn'], gs)
        grads[f'blocks.{b}.bn.gamma'] = g_gamma
        grads[f'blocks.{b}.bn.beta'] = g_beta
        g_w = np.zeros_like(block.ssc.weight)
        g_b = np.zeros_like(block.ssc.bias)
        next_gs = []
        for c, g in zip(bc['ssc'], gs):
            g_in, gw, gb = ssc_backward(block.ssc, c, g)
            g_w += gw
            g_b += gb
            next_gs.append(g_in)
        grads[f'blocks.{b}.ssc.weight'] = g_w
        grads[f'blocks.{b}.ssc.bias'] = g_b
        gs = next_gs
    return grads


def forward(model: Sscn, w: SparseTensor, mode: str = EVAL) -> Tuple[np.ndarray, np.ndarray]:
    """单个 WDM 前向：返回 (latent L(w), scores v)"""
    latents, scores, _ = forward_batch(model, [w], mode=mode, update_running=False)
    return latents[0], scores[0]


def embed(model: Sscn, wdms: Sequence[Union[Wdm, SparseTensor]], batch_size: int = 32,
          workers: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """评估模式下批量计算 (latents, scores)"""
    if not wdms:
        return np.zeros((0, model.config.latent_dim)), np.zeros((0, model.config.num_classes))
    tensors = [w.to_sparse() if isinstance(w, Wdm) else w for w in wdms]
    latents, scores = [], []
    for start in range(0, len(tensors), batch_size):
        lat, sc, _ = forward_batch(model, tensors[start:start + batch_size], mode=EVAL,
                                   workers=workers, update_running=False)
        latents.append(lat)
        scores.append(sc)
    return np.concatenate(latents), np.concatenate(scores)


def loss_and_grads(model: Sscn, batch: Sequence[Tuple[SparseTensor, int]],
                   workers: int = 1) -> Tuple[float, 'OrderedDict[str, np.ndarray]']:
    """交叉熵损失（批均值）及全部参数梯度，训练模式"""
    if not batch:
        raise DataError("loss_and_grads 收到空批次")
    labels = np.asarray([int(y) for _, y in batch], dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.config.num_classes:
        raise ContractError(f"标签越界: 必须在 [0, {model.config.num_classes}) 内")

    _, scores, cache = forward_batch(model, [t for t, _ in batch], mode=TRAIN, workers=workers)
    logp = log_softmax(scores)
    n = labels.size
    loss = float(-logp[np.arange(n), labels].mean())
    d_scores = softmax(scores)
    d_scores[np.arange(n), labels] -= 1.0
    d_scores /= n
    return loss, backward_batch(model, cache, d_scores)


@dataclass
class AdamState:
    """Adam 一阶/二阶矩与步数"""
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> 'AdamState':
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float = LEARNING_RATE, beta1: float = ADAM_BETA1,
              beta2: float = ADAM_BETA2, eps: float = ADAM_EPS) -> AdamState:
    """带偏差修正的 Adam 更新，原地修改 params"""
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ContractError("Adam: 参数、梯度与状态的名称不一致")
    for name, p in params.items():
        if grads[name].shape != p.shape or state.m[name].shape != p.shape:
            raise ContractError(f"Adam: {name} 形状不一致 {p.shape} / {grads[name].shape}")

    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def fit(model: Sscn, train_set: Sequence[Wdm], train_cfg: TrainConfig,
        augmenter: Optional[Augmenter] = None, workers: int = 1,
        show_progress: bool = False) -> TrainingRun:
    """小批量 Adam 训练；每个 epoch 对每个样本用独立随机流重新增强"""
    if not train_set:
        raise DataError("训练集为空")
    index = model.class_index()
    for w in train_set:
        if w.label is None or w.label.value not in index:
            raise DataError(f"训练样本 {w.id} 的标签 {w.label} 不在网络类别中")

    run = TrainingRun(samples=len(train_set))
    state = AdamState.zeros_like(model.params())
    n = len(train_set)
    progress = make_progress(train_cfg.epochs, "训练", enabled=show_progress)

    logger.info(f"开始训练: {n} 个样本, {train_cfg.epochs} 个 epoch, batch {train_cfg.batch_size}")
    for epoch in range(train_cfg.epochs):
        order = rng_stream(train_cfg.seed, 1, epoch).permutation(n)
        total = 0.0
        for start in range(0, n, train_cfg.batch_size):
            batch = []
            for idx in order[start:start + train_cfg.batch_size]:
                w = train_set[int(idx)]
                if augmenter is not None:
                    augmented = augmenter(w, rng_stream(train_cfg.seed, 2, epoch, int(idx)))
                    if augmented.label != w.label:
                        raise ContractError(f"增强改变了样本 {w.id} 的标签")
                    w = augmented
                batch.append((w.to_sparse(), index[w.label.value]))
            loss, grads = loss_and_grads(model, batch, workers)
            adam_step(model.params(), grads, state, train_cfg.learning_rate,
                      train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            total += loss * len(batch)
        run.add_epoch(total / n)
        logger.debug(f"epoch {epoch + 1}/{train_cfg.epochs} 损失 {run.final_loss:.6f}")
        progress.update(status=f"损失 {run.final_loss:.4f}")
    progress.finish()

    model.set_mode(EVAL)
    _, scores = embed(model, train_set, workers=workers)
    truth = np.asarray([index[w.label.value] for w in train_set])
    run.train_accuracy = float(np.mean(scores.argmax(axis=1) == truth))
    run.mark_completed()
    logger.info(f"训练完成: 最终损失 {run.final_loss:.4f}, 训练准确率 {run.train_accuracy:.1%}, 耗时 {run.duration}")
    return run


# 检查点格式见 docs/CHECKPOINT.md
CHECKPOINT_MAGIC = b'WDMCKPT\x00'
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Sscn, path: Path, provenance: Optional[Dict[str, Any]] = None) -> None:
    """保存网络检查点（配置 + 参数 + BN 统计量，小端 float64）"""
    arrays = OrderedDict(list(model.params().items()) + list(model.buffers().items()))
    sections = []
    offset = 0
    for name, arr in arrays.items():
        sections.append({'name': name, 'shape': list(arr.shape), 'offset': offset, 'count': int(arr.size)})
        offset += int(arr.size) * 8
    header = json.dumps({
        'config': model.config.to_dict(),
        'provenance': provenance or {},
        'sections': sections,
    }, sort_keys=True).encode('utf-8')

    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack('<II', CHECKPOINT_VERSION, len(header)))
        f.write(header)
        for arr in arrays.values():
            f.write(np.ascontiguousarray(arr, dtype='<f8').tobytes())
    logger.info(f"检查点已保存: {path}")


def load_checkpoint(path: Path) -> Tuple[Sscn, Dict[str, Any]]:
    """读取检查点，返回 (网络, provenance)"""
    if not path.exists():
        raise DataError(f"检查点不存在: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise DataError(f"不是有效的检查点文件: {path}")
    version, header_len = struct.unpack('<II', raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"不支持的检查点版本 {version}")
    header = json.loads(raw[16:16 + header_len].decode('utf-8'))
    data = raw[16 + header_len:]

    try:
        cfg = SscnConfig.from_dict(header['config'])
    except ConfigError as e:
        raise DataError(f"检查点配置无效: {e}")
    model = build_network(cfg)
    targets = OrderedDict(list(model.params().items()) + list(model.buffers().items()))
    for section in header['sections']:
        name = section['name']
        if name not in targets:
            raise DataError(f"检查点含未知段 {name}")
        start = section['offset']
        values = np.frombuffer(data, dtype='<f8', count=section['count'], offset=start)
        target = targets[name]
        if list(target.shape) != section['shape']:
            raise DataError(f"检查点段 {name} 形状 {section['shape']} 与配置不符")
        target[...] = values.reshape(target.shape)
    model.set_mode(EVAL)
    return model, header.get('provenance', {})
