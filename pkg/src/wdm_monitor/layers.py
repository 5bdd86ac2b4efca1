"""稀疏层的前向与反向传播

SSC、活跃站点上的批归一化、ReLU、步长 2 最大池化，以及 SoftMax。
训练路径全部使用 float64。
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .config import BN_EPS, BN_MOMENTUM
from .exceptions import ConfigError, ContractError, DataError
from .sparse_tensor import POOL2, SUBMANIFOLD, RuleBook, SparseTensor

logger = logging.getLogger(__name__)

TRAIN = 'train'
EVAL = 'eval'


@dataclass
class SscLayer:
    """子流形稀疏卷积层，weight 形状为 (k², Cin, Cout)"""
    kernel_size: int
    in_channels: int
    out_channels: int
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        expected = (self.kernel_size ** 2, self.in_channels, self.out_channels)
        if self.weight.shape != expected:
            raise ContractError(f"SSC 权重形状应为 {expected}，实际为 {self.weight.shape}")
        if self.bias.shape != (self.out_channels,):
            raise ContractError(f"SSC 偏置形状应为 ({self.out_channels},)，实际为 {self.bias.shape}")

    @classmethod
    def initialize(cls, kernel_size: int, in_channels: int, out_channels: int,
                   rng: np.random.Generator) -> 'SscLayer':
        """He 初始化（按 fan-in 缩放），偏置为零"""
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"卷积核大小必须为正奇数: {kernel_size}")
        fan_in = kernel_size ** 2 * in_channels
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(kernel_size ** 2, in_channels, out_channels))
        return cls(kernel_size, in_channels, out_channels, weight, np.zeros(out_channels))

    @property
    def param_count(self) -> int:
        return self.kernel_size ** 2 * self.in_channels * self.out_channels + self.out_channels


@dataclass
class BatchNorm:
    """活跃站点上的批归一化"""
    channels: int
    gamma: np.ndarray = field(default=None)  # type: ignore[assignment]
    beta: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    running_var: np.ndarray = field(default=None)  # type: ignore[assignment]
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM
    mode: str = TRAIN

    def __post_init__(self) -> None:
        c = self.channels
        self.gamma = np.ones(c) if self.gamma is None else np.asarray(self.gamma, dtype=np.float64)
        self.beta = np.zeros(c) if self.beta is None else np.asarray(self.beta, dtype=np.float64)
        self.running_mean = (np.zeros(c) if self.running_mean is None
                             else np.asarray(self.running_mean, dtype=np.float64))
        self.running_var = (np.ones(c) if self.running_var is None
                            else np.asarray(self.running_var, dtype=np.float64))
        if self.eps <= 0:
            raise ConfigError(f"BN eps 必须为正: {self.eps}")
        if not 0 < self.momentum < 1:
            raise ConfigError(f"BN momentum 必须在 (0, 1) 内: {self.momentum}")
        if self.mode not in (TRAIN, EVAL):
            raise ConfigError(f"BN 模式必须是 train 或 eval: {self.mode}")
        for name in ('gamma', 'beta', 'running_mean', 'running_var'):
            if getattr(self, name).shape != (c,):
                raise ContractError(f"BN {name} 形状应为 ({c},)")

    @property
    def param_count(self) -> int:
        return 2 * self.channels


@dataclass
class LayerCache:
    """反向传播所需的前向记录，只对产生它的那一次前向调用有效"""
    kind: str
    data: Dict[str, Any] = field(default_factory=dict)


def _check_grad_support(cache: LayerCache, grad_out: SparseTensor) -> None:
    keys = cache.data['output_keys']
    if not np.array_equal(grad_out.keys, keys):
        raise ContractError(f"{cache.kind} 反向传播: 梯度支撑集与前向输出不一致")


def ssc_forward(layer: SscLayer, x: SparseTensor, rb: RuleBook) -> Tuple[SparseTensor, LayerCache]:
    """子流形卷积：只在活跃站点上计算，输出支撑集等于输入支撑集"""
    if x.channels != layer.in_channels:
        raise ContractError(f"SSC 输入通道 {x.channels} 与层定义 {layer.in_channels} 不一致")
    if rb.mode != SUBMANIFOLD or rb.kernel_size != layer.kernel_size:
        raise ContractError(
            f"rulebook 类型 {rb.mode}/k={rb.kernel_size} 与 SSC 层 k={layer.kernel_size} 不匹配"
        )
    rb.check_input(x)

    out = np.tile(layer.bias, (x.num_active, 1))
    feats = x.features
    for offset, (in_idx, out_idx) in enumerate(rb.pairs):
        if in_idx.size:
            out[out_idx] += feats[in_idx] @ layer.weight[offset]

    y = x.with_features(out)
    return y, LayerCache('ssc', {'x': x, 'rb': rb, 'output_keys': y.keys})


def ssc_backward(layer: SscLayer, cache: LayerCache,
                 grad_out: SparseTensor) -> Tuple[SparseTensor, np.ndarray, np.ndarray]:
    """SSC 反向：返回 (输入梯度, 权重梯度, 偏置梯度)"""
    _check_grad_support(cache, grad_out)
    x: SparseTensor = cache.data['x']
    rb: RuleBook = cache.data['rb']
    g = grad_out.features

    grad_w = np.zeros_like(layer.weight)
    grad_x = np.zeros_like(x.features)
    for offset, (in_idx, out_idx) in enumerate(rb.pairs):
        if in_idx.size:
            g_rows = g[out_idx]
            grad_w[offset] = x.features[in_idx].T @ g_rows
            grad_x[in_idx] += g_rows @ layer.weight[offset].T
    grad_b = g.sum(axis=0)
    return x.with_features(grad_x), grad_w, grad_b


def batchnorm_forward(bn: BatchNorm, batch: Sequence[SparseTensor],
                      update_running: bool = True) -> Tuple[List[SparseTensor], LayerCache]:
    """批归一化：训练模式下统计量在整个批次的全部活跃站点上汇总"""
    if not batch:
        raise DataError("批归一化收到空批次")
    for t in batch:
        if t.channels != bn.channels:
            raise ContractError(f"BN 通道 {bn.channels} 与输入通道 {t.channels} 不一致")

    sizes = [t.num_active for t in batch]
    stacked = np.concatenate([t.features for t in batch], axis=0)

    if bn.mode == TRAIN:
        if stacked.shape[0] == 0:
            raise DataError("训练模式下批次没有任何活跃站点，无法计算 BN 统计量")
        mean = stacked.mean(axis=0)
        var = stacked.var(axis=0)
        if update_running:
            bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
            bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * var
    else:
        mean = bn.running_mean
        var = bn.running_var

    inv_std = 1.0 / np.sqrt(var + bn.eps)
    x_hat = (stacked - mean) * inv_std
    y = bn.gamma * x_hat + bn.beta

    outputs = []
    start = 0
    for t, n in zip(batch, sizes):
        outputs.append(t.with_features(y[start:start + n]))
        start += n

    cache = LayerCache('bn', {
        'x_hat': x_hat,
        'inv_std': inv_std,
        'sizes': sizes,
        'mode': bn.mode,
        'output_keys_list': [t.keys for t in outputs],
    })
    return outputs, cache


def batchnorm_backward(bn: BatchNorm, cache: LayerCache,
                       grads: Sequence[SparseTensor]) -> Tuple[List[SparseTensor], np.ndarray, np.ndarray]:
    """BN 反向：返回 (各样本输入梯度, gamma 梯度, beta 梯度)"""
    keys_list = cache.data['output_keys_list']
    if len(grads) != len(keys_list) or not all(
            np.array_equal(g.keys, k) for g, k in zip(grads, keys_list)):
        raise ContractError("bn 反向传播: 梯度支撑集与前向输出不一致")

    g = np.concatenate([t.features for t in grads], axis=0)
    x_hat = cache.data['x_hat']
    inv_std = cache.data['inv_std']

    grad_beta = g.sum(axis=0)
    grad_gamma = (g * x_hat).sum(axis=0)
    d_xhat = g * bn.gamma
    if cache.data['mode'] == TRAIN:
        n = g.shape[0]
        grad_x = (inv_std / n) * (
            n * d_xhat - d_xhat.sum(axis=0) - x_hat * (d_xhat * x_hat).sum(axis=0)
        )
    else:
        grad_x = d_xhat * inv_std

    outputs = []
    start = 0
    for t, n in zip(grads, cache.data['sizes']):
        outputs.append(t.with_features(grad_x[start:start + n]))
        start += n
    return outputs, grad_gamma, grad_beta


def relu_forward(x: SparseTensor) -> Tuple[SparseTensor, LayerCache]:
    """逐元素 max(0, ·)；特征变为零的站点仍保持活跃"""
    mask = x.features > 0
    y = x.with_features(np.where(mask, x.features, 0.0))
    return y, LayerCache('relu', {'mask': mask, 'output_keys': y.keys})


def relu_backward(cache: LayerCache, grad_out: SparseTensor) -> SparseTensor:
    _check_grad_support(cache, grad_out)
    return grad_out.with_features(np.where(cache.data['mask'], grad_out.features, 0.0))


def maxpool2_forward(x: SparseTensor, rb: RuleBook) -> Tuple[SparseTensor, LayerCache]:
    """步长 2 最大池化；并列最大值取排序最靠前的输入站点"""
    if rb.mode != POOL2:
        raise ContractError(f"最大池化需要 pool2 rulebook，实际为 {rb.mode}")
    rb.check_input(x)

    channels = x.channels
    m = rb.num_outputs
    out = np.full((m, channels), -np.inf)
    for in_idx, out_idx in rb.pairs:
        if in_idx.size:
            out[out_idx] = np.maximum(out[out_idx], x.features[in_idx])

    sentinel = np.iinfo(np.int64).max
    argmax = np.full((m, channels), sentinel, dtype=np.int64)
    for in_idx, out_idx in rb.pairs:
        if in_idx.size:
            is_max = x.features[in_idx] == out[out_idx]
            candidate = np.where(is_max, in_idx[:, None], sentinel)
            argmax[out_idx] = np.minimum(argmax[out_idx], candidate)

    y = SparseTensor(rb.output_grid_size, rb.output_coords, out)
    cache = LayerCache('maxpool2', {
        'argmax': argmax,
        'input': x,
        'output_keys': y.keys,
    })
    return y, cache


def maxpool2_backward(cache: LayerCache, grad_out: SparseTensor) -> SparseTensor:
    """梯度只回传到 argmax 站点"""
    _check_grad_support(cache, grad_out)
    x: SparseTensor = cache.data['input']
    argmax = cache.data['argmax']
    grad_x = np.zeros_like(x.features)
    cols = np.broadcast_to(np.arange(x.channels), argmax.shape)
    grad_x[argmax, cols] = grad_out.features
    return x.with_features(grad_x)


def softmax(v: Any) -> np.ndarray:
    """数值稳定的 SoftMax（沿最后一维）"""
    arr = np.asarray(v, dtype=np.float64)
    if np.isnan(arr).any():
        raise DataError("SoftMax 输入包含 NaN")
    return special.softmax(arr, axis=-1)


def log_softmax(v: Any) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if np.isnan(arr).any():
        raise DataError("SoftMax 输入包含 NaN")
    return special.log_softmax(arr, axis=-1)


def set_mode(layers: Sequence[BatchNorm], mode: str, momentum: Optional[float] = None) -> None:
    """批量切换 BN 模式"""
    for bn in layers:
        bn.mode = mode
        if momentum is not None:
            bn.momentum = momentum
