"""测试稀疏层的前向与反向"""

import numpy as np
import pytest

from wdm_monitor.exceptions import ConfigError, ContractError, DataError
from wdm_monitor.layers import (
    EVAL, TRAIN, BatchNorm, SscLayer, batchnorm_backward, batchnorm_forward, log_softmax,
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, softmax, ssc_backward,
    ssc_forward,
)
from wdm_monitor.sparse_tensor import (
    Coord, SparseTensor, build_pool_rulebook, build_submanifold_rulebook, supports_equal,
)


def _random_tensor(rng, grid_size=8, channels=2, density=0.35):
    mask = rng.random((grid_size, grid_size)) < density
    coords = np.argwhere(mask)
    return SparseTensor(grid_size, coords, rng.normal(size=(len(coords), channels)))


def _dense_conv_oracle(x: SparseTensor, layer: SscLayer) -> np.ndarray:
    """稠密互相关后乘以支撑集指示函数，再在活跃站点加偏置"""
    dense = x.to_dense()
    k, r = layer.kernel_size, layer.kernel_size // 2
    K = x.grid_size
    padded = np.zeros((K + 2 * r, K + 2 * r, x.channels))
    padded[r:r + K, r:r + K] = dense
    out = np.zeros((K, K, layer.out_channels))
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            w = layer.weight[(di + r) * k + (dj + r)]
            out += padded[r + di:r + di + K, r + dj:r + dj + K] @ w
    mask = np.zeros((K, K, 1))
    mask[x.coords[:, 0], x.coords[:, 1]] = 1.0
    return (out + layer.bias) * mask


def _finite_difference(f, arr, index, h=1e-5):
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def _rel_err(a, b):
    return abs(a - b) / max(1e-3, abs(a) + abs(b))


class TestSscForward:
    """测试子流形卷积前向"""

    def test_identity_center_weight(self):
        """测试中心单位权重时原样输出"""
        layer = SscLayer(3, 1, 1, np.zeros((9, 1, 1)), np.zeros(1))
        layer.weight[4, 0, 0] = 1.0
        x = SparseTensor.from_sites({(3, 3): 2.5}, 8)
        y, _ = ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 8))
        assert y.sites[Coord(3, 3)][0] == 2.5

    def test_matches_dense_oracle(self, rng):
        """测试与掩码稠密卷积一致"""
        x = _random_tensor(rng)
        layer = SscLayer.initialize(3, 2, 4, rng)
        layer.bias[:] = rng.normal(size=4)
        y, _ = ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 8))
        assert y.same_support(x)
        assert np.max(np.abs(y.to_dense() - _dense_conv_oracle(x, layer))) < 1e-10

    def test_empty_input(self, rng):
        """测试空输入"""
        x = SparseTensor.empty(8, 2)
        layer = SscLayer.initialize(3, 2, 3, rng)
        y, _ = ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 8))
        assert y.num_active == 0
        assert y.channels == 3

    def test_channel_mismatch(self, rng):
        """测试通道数不一致"""
        x = _random_tensor(rng, channels=1)
        layer = SscLayer.initialize(3, 2, 3, rng)
        with pytest.raises(ContractError):
            ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 8))

    def test_rulebook_mismatch(self, rng):
        """测试 rulebook 与支撑集不一致"""
        x = _random_tensor(rng)
        other = SparseTensor.from_points([(0, 0)], 8)
        layer = SscLayer.initialize(3, 2, 3, rng)
        with pytest.raises(ContractError):
            ssc_forward(layer, x, build_submanifold_rulebook(other, 3, 8))

    def test_param_count(self, rng):
        """测试参数量 k²·Cin·Cout + Cout"""
        assert SscLayer.initialize(3, 2, 4, rng).param_count == 9 * 2 * 4 + 4


class TestSscBackward:
    """测试子流形卷积反向"""

    def test_zero_grad(self, rng):
        """测试零梯度"""
        x = _random_tensor(rng)
        layer = SscLayer.initialize(3, 2, 3, rng)
        y, cache = ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 8))
        gx, gw, gb = ssc_backward(layer, cache, y.with_features(np.zeros((y.num_active, 3))))
        assert not gx.features.any() and not gw.any() and not gb.any()

    def test_single_site(self):
        """测试单站点时中心权重梯度为外积"""
        layer = SscLayer(3, 2, 2, np.zeros((9, 2, 2)), np.zeros(2))
        x = SparseTensor.from_sites({(1, 1): [2.0, -1.0]}, 4)
        y, cache = ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 4))
        g = np.array([[0.5, 3.0]])
        _, gw, gb = ssc_backward(layer, cache, y.with_features(g))
        assert np.allclose(gw[4], np.outer([2.0, -1.0], [0.5, 3.0]))
        assert np.allclose(np.delete(gw, 4, axis=0), 0.0)
        assert np.allclose(gb, [0.5, 3.0])

    def test_finite_differences(self, rng):
        """测试解析梯度与中心差分一致"""
        x = _random_tensor(rng, grid_size=6)
        layer = SscLayer.initialize(3, 2, 3, rng)
        rb = build_submanifold_rulebook(x, 3, 6)
        upstream = rng.normal(size=(x.num_active, 3))
        features = np.array(x.features)

        def loss():
            y, _ = ssc_forward(layer, x.with_features(features), rb)
            return float((y.features * upstream).sum())

        y, cache = ssc_forward(layer, x, rb)
        gx, gw, gb = ssc_backward(layer, cache, y.with_features(upstream))
        for _ in range(20):
            idx = tuple(rng.integers(0, s) for s in layer.weight.shape)
            assert _rel_err(gw[idx], _finite_difference(loss, layer.weight, idx)) < 1e-4
            row = (int(rng.integers(0, x.num_active)), int(rng.integers(0, 2)))
            assert _rel_err(gx.features[row], _finite_difference(loss, features, row)) < 1e-4
        assert _rel_err(gb[1], _finite_difference(loss, layer.bias, (1,))) < 1e-4

    def test_support_mismatch(self, rng):
        """测试梯度支撑集不一致"""
        x = _random_tensor(rng)
        layer = SscLayer.initialize(3, 2, 3, rng)
        _, cache = ssc_forward(layer, x, build_submanifold_rulebook(x, 3, 8))
        with pytest.raises(ContractError):
            ssc_backward(layer, cache, SparseTensor.from_sites({(0, 0): [1.0, 1.0, 1.0]}, 8))


class TestBatchNorm:
    """测试活跃站点上的批归一化"""

    def test_two_point_normalization(self):
        """测试两个取值归一化为 ±1"""
        bn = BatchNorm(1, eps=1e-12)
        x = SparseTensor.from_sites({(0, 0): 1.0, (1, 1): 3.0}, 4)
        (y,), _ = batchnorm_forward(bn, [x])
        assert np.allclose(sorted(y.features[:, 0]), [-1.0, 1.0])

    def test_zero_gamma(self, rng):
        """测试 gamma=0 时输出全为 beta"""
        bn = BatchNorm(2, gamma=np.zeros(2), beta=np.array([0.5, -2.0]))
        (y,), _ = batchnorm_forward(bn, [_random_tensor(rng)])
        assert np.allclose(y.features, [0.5, -2.0])

    def test_eval_identity(self, rng):
        """测试 eval 模式下标准运行统计量近似恒等"""
        bn = BatchNorm(2, mode=EVAL, eps=1e-12)
        x = _random_tensor(rng)
        (y,), _ = batchnorm_forward(bn, [x])
        assert np.allclose(y.features, x.features)

    def test_statistics_pooled_over_batch(self, rng):
        """测试统计量在整个批次上汇总"""
        bn = BatchNorm(2, gamma=np.array([2.0, 0.5]), beta=np.array([1.0, -1.0]), eps=1e-12)
        batch = [_random_tensor(rng) for _ in range(3)]
        outputs, _ = batchnorm_forward(bn, batch)
        stacked = np.concatenate([t.features for t in outputs])
        assert np.allclose(stacked.mean(axis=0), [1.0, -1.0], atol=1e-6)
        assert np.allclose(stacked.var(axis=0), [4.0, 0.25], atol=1e-6)
        assert supports_equal(batch, outputs)

    def test_running_stats_update(self):
        """测试运行统计量按 momentum 更新"""
        bn = BatchNorm(1, momentum=0.1)
        x = SparseTensor.from_sites({(0, 0): 1.0, (1, 1): 3.0}, 4)
        batchnorm_forward(bn, [x])
        assert np.allclose(bn.running_mean, [0.2])
        assert np.allclose(bn.running_var, [0.9 + 0.1 * 1.0])

    def test_empty_batch(self):
        """测试空批次与无活跃站点"""
        bn = BatchNorm(1)
        with pytest.raises(DataError):
            batchnorm_forward(bn, [])
        with pytest.raises(DataError):
            batchnorm_forward(bn, [SparseTensor.empty(4)])

    def test_backward_finite_differences(self, rng):
        """测试训练模式反向传播与中心差分一致"""
        bn = BatchNorm(2, gamma=rng.normal(size=2), beta=rng.normal(size=2))
        batch = [_random_tensor(rng, grid_size=5) for _ in range(2)]
        feats = [np.array(t.features) for t in batch]
        upstream = [rng.normal(size=t.features.shape) for t in batch]

        def loss():
            outs, _ = batchnorm_forward(bn, [t.with_features(f) for t, f in zip(batch, feats)],
                                        update_running=False)
            return float(sum((o.features * u).sum() for o, u in zip(outs, upstream)))

        outs, cache = batchnorm_forward(bn, batch, update_running=False)
        grads, g_gamma, g_beta = batchnorm_backward(
            bn, cache, [o.with_features(u) for o, u in zip(outs, upstream)])
        for b in range(2):
            for row in range(min(3, batch[b].num_active)):
                fd = _finite_difference(loss, feats[b], (row, 0))
                assert _rel_err(grads[b].features[row, 0], fd) < 1e-4
        assert _rel_err(g_gamma[0], _finite_difference(loss, bn.gamma, (0,))) < 1e-4
        assert _rel_err(g_beta[1], _finite_difference(loss, bn.beta, (1,))) < 1e-4


class TestReluAndPool:
    """测试 ReLU 与最大池化"""

    def test_relu_keeps_site(self):
        """测试负值变零但站点仍活跃"""
        x = SparseTensor.from_sites({(0, 0): -2.0, (1, 1): 3.0}, 4)
        y, _ = relu_forward(x)
        assert y.num_active == 2
        assert y.sites[Coord(0, 0)][0] == 0.0

    def test_relu_positive_identity(self):
        """测试全正张量不变"""
        x = SparseTensor.from_sites({(0, 0): 2.0, (1, 1): 3.0}, 4)
        y, _ = relu_forward(x)
        assert np.array_equal(y.features, x.features)

    def test_relu_backward_mask(self):
        """测试梯度只在输入为正处通过"""
        x = SparseTensor.from_sites({(0, 0): -2.0, (1, 1): 3.0}, 4)
        y, cache = relu_forward(x)
        g = relu_backward(cache, y.with_features(np.array([[5.0], [7.0]])))
        assert np.array_equal(g.features[:, 0], [0.0, 7.0])

    def test_pool_max(self):
        """测试窗口内取最大值"""
        x = SparseTensor.from_sites({(0, 0): 2.0, (1, 1): 5.0}, 4)
        y, _ = maxpool2_forward(x, build_pool_rulebook(x, 4))
        assert y.grid_size == 2
        assert y.support() == {Coord(0, 0)}
        assert y.features[0, 0] == 5.0

    def test_pool_single_site(self):
        """测试单站点复制到减半坐标"""
        x = SparseTensor.from_sites({(3, 2): [1.5, -4.0]}, 4)
        y, _ = maxpool2_forward(x, build_pool_rulebook(x, 4))
        assert np.array_equal(y.sites[Coord(1, 1)], [1.5, -4.0])

    def test_pool_backward_argmax_and_ties(self):
        """测试梯度只回传到 argmax，并列时取排序最前的站点"""
        x = SparseTensor.from_sites({(0, 0): 2.0, (0, 1): 2.0, (1, 1): 1.0}, 4)
        y, cache = maxpool2_forward(x, build_pool_rulebook(x, 4))
        g = maxpool2_backward(cache, y.with_features(np.array([[3.0]])))
        assert np.array_equal(g.features[:, 0], [3.0, 0.0, 0.0])

    def test_pool_rulebook_type(self, rng):
        """测试池化需要 pool2 rulebook"""
        x = _random_tensor(rng)
        with pytest.raises(ContractError):
            maxpool2_forward(x, build_submanifold_rulebook(x, 3, 8))


class TestSoftmax:
    """测试 SoftMax"""

    def test_uniform(self):
        """测试全零输入"""
        assert np.allclose(softmax([0.0, 0.0, 0.0]), [1 / 3] * 3)

    def test_analytic(self):
        """测试 (ln1, ln2, ln3)"""
        assert np.allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-12)

    def test_no_overflow(self):
        """测试大输入不溢出"""
        assert np.allclose(softmax([1000.0, 1000.0]), [0.5, 0.5])

    def test_shift_invariance(self, rng):
        """测试平移不变性"""
        v = rng.normal(size=6)
        assert np.max(np.abs(softmax(v + 123.4) - softmax(v))) < 1e-12
        assert abs(softmax(v).sum() - 1.0) < 1e-12

    def test_log_softmax(self, rng):
        """测试 log_softmax 与 softmax 一致"""
        v = rng.normal(size=5)
        assert np.allclose(np.exp(log_softmax(v)), softmax(v))

    def test_nan_rejected(self):
        """测试 NaN 输入"""
        with pytest.raises(DataError):
            softmax([0.0, float('nan')])

    def test_mode_constants(self):
        """测试 BN 模式取值"""
        with pytest.raises(ConfigError):
            BatchNorm(1, mode='bogus')
        assert {TRAIN, EVAL} == {'train', 'eval'}
