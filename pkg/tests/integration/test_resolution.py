"""测试前向计算耗时只随缺陷数增长，与网格分辨率无关"""

import time

import numpy as np

from wdm_monitor.network import SscnConfig, build_network, forward
from wdm_monitor.sparse_tensor import SparseTensor


def unique_sites(rng, count, offset, span):
    cells = rng.choice(span * span, size=count, replace=False)
    return np.stack([offset + cells // span, offset + cells % span], axis=1)


def best_time(model, tensor, repeats=3):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        forward(model, tensor)
        times.append(time.perf_counter() - start)
    return min(times)


class TestResolution:
    """测试分辨率无关性"""

    def test_forward_time_independent_of_grid(self, rng):
        """测试 K=1000 与 K=20000 上相同的 5000 个缺陷耗时相近"""
        sites = unique_sites(rng, 5000, 300, 100)
        timings = {}
        outputs = {}
        for k in (1000, 20000):
            cfg = SscnConfig(num_blocks=9, block_channels=[2] * 9, latent_dim=4, num_classes=2,
                             grid_size=k, seed=1)
            model = build_network(cfg)
            tensor = SparseTensor.from_points(sites, k)
            timings[k] = best_time(model, tensor)
            outputs[k] = forward(model, tensor)
        assert timings[20000] < 2.0 * timings[1000] + 0.02
        for latent, scores in outputs.values():
            assert np.all(np.isfinite(latent))
            assert np.all(np.isfinite(scores))
