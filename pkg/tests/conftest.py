"""pytest配置文件"""

import tempfile
from pathlib import Path

import numpy as np
import pytest

from wdm_monitor.experiment import ExperimentConfig
from wdm_monitor.network import SscnConfig, build_network
from tests.fixtures.sample_data import (
    CLOSED_SET_SCORES, CLOSED_SET_TRUE, create_random_wdm, create_sample_wdm,
    tiny_experiment_config,
)


@pytest.fixture
def temp_dir():
    """临时目录fixture"""
    with tempfile.TemporaryDirectory() as temp_dir:
        yield Path(temp_dir)


@pytest.fixture
def rng():
    """固定种子的随机数发生器"""
    return np.random.default_rng(12345)


@pytest.fixture
def sample_wdm():
    """示例 WDM fixture"""
    return create_sample_wdm()


@pytest.fixture
def random_wdms(rng):
    """一批随机 WDM（小网格）"""
    return [create_random_wdm(rng, f"r-{i}", n=8 + i) for i in range(4)]


@pytest.fixture
def tiny_network():
    """两块的小 SSCN（K=16，3 类）"""
    cfg = SscnConfig(num_blocks=2, block_channels=[3, 4], latent_dim=5, num_classes=3,
                     grid_size=16, seed=3, class_names=['Normal', 'Ring', 'Slice'])
    return build_network(cfg)


@pytest.fixture
def closed_set_data():
    """闭集评估用的真实标签与分数"""
    return np.asarray(CLOSED_SET_TRUE), np.asarray(CLOSED_SET_SCORES)


@pytest.fixture
def tiny_config(temp_dir):
    """写在临时目录里的微型实验配置"""
    return ExperimentConfig.from_dict(tiny_experiment_config(str(temp_dir / "run")))


# 标记在 pytest.ini 中注册，这里按目录自动打标记
def pytest_collection_modifyitems(config, items):
    """unit/ 下的测试标记 unit；integration/ 下的标记 integration 与 slow"""
    for item in items:
        parts = item.path.parts
        if "unit" in parts:
            item.add_marker(pytest.mark.unit)
        elif "integration" in parts:
            item.add_marker(pytest.mark.integration)
            item.add_marker(pytest.mark.slow)
