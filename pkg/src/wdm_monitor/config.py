"""配置文件"""

import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional

from .exceptions import ConfigError

# 基础配置
DEFAULT_GRID_SIZE = 512  # 桌面规模；生产全分辨率为 20,000
FULL_GRID_SIZE = 20000
RADIUS_RATIO = 0.48  # R = 0.48 * K
DEFAULT_SEED = 0
WORKERS = 4  # 默认并发线程数
MAX_DENSE_GRID = 1024  # to_dense 允许的最大网格

# 网络结构
FULL_BLOCK_CHANNELS = [8, 8, 16, 16, 16, 32, 32, 32, 32, 64, 64, 64, 64]
DESK_BLOCK_CHANNELS = [8, 16, 16, 32, 32]
KERNEL_SIZE = 3
LATENT_DIM = 128
DESK_LATENT_DIM = 32

# 批归一化
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

# Adam
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BATCH_SIZE = 16
EPOCHS = 30

# 数据划分
SPLIT_FRACTIONS = (0.90, 0.05, 0.05)
TEST_FRACTION = 0.2
MIN_SPLIT_CLASS_SIZE = 3

# 数据增强
TRANSLATION_RATIO = 0.02  # ν = 0.02 * K
ROTATIONS = (0, 90, 180, 270)
TEST_AUGMENTATIONS = 250  # 测试时增强数 N
MIXING_CLASSES = ('BasketBall', 'Slice')
NORMAL_NOISE_LAMBDA = 30.0

# 新颖性检测
ALPHA = 0.05
GMM_TOL = 1e-9
GMM_MAX_ITER = 200
GMM_RIDGE_RATIO = 1e-6
GMM_MAX_CONDITION = 1e12
OPENMAX_TAIL_SIZE = 20
CI_LAMBDA = 2.0
IFOREST_TREES = 100
IFOREST_SUBSAMPLE = 256
SCORER_NAMES = ('gmm', 'softmax', 'presoftmax', 'openmax', 'sme', 'iforest', 'ci')

# 类别清单（名称 -> ST 数据集中的样本数）
CLASS_COUNTS: Dict[str, int] = {
    'BasketBall': 74,
    'ClusterBig': 537,
    'ClusterSmall': 4393,
    'Donut': 418,
    'Fingerprints': 371,
    'GeoScratch': 642,
    'Grid': 283,
    'HalfMoon': 568,
    'Incomplete': 2946,
    'Normal': 20309,
    'Ring': 798,
    'Slice': 71,
    'ZigZag': 483,
}
NORMAL_CLASS = 'Normal'
NOVEL_LABEL = 'Novel'

# 输出配置
DEFAULT_OUTPUT_DIR = Path("runs")
DATASET_SUFFIX = ".wdm.jsonl"

# 环境变量覆盖
ENV_WORKERS = "WDM_MONITOR_WORKERS"
ENV_SEED = "WDM_MONITOR_SEED"

def get_class_prior(classes: Optional[Iterable[str]] = None) -> Dict[str, float]:
    """按类别清单计数返回各类别的先验比例"""
    names = list(classes) if classes is not None else list(CLASS_COUNTS)
    unknown = [name for name in names if name not in CLASS_COUNTS]
    if unknown:
        raise ConfigError(f"未知类别: {', '.join(unknown)}；可用类别: {', '.join(CLASS_COUNTS)}")
    total = sum(CLASS_COUNTS[name] for name in names)
    return {name: CLASS_COUNTS[name] / total for name in names}


def scaled_class_counts(total: int, classes: Optional[Iterable[str]] = None,
                        min_per_class: int = 3) -> Dict[str, int]:
    """将 ST 数据集的类别比例缩放到 total 个样本，每类至少 min_per_class 个"""
    prior = get_class_prior(classes)
    counts = {name: max(min_per_class, int(round(p * total))) for name, p in prior.items()}
    return counts


def default_translation(grid_size: int) -> float:
    """默认最大平移距离 ν"""
    return TRANSLATION_RATIO * grid_size


def default_radius(grid_size: int) -> float:
    """默认晶圆半径 R"""
    return RADIUS_RATIO * grid_size


def env_overrides() -> Dict[str, int]:
    """读取环境变量覆盖项"""
    overrides: Dict[str, int] = {}
    for key, env in (('workers', ENV_WORKERS), ('seed', ENV_SEED)):
        value = os.getenv(env)
        if value is None or value == "":
            continue
        try:
            overrides[key] = int(value)
        except ValueError:
            raise ConfigError(f"环境变量 {env} 必须是整数，当前值: {value!r}")
    return overrides


def reject_unknown_keys(section: str, data: Mapping[str, Any], allowed: Iterable[str]) -> None:
    """配置中出现未知字段时报错"""
    if not isinstance(data, Mapping):
        raise ConfigError(f"配置段 {section} 必须是对象，实际为 {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"配置段 {section} 含未知字段: {', '.join(unknown)}")


def require(condition: bool, message: str) -> None:
    """配置校验"""
    if not condition:
        raise ConfigError(message)
