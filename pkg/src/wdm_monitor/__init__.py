"""
wdm-monitor: 晶圆缺陷图监控

在缺陷坐标上直接运行子流形稀疏卷积网络 (SSCN) 做缺陷模式分类，
并在潜在空间上用 GMM 等新颖性评分识别未知模式
"""

__version__ = "0.1.0"
__author__ = "bxu"
__email__ = "bxu@example.com"

from .exceptions import ConfigError, ContractError, DataError, WdmMonitorError
from .experiment import ExperimentConfig
from .models import ClassLabel, DatasetSplit, OpenSetDecision, TrainingRun, Wdm
from .network import Sscn, SscnConfig, TrainConfig
from .openset import OpenSetModel
from .pipeline import MonitoringPipeline

__all__ = [
    "MonitoringPipeline", "ExperimentConfig",
    "Wdm", "ClassLabel", "DatasetSplit", "TrainingRun", "OpenSetDecision",
    "Sscn", "SscnConfig", "TrainConfig", "OpenSetModel",
    "WdmMonitorError", "ConfigError", "DataError", "ContractError",
]
