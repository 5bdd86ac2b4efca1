"""异常定义

命令行根据 exit_code 决定退出码：0 正常，2 配置错误，3 数据错误，4 契约违例。
"""

from typing import Any, Dict


class WdmMonitorError(Exception):
    """所有库内错误的基类"""

    exit_code = 1

    def to_record(self) -> Dict[str, Any]:
        """转换为机器可读的错误记录"""
        return {
            'error': type(self).__name__,
            'message': str(self),
            'exit_code': self.exit_code,
        }


class ConfigError(WdmMonitorError, ValueError):
    """配置文件或参数不合法"""

    exit_code = 2


class DataError(WdmMonitorError, ValueError):
    """输入数据不合法（格式错误、标签未知、坐标越界等）"""

    exit_code = 3


class CoordinateRangeError(DataError):
    """坐标超出网格范围"""

    def __init__(self, coord: Any, grid_size: int):
        self.coord = tuple(int(c) for c in coord)
        self.grid_size = grid_size
        super().__init__(f"坐标 {self.coord} 超出网格范围 [0, {grid_size})")


class ContractError(WdmMonitorError, ValueError):
    """调用契约被破坏（形状、支撑集、通道数、rulebook 不匹配等）"""

    exit_code = 4
