"""工具函数"""

import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from .exceptions import DataError

T = TypeVar('T')
R = TypeVar('R')

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE_NAME = "wdm_monitor.log"


def save_json(data: Any, filepath: Path) -> None:
    """保存JSON文件"""
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)


def load_json(filepath: Path) -> Any:
    """加载JSON文件"""
    if not filepath.exists():
        raise DataError(f"文件不存在: {filepath}")

    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"JSON 解析失败 {filepath}: 第 {e.lineno} 行 {e.msg}")


def canonical_json(data: Any) -> str:
    """按键排序的紧凑 JSON"""
    return json.dumps(data, sort_keys=True, separators=(',', ':'), ensure_ascii=True)


def stable_hash(data: Any, length: int = 16) -> str:
    """规范 JSON 的 SHA-256 前缀"""
    return hashlib.sha256(canonical_json(data).encode('utf-8')).hexdigest()[:length]


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """按 (seed, *keys) 派生独立的计数器型随机流"""
    entropy = [int(seed) & 0xFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def parallel_map(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """线程池并行映射，结果按输入顺序返回"""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]

    results: List[Optional[R]] = [None] * len(items)
    with ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_index = {executor.submit(fn, item): i for i, item in enumerate(items)}
        for future in as_completed(future_to_index):
            results[future_to_index[future]] = future.result()
    return results  # type: ignore[return-value]


def setup_logging(output_dir: Optional[Path] = None, verbose: bool = False) -> None:
    """设置日志：文件处理器 + rich 控制台处理器"""
    root = logging.getLogger('wdm_monitor')
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(LOG_FORMAT)

    if output_dir is not None:
        output_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(output_dir / LOG_FILE_NAME, encoding='utf-8')
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)

    try:
        from rich.console import Console
        from rich.logging import RichHandler
        console_handler: logging.Handler = RichHandler(
            console=Console(stderr=True), show_path=False, rich_tracebacks=False
        )
    except Exception:
        # 回退到标准控制台输出
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
    root.addHandler(console_handler)
    root.propagate = False


def format_duration(seconds: float) -> str:
    """格式化持续时间"""
    if seconds < 60:
        return f"{seconds:.1f}秒"
    elif seconds < 3600:
        minutes = seconds / 60
        return f"{minutes:.1f}分钟"
    else:
        hours = seconds / 3600
        return f"{hours:.1f}小时"


def progress_bar(current: int, total: int, width: int = 50) -> str:
    """生成进度条"""
    if total == 0:
        return "[" + "=" * width + "] 100%"

    progress = current / total
    filled = int(width * progress)
    bar = "=" * filled + "-" * (width - filled)
    percentage = int(progress * 100)

    return f"[{bar}] {percentage}% ({current}/{total})"


def estimate_time_remaining(start_time: float, current: int, total: int) -> str:
    """估算剩余时间"""
    if current == 0 or total == 0:
        return "未知"

    elapsed = time.time() - start_time
    if elapsed == 0:
        return "未知"

    remaining = (total - current) / (current / elapsed)
    return format_duration(remaining)


class SimpleTextProgress:
    """文本进度条（写到 stderr，stdout 留给分类结果）"""

    def __init__(self, total: int, description: str = ""):
        self.total = total
        self.description = description or "进度"
        self.current = 0
        self.status = ""
        self.start_time = time.time()
        self.last_update = 0.0

    def update(self, increment: int = 1, status: Optional[str] = None) -> None:
        self.current += increment
        if status is not None:
            self.status = status
        now = time.time()
        if now - self.last_update < 0.1 and self.current < self.total:
            return
        self.last_update = now
        self._display()

    def _display(self) -> None:
        bar = progress_bar(self.current, self.total, width=30)
        remaining = estimate_time_remaining(self.start_time, self.current, self.total)
        suffix = f" {self.status}" if self.status else ""
        sys.stderr.write(f"\r{self.description} {bar} ETA: {remaining}{suffix}")
        if self.current >= self.total:
            sys.stderr.write(f"\n{self.description}完成，用时: {format_duration(time.time() - self.start_time)}\n")
        sys.stderr.flush()

    def finish(self) -> None:
        if self.current < self.total:
            self.current = self.total
            self._display()


class RichProgressTracker:
    """rich 进度条，接口与 SimpleTextProgress 相同；status 显示在最后一列"""

    def __init__(self, total: int, description: str = ""):
        from rich.console import Console
        from rich.progress import (
            BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn,
            TimeElapsedColumn, TimeRemainingColumn,
        )
        self.total = total
        self.description = description or "进度"
        self.current = 0
        self._progress = Progress(
            SpinnerColumn(style="cyan"),
            TextColumn("[bold blue]{task.description}"),
            BarColumn(bar_width=None),
            MofNCompleteColumn(),
            TimeElapsedColumn(),
            TimeRemainingColumn(),
            TextColumn("[dim]{task.fields[status]}"),
            console=Console(stderr=True),
            transient=True,
        )
        self._progress.start()
        self._task_id = self._progress.add_task(self.description, total=self.total, status="")
        self._stopped = False

    def update(self, increment: int = 1, status: Optional[str] = None) -> None:
        self.current += increment
        fields = {} if status is None else {'status': status}
        self._progress.update(self._task_id, advance=increment, **fields)
        if self.current >= self.total:
            self._stop()

    def finish(self) -> None:
        if not self._stopped:
            self._progress.update(self._task_id, completed=self.total)
        self._stop()

    def _stop(self) -> None:
        if not self._stopped:
            self._progress.stop()
            self._stopped = True


class NullProgress:
    """静默进度（测试与库内调用）"""

    def __init__(self, total: int = 0, description: str = ""):
        self.total = total
        self.current = 0
        self.status = ""

    def update(self, increment: int = 1, status: Optional[str] = None) -> None:
        self.current += increment
        if status is not None:
            self.status = status

    def finish(self) -> None:
        self.current = self.total


def make_progress(total: int, description: str = "", enabled: bool = True) -> Any:
    """返回一个进度条实例，优先使用 rich，失败回退到文本版。
    用法：tracker = make_progress(n, "训练:"); tracker.update(); tracker.finish()
    """
    if not enabled:
        return NullProgress(total, description)
    try:
        return RichProgressTracker(total, description)
    except Exception:
        return SimpleTextProgress(total, description)


def summarize_times(values: Sequence[float]) -> Dict[str, float]:
    """耗时均值与标准差"""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {'mean': 0.0, 'std': 0.0, 'count': 0}
    return {'mean': float(arr.mean()), 'std': float(arr.std()), 'count': int(arr.size)}
