"""测试工具函数"""

import logging
import threading
import time

import numpy as np
import pytest

from wdm_monitor.exceptions import DataError
from wdm_monitor.utils import (
    LOG_FILE_NAME, NullProgress, SimpleTextProgress, canonical_json, estimate_time_remaining, format_duration,
    load_json, make_progress, parallel_map, progress_bar, rng_stream, save_json, setup_logging,
    stable_hash, summarize_times,
)


class TestFileOperations:
    """测试文件操作函数"""

    def test_save_and_load_json(self, temp_dir):
        """测试JSON保存和加载"""
        test_data = {
            'title': '测试数据',
            'items': [1, 2, 3],
            'nested': {'key': 'value'}
        }
        file_path = temp_dir / "sub" / "test.json"

        save_json(test_data, file_path)
        assert file_path.exists()
        assert load_json(file_path) == test_data

    def test_load_nonexistent_json(self, temp_dir):
        """测试加载不存在的JSON文件"""
        with pytest.raises(DataError):
            load_json(temp_dir / "nonexistent.json")

    def test_load_invalid_json(self, temp_dir):
        """测试加载格式错误的JSON文件"""
        file_path = temp_dir / "broken.json"
        file_path.write_text("{'a': 1", encoding='utf-8')
        with pytest.raises(DataError, match="第 1 行"):
            load_json(file_path)


class TestHashing:
    """测试规范 JSON 与哈希"""

    def test_key_order_irrelevant(self):
        """测试键顺序不影响哈希"""
        assert canonical_json({'b': 1, 'a': [1, 2]}) == '{"a":[1,2],"b":1}'
        assert stable_hash({'b': 1, 'a': 2}) == stable_hash({'a': 2, 'b': 1})

    def test_length(self):
        """测试哈希前缀长度"""
        assert len(stable_hash({'a': 1})) == 16
        assert len(stable_hash({'a': 1}, length=8)) == 8
        assert stable_hash({'a': 1}) != stable_hash({'a': 2})


class TestRngStream:
    """测试派生随机流"""

    def test_reproducible(self):
        """测试相同键得到相同序列"""
        a = rng_stream(7, 1, 2).random(5)
        b = rng_stream(7, 1, 2).random(5)
        assert np.array_equal(a, b)

    def test_streams_differ(self):
        """测试不同种子或键得到不同序列"""
        base = rng_stream(7, 1, 2).random(5)
        assert not np.array_equal(base, rng_stream(8, 1, 2).random(5))
        assert not np.array_equal(base, rng_stream(7, 2, 1).random(5))
        assert not np.array_equal(base, rng_stream(7, 1).random(5))


class TestParallelMap:
    """测试线程池映射"""

    def test_order_preserved(self):
        """测试结果按输入顺序返回"""
        def slow_square(x):
            time.sleep(0.001 * (10 - x))
            return x * x

        assert parallel_map(slow_square, list(range(10)), workers=4) == [x * x for x in range(10)]

    def test_serial_fallback(self):
        """测试 workers=1 时在当前线程执行"""
        threads = parallel_map(lambda _: threading.get_ident(), [1, 2, 3], workers=1)
        assert set(threads) == {threading.get_ident()}

    def test_exception_propagates(self):
        """测试任务异常向上传播"""
        def fail(x):
            if x == 2:
                raise DataError("坏样本")
            return x

        with pytest.raises(DataError):
            parallel_map(fail, [1, 2, 3], workers=2)


class TestFormatting:
    """测试格式化函数"""

    def test_format_duration(self):
        """测试持续时间格式化"""
        assert format_duration(30) == "30.0秒"
        assert format_duration(90) == "1.5分钟"
        assert format_duration(5400) == "1.5小时"

    def test_progress_bar(self):
        """测试进度条生成"""
        assert progress_bar(0, 0) == "[" + "=" * 50 + "] 100%"
        result = progress_bar(5, 10, width=10)
        assert result == "[=====-----] 50% (5/10)"

    def test_estimate_time_remaining(self):
        """测试剩余时间估算"""
        assert estimate_time_remaining(time.time(), 0, 10) == "未知"
        assert estimate_time_remaining(time.time() - 10, 5, 10).endswith("秒")

    def test_summarize_times(self):
        """测试耗时统计"""
        assert summarize_times([]) == {'mean': 0.0, 'std': 0.0, 'count': 0}
        summary = summarize_times([1.0, 3.0])
        assert summary == {'mean': 2.0, 'std': 1.0, 'count': 2}


class TestProgress:
    """测试进度条工厂"""

    def test_disabled(self):
        """测试关闭时返回静默进度"""
        tracker = make_progress(3, "测试:", enabled=False)
        assert isinstance(tracker, NullProgress)
        tracker.update()
        tracker.finish()
        assert tracker.current == 3

    def test_enabled(self):
        """测试开启时可以正常更新与结束"""
        tracker = make_progress(2, "测试:")
        tracker.update()
        tracker.update()
        tracker.finish()
        assert tracker.current == 2

    def test_status(self):
        """测试状态文本保留最后一次的值"""
        tracker = make_progress(2, "训练", enabled=False)
        tracker.update(status="损失 1.0000")
        tracker.update()
        assert tracker.status == "损失 1.0000"

    def test_text_progress_stderr(self, capsys):
        """测试文本进度只写 stderr"""
        tracker = SimpleTextProgress(2, "分类")
        tracker.update(status="x")
        tracker.update()
        tracker.finish()
        captured = capsys.readouterr()
        assert captured.out == ""
        assert "分类完成" in captured.err
        assert "(2/2)" in captured.err


class TestLogging:
    """测试日志设置"""

    def test_file_handler(self, temp_dir):
        """测试日志写入输出目录"""
        setup_logging(temp_dir, verbose=True)
        logger = logging.getLogger('wdm_monitor.test')
        logger.debug("调试信息")
        root = logging.getLogger('wdm_monitor')
        assert root.level == logging.DEBUG
        for handler in root.handlers:
            handler.flush()
        assert "调试信息" in (temp_dir / LOG_FILE_NAME).read_text(encoding='utf-8')
        setup_logging()
        assert root.level == logging.INFO
        assert len(root.handlers) == 1
