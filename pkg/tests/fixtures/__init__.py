# 测试数据和固定装置

