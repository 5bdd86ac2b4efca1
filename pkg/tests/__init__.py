# 测试包

