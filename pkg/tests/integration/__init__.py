# 集成测试包

