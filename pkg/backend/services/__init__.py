# 服务模块初始化文件
