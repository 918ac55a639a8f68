# 后端模块初始化文件
