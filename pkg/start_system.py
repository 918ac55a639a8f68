#!/usr/bin/env python3
"""
测试时训练数值实验室启动脚本
"""
import os
import subprocess
import sys
import time

import httpx

API_URL = "http://localhost:8000"


def start_backend():
    """启动后端服务"""
    print("🚀 启动后端服务...")
    backend_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), "backend")
    try:
        process = subprocess.Popen([sys.executable, "main.py"], cwd=backend_dir)
        print("✅ 后端服务已启动 (端口8000)")
        return process
    except Exception as e:
        print(f"❌ 后端服务启动失败: {e}")
        return None


def wait_until_healthy(timeout: float = 30.0) -> bool:
    """轮询 /health 直到服务就绪"""
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        try:
            if httpx.get(f"{API_URL}/health", timeout=2.0).status_code == 200:
                return True
        except httpx.HTTPError:
            pass
        time.sleep(1.0)
    return False


def check_data_dir():
    """检查数据集目录（MNIST 实验需要）"""
    sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "backend"))
    from services.datasets import mnist_available
    from services.settings import DATA_DIR_ENV, data_dir

    root = data_dir()
    if root is None:
        print(f"⚠️  未设置 {DATA_DIR_ENV}，只能运行合成世界实验")
    elif mnist_available(root):
        print(f"✅ 找到 MNIST 数据: {root}")
    else:
        print(f"⚠️  {root} 下没有 MNIST IDX 文件")


def main():
    """主函数"""
    print("=" * 60)
    print("🚀 测试时训练数值实验室")
    print("=" * 60)

    check_data_dir()

    print("\n📋 系统组件:")
    print("  • 后端API服务 (FastAPI)")
    print("  • 实验引擎 (configs/*.toml)")
    print("  • 命令行: python backend/cli.py simulate --config configs/interference.toml")

    backend_process = start_backend()
    if not backend_process:
        print("❌ 无法启动后端服务，请检查依赖是否安装")
        return

    print("⏳ 等待后端服务启动...")
    if not wait_until_healthy():
        print("❌ 后端服务未在预期时间内就绪")
        backend_process.terminate()
        return

    print("\n" + "=" * 60)
    print("🎉 系统启动完成！")
    print("=" * 60)
    print(f"🔧 后端API: {API_URL}")
    print(f"📚 API文档: {API_URL}/docs")
    print("=" * 60)

    try:
        input("\n按回车键退出...")
    finally:
        backend_process.terminate()


if __name__ == "__main__":
    main()
