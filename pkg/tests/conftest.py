"""pytest 公共设置"""

import os
import sys

import numpy as np
import pytest

# 与 main.py 相同，以 src.* 方式导入
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 耗时较长的基准测试，用 -m slow 单独运行")


def pytest_collection_modifyitems(config, items):
    if config.getoption("-m"):
        return
    skip_slow = pytest.mark.skip(reason="基准测试默认跳过，使用 -m slow 运行")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
