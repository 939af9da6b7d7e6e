"""
banditsim 治疗分配模拟系统
基于在线贝叶斯逻辑回归的上下文多臂老虎机策略模拟与特征工程
"""

__version__ = "0.1.0"
