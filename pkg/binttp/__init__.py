"""
binttp - 剥离恶意二进制的 ATT&CK TTP 归因流水线

重命名 -> 候选检索 -> 上下文探索与指南约束推理
"""

__version__ = "1.0.0"
