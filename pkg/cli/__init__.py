"""
CLMLE 命令行工具
"""
