"""
CLMLE - 异常定义

所有库内异常都继承自 ClmleError；输入校验类异常同时继承 ValueError，
调用方可以像原接口层一样统一捕获 ValueError。
"""


class ClmleError(Exception):
    """CLMLE 库异常基类"""


# 几何
class ZeroVectorError(ClmleError, ValueError):
    """向量范数过小，无法归一化（通常意味着编码器输出退化）"""


class DimensionMismatchError(ClmleError, ValueError):
    """向量维度不一致"""


class InvalidCountsError(ClmleError, ValueError):
    """类别数/样本数参数非法"""


# 聚类
class EmptyInputError(ClmleError, ValueError):
    """输入为空"""


class DegenerateCentroidError(ClmleError, ValueError):
    """簇均值接近零向量（成员在球面上相互抵消）"""


# 损失
class EmptyTripletSetError(ClmleError, ValueError):
    """三元组集合为空"""


class EmptyQuintupletSetError(ClmleError, ValueError):
    """五元组集合为空"""


class RoleViolationError(ClmleError, ValueError):
    """五元组角色不满足类别/簇约束"""


class InsufficientStructureError(ClmleError, ValueError):
    """锚点所在类别结构不足，无法填充五元组角色"""


class SingleClusterBatchError(ClmleError, ValueError):
    """批次中簇数量少于2"""


class NonPositiveWeightError(ClmleError, ValueError):
    """代价权重必须为正"""


class LabelOutOfRangeError(ClmleError, ValueError):
    """类别标签超出分类权重矩阵范围"""


# 编码器
class ShapeMismatchError(ClmleError, ValueError):
    """梯度/参数形状不匹配"""


class NonFiniteGradientError(ClmleError):
    """梯度出现非有限值（训练发散）"""


# 采样与检索
class EmptyIndexError(ClmleError, ValueError):
    """簇索引为空"""


class TooFewClustersError(ClmleError, ValueError):
    """全局簇数量不足以检索所需近邻簇"""


class EmptyRetrievalError(ClmleError, ValueError):
    """检索结果为空"""


# 数据与评估
class SpecError(ClmleError, ValueError):
    """合成数据规格非法"""


class EmptyClassError(ClmleError, ValueError):
    """某类别没有样本"""


class DegeneratePairsError(ClmleError, ValueError):
    """样本对中缺少正对或负对"""


class NotBinaryError(ClmleError, ValueError):
    """标签不是二分类标签"""


# 训练与运行
class DivergenceDetected(ClmleError):
    """训练损失出现非有限值"""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"第{iteration}次迭代损失发散")


class ConfigError(ClmleError, ValueError):
    """配置非法"""


class OutputIoError(ClmleError, OSError):
    """输出文件读写失败或目标已存在"""
