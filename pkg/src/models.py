"""
CLMLE - 数据模型定义
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Any
from enum import Enum

import numpy as np


class LossKind(str, Enum):
    """训练损失类型"""
    CLMLE = "clmle"
    LMLE = "lmle"
    TRIPLET = "triplet"
    SOFTMAX = "softmax"


class QuerySampling(str, Enum):
    """查询簇采样策略"""
    HARDEST = "hardest"  # 按类别轮转，取类内缓存损失最高的簇
    UNIFORM = "uniform"  # 全局均匀随机（消融对照）


class ClassifierKind(str, Enum):
    """推理分类器"""
    NEAREST_CLUSTER = "nearest_cluster"
    INSTANCE_KNN = "instance_knn"


class Split(str, Enum):
    """数据划分"""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class UnitVector:
    """单位超球面上的点，即嵌入 f(x)"""
    components: np.ndarray

    def __post_init__(self):
        from .errors import DimensionMismatchError, ZeroVectorError
        arr = np.asarray(self.components, dtype=float).ravel()
        if arr.size < 2:
            raise DimensionMismatchError(f"单位向量维度必须≥2，实际为{arr.size}")
        if abs(float(np.linalg.norm(arr)) - 1.0) > 1e-9:
            raise ZeroVectorError(f"向量范数{np.linalg.norm(arr):.3e}不是单位长度")
        arr.setflags(write=False)
        object.__setattr__(self, "components", arr)

    @property
    def dim(self) -> int:
        return int(self.components.size)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.components, dtype=dtype)

    def __len__(self) -> int:
        return self.dim


@dataclass(frozen=True)
class MarginBounds:
    """角度间隔上界（余弦差单位）"""
    a1_max: float  # 类间
    a2_max: float  # 类内


@dataclass
class ClmleConfig:
    """簇间角度间隔损失配置"""
    a1: float = 0.2  # 类间簇间隔
    a2: float = 0.1  # 类内簇间隔
    cost_weights: Optional[np.ndarray] = None  # 每个批内样本的代价权重，None 表示全为1
    class_aware: bool = True  # False 时退化为单一间隔 a1 的形式

    def validate(self, a1_max: Optional[float] = None) -> None:
        """校验 0 ≤ a2 ≤ a1 ≤ a1_max 以及权重为正"""
        from .errors import ConfigError, NonPositiveWeightError
        if not (0.0 <= self.a2 <= self.a1):
            raise ConfigError(f"间隔需满足0≤a2≤a1，实际a1={self.a1}, a2={self.a2}")
        if a1_max is not None and self.a1 > a1_max + 1e-12:
            raise ConfigError(f"类间间隔a1={self.a1}超过上界{a1_max:.4f}")
        if self.cost_weights is not None and np.any(np.asarray(self.cost_weights) <= 0):
            raise NonPositiveWeightError("代价权重必须全部为正")


@dataclass(frozen=True)
class Quintuplet:
    """五元组 (锚点, 簇内最远, 异簇最近, 类内最远, 类间最近)"""
    anchor: int
    p_plus: int
    p_minus: int
    p_minus_minus: int
    n: int

    def as_tuple(self) -> Tuple[int, int, int, int, int]:
        return (self.anchor, self.p_plus, self.p_minus, self.p_minus_minus, self.n)


@dataclass
class LossOutput:
    """
    损失输出

    grads 与批内嵌入逐行对齐（形状 (n, d)），未参与的样本为零向量
    """
    value: float
    grads: np.ndarray
    per_sample: np.ndarray  # 每个样本分摊的损失，用于在线损失缓存
    param_grads: Dict[str, np.ndarray] = field(default_factory=dict)  # 额外参数梯度（如分类权重W）


@dataclass
class EncoderConfig:
    """编码器结构配置"""
    hidden: Tuple[int, ...] = (64, 64)
    embedding_dim: int = 16


@dataclass
class OptimizerConfig:
    """优化器配置"""
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0005


@dataclass
class SamplerConfig:
    """批次构建配置"""
    clusters_per_batch: int = 12  # M
    n_sub: int = 10  # 每簇采样数
    loss_cache_decay: float = 0.5  # β
    query_sampling: QuerySampling = QuerySampling.HARDEST
    cost_sensitive: bool = True


@dataclass
class MarginConfig:
    """各损失的间隔配置"""
    a1: Optional[float] = None  # None 表示按上界比例推导
    a2: Optional[float] = None
    margin_fraction: float = 0.25
    class_aware: bool = True
    triplet_margin: float = 0.2
    lmle_margins: Tuple[float, float, float] = (0.1, 0.1, 0.1)


@dataclass
class ScheduleConfig:
    """交替训练调度配置"""
    refresh_period: int = 2000
    max_rounds: int = 5
    max_iterations: Optional[int] = None  # None 表示 refresh_period * max_rounds
    eval_every: int = 500  # 0 表示只在每轮结束时评估
    plateau_patience: int = 3
    plateau_tol: float = 1e-3
    max_lr_drops: int = 2
    pretrain_epochs: int = 5
    pretrain_learning_rate: float = 0.1
    pretrain_batch_size: int = 64
    kmeans_max_iters: int = 50

    @property
    def total_iterations(self) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return self.refresh_period * self.max_rounds


@dataclass
class TrainConfig:
    """完整训练配置"""
    loss_kind: LossKind = LossKind.CLMLE
    cluster_size: int = 20  # l
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)
    optimizer_config: OptimizerConfig = field(default_factory=OptimizerConfig)
    sampler_config: SamplerConfig = field(default_factory=SamplerConfig)
    margin_config: MarginConfig = field(default_factory=MarginConfig)
    schedule_config: ScheduleConfig = field(default_factory=ScheduleConfig)

    classifier: ClassifierKind = ClassifierKind.NEAREST_CLUSTER
    n_retrieve: Optional[int] = None  # None 表示在验证集上网格搜索
    instance_k: int = 10
    seed: int = 0


@dataclass
class SyntheticSpec:
    """幂律不平衡合成数据规格"""
    num_classes: int = 10  # C
    gamma: float = 0.5
    l_max: int = 500
    l_min: int = 5
    modes_per_class: int = 3
    input_dim: int = 32
    noise_scale: float = 0.3
    mode_radius: float = 1.0
    min_mode_angle_deg: float = 30.0
    split_fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0


@dataclass
class RocResult:
    """ROC 曲线与 TAR@FAR"""
    far: List[float]
    tar: List[float]
    thresholds: List[float]
    tar_at_far: Dict[float, float] = field(default_factory=dict)


@dataclass
class EvalReport:
    """
    评估报告

    balanced_accuracy 为各类召回率的均值，二分类时即 0.5(tp/Np + tn/Nn)
    """
    classes: List[int]
    per_class_accuracy: Dict[int, float]
    balanced_accuracy: float
    overall_accuracy: float
    confusion_matrix: List[List[int]]
    class_counts: Dict[int, int] = field(default_factory=dict)
    matrix_labels: List[int] = field(default_factory=list)  # 混淆矩阵行列对应的类别
    roc: Optional[RocResult] = None
    imbalance_levels: Dict[str, float] = field(default_factory=dict)
    n_retrieve: Optional[int] = None
    warnings: List[str] = field(default_factory=list)


@dataclass
class TrainReport:
    """
    训练报告

    包含逐迭代损失、累计已见样本数、验证集指标与调度信息
    """
    loss_kind: LossKind
    seed: int
    losses: List[float] = field(default_factory=list)
    seen_samples: List[int] = field(default_factory=list)  # 每次迭代后的累计已见样本数
    eval_iterations: List[int] = field(default_factory=list)
    eval_seen_samples: List[int] = field(default_factory=list)
    val_balanced_accuracy: List[float] = field(default_factory=list)
    round_wall_clock_s: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    clustering_passes: int = 0
    rounds_completed: int = 0
    skipped_batches: int = 0
    final_val_balanced_accuracy: float = 0.0
    n_retrieve: Optional[int] = None
    margins: Dict[str, float] = field(default_factory=dict)
    checkpoint_path: Optional[str] = None
    model: Optional[Any] = field(default=None, repr=False)  # TrainedModel，不参与导出
    warnings: List[str] = field(default_factory=list)


@dataclass
class EvalConfig:
    """评估配置"""
    split: Split = Split.TEST
    far_targets: Tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    export_predictions: bool = True


@dataclass
class CompareConfig:
    """多损失对比配置"""
    loss_kinds: Tuple[LossKind, ...] = (LossKind.SOFTMAX, LossKind.TRIPLET, LossKind.LMLE, LossKind.CLMLE)
    seeds: Tuple[int, ...] = (0, 1, 2)
    target_fraction: float = 0.9  # 收敛速度目标：各方法最终验证指标最小值的该比例
