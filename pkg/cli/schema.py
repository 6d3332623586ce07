"""
CLMLE - 命令行配置模型 (pydantic)

配置文件为 JSON，先按这里的模型校验，再由 parse_run_config 转换为 src 中的 dataclass
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.errors import ConfigError
from src.models import (
    ClassifierKind,
    CompareConfig,
    EncoderConfig,
    EvalConfig,
    LossKind,
    MarginConfig,
    OptimizerConfig,
    QuerySampling,
    SamplerConfig,
    ScheduleConfig,
    Split,
    SyntheticSpec,
    TrainConfig,
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SyntheticSpecData(_Strict):
    """合成数据规格模型"""
    num_classes: int = Field(default=10, ge=2, description="类别数C")
    gamma: float = Field(default=0.5, gt=0, description="幂律指数γ")
    l_max: int = Field(default=500, ge=1, description="L_max")
    l_min: int = Field(default=5, ge=1, description="L_min")
    modes_per_class: int = Field(default=3, ge=1, description="每类高斯模态数")
    input_dim: int = Field(default=32, ge=2, description="原始特征维度")
    noise_scale: float = Field(default=0.3, ge=0, description="模态内噪声尺度")
    mode_radius: float = Field(default=1.0, gt=0, description="模态均值半径")
    min_mode_angle_deg: float = Field(default=30.0, ge=0, lt=180, description="模态均值最小夹角（度）")
    split_fractions: List[float] = Field(default=[0.7, 0.1, 0.2], description="train/val/test比例")
    seed: int = Field(default=0, ge=0, description="随机种子")

    @field_validator('split_fractions')
    @classmethod
    def validate_fractions(cls, v):
        if len(v) != 3 or any(x < 0 for x in v) or abs(sum(v) - 1.0) > 1e-9:
            raise ValueError('划分比例必须为三个非负数且和为1')
        return v

    @field_validator('l_min')
    @classmethod
    def validate_l_min(cls, v, info):
        l_max = info.data.get('l_max')
        if l_max is not None and v > l_max:
            raise ValueError('L_min不能大于L_max')
        return v


class EncoderConfigData(_Strict):
    """编码器结构模型"""
    hidden: List[int] = Field(default=[64, 64], description="隐藏层宽度")
    embedding_dim: int = Field(default=16, ge=2, description="嵌入维度d")

    @field_validator('hidden')
    @classmethod
    def validate_hidden(cls, v):
        if any(h < 1 for h in v):
            raise ValueError('隐藏层宽度必须≥1')
        return v


class OptimizerConfigData(_Strict):
    """优化器模型"""
    learning_rate: float = Field(default=0.05, ge=0, description="学习率")
    momentum: float = Field(default=0.9, ge=0, lt=1, description="动量")
    weight_decay: float = Field(default=0.0005, ge=0, description="权重衰减")


class SamplerConfigData(_Strict):
    """批次采样模型"""
    clusters_per_batch: int = Field(default=12, ge=2, description="每批簇数M")
    n_sub: int = Field(default=10, ge=1, description="每簇采样数")
    loss_cache_decay: float = Field(default=0.5, gt=0, le=1, description="损失缓存衰减β")
    query_sampling: str = Field(default="hardest", description="查询簇采样: hardest/uniform")
    cost_sensitive: bool = Field(default=True, description="是否使用代价敏感权重")

    @field_validator('query_sampling')
    @classmethod
    def validate_sampling(cls, v):
        QuerySampling(v)
        return v


class MarginConfigData(_Strict):
    """间隔模型"""
    a1: Optional[float] = Field(default=None, ge=0, description="类间簇间隔，缺省按上界比例推导")
    a2: Optional[float] = Field(default=None, ge=0, description="类内簇间隔")
    margin_fraction: float = Field(default=0.25, gt=0, le=1, description="相对上界的比例")
    class_aware: bool = Field(default=True, description="是否区分类内/类间间隔")
    triplet_margin: float = Field(default=0.2, gt=0, description="三元组间隔g")
    lmle_margins: List[float] = Field(default=[0.1, 0.1, 0.1], description="五元组间隔g1,g2,g3")

    @field_validator('lmle_margins')
    @classmethod
    def validate_lmle(cls, v):
        if len(v) != 3 or any(g <= 0 for g in v):
            raise ValueError('五元组间隔必须为三个正数')
        return v


class ScheduleConfigData(_Strict):
    """交替调度模型"""
    refresh_period: int = Field(default=2000, ge=1, description="聚类刷新周期（迭代）")
    max_rounds: int = Field(default=5, ge=1, description="最大交替轮数")
    max_iterations: Optional[int] = Field(default=None, ge=1, description="总迭代次数，缺省为周期×轮数")
    eval_every: int = Field(default=500, ge=0, description="验证间隔，0表示每轮结束")
    plateau_patience: int = Field(default=3, ge=1, description="停滞容忍次数")
    plateau_tol: float = Field(default=1e-3, ge=0, description="停滞阈值")
    max_lr_drops: int = Field(default=2, ge=0, description="最多学习率下降次数")
    pretrain_epochs: int = Field(default=5, ge=0, description="softmax预训练轮数")
    pretrain_learning_rate: float = Field(default=0.1, ge=0, description="预训练学习率")
    pretrain_batch_size: int = Field(default=64, ge=1, description="预训练批大小")
    kmeans_max_iters: int = Field(default=50, ge=1, description="k-means最大迭代次数")


class TrainConfigData(_Strict):
    """训练配置模型"""
    loss_kind: str = Field(default="clmle", description="损失: clmle/lmle/triplet/softmax")
    cluster_size: int = Field(default=20, ge=1, description="簇大小l")
    encoder_config: Optional[EncoderConfigData] = Field(default=None)
    optimizer_config: Optional[OptimizerConfigData] = Field(default=None)
    sampler_config: Optional[SamplerConfigData] = Field(default=None)
    margin_config: Optional[MarginConfigData] = Field(default=None)
    schedule_config: Optional[ScheduleConfigData] = Field(default=None)
    classifier: str = Field(default="nearest_cluster", description="分类器: nearest_cluster/instance_knn")
    n_retrieve: Optional[int] = Field(default=None, ge=1, description="检索簇数N，缺省在验证集上搜索")
    instance_k: int = Field(default=10, ge=1, description="实例kNN的k")
    seed: int = Field(default=0, ge=0, description="随机种子")

    @field_validator('loss_kind')
    @classmethod
    def validate_loss_kind(cls, v):
        LossKind(v)
        return v

    @field_validator('classifier')
    @classmethod
    def validate_classifier(cls, v):
        ClassifierKind(v)
        return v


class EvalConfigData(_Strict):
    """评估配置模型"""
    split: str = Field(default="test", description="评估划分: train/val/test")
    far_targets: List[float] = Field(default=[1e-3, 1e-2, 1e-1], description="TAR@FAR目标")
    export_predictions: bool = Field(default=True, description="是否导出逐样本预测")

    @field_validator('split')
    @classmethod
    def validate_split(cls, v):
        Split(v)
        return v

    @field_validator('far_targets')
    @classmethod
    def validate_far(cls, v):
        if any(not (0 <= f <= 1) for f in v):
            raise ValueError('FAR目标必须在0到1之间')
        return v


class CompareConfigData(_Strict):
    """对比实验配置模型"""
    loss_kinds: List[str] = Field(default=["softmax", "triplet", "lmle", "clmle"], min_length=1)
    seeds: List[int] = Field(default=[0, 1, 2], min_length=1)
    target_fraction: float = Field(default=0.9, gt=0, le=1, description="收敛速度目标比例")

    @field_validator('loss_kinds')
    @classmethod
    def validate_kinds(cls, v):
        for kind in v:
            LossKind(kind)
        return v


class RunConfigData(_Strict):
    """命令行配置文件模型"""
    data: Optional[SyntheticSpecData] = Field(default=None, description="合成数据规格")
    dataset_path: Optional[str] = Field(default=None, description="已有数据集CSV路径")
    train: Optional[TrainConfigData] = Field(default=None)
    eval: Optional[EvalConfigData] = Field(default=None)
    compare: Optional[CompareConfigData] = Field(default=None)


@dataclass
class RunConfig:
    """解析后的运行配置"""
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    dataset_path: Optional[str] = None
    train_config: TrainConfig = field(default_factory=TrainConfig)
    eval_config: EvalConfig = field(default_factory=EvalConfig)
    compare_config: CompareConfig = field(default_factory=CompareConfig)


def parse_train_config(data: Optional[TrainConfigData]) -> TrainConfig:
    """
    解析训练配置为TrainConfig对象

    参数:
        data: 训练配置模型

    返回:
        TrainConfig对象
    """
    if data is None:
        return TrainConfig()

    encoder_config = EncoderConfig()
    if data.encoder_config:
        cfg = data.encoder_config
        encoder_config = EncoderConfig(hidden=tuple(cfg.hidden), embedding_dim=cfg.embedding_dim)

    optimizer_config = OptimizerConfig()
    if data.optimizer_config:
        optimizer_config = OptimizerConfig(**data.optimizer_config.model_dump())

    sampler_config = SamplerConfig()
    if data.sampler_config:
        cfg = data.sampler_config
        sampler_config = SamplerConfig(
            clusters_per_batch=cfg.clusters_per_batch,
            n_sub=cfg.n_sub,
            loss_cache_decay=cfg.loss_cache_decay,
            query_sampling=QuerySampling(cfg.query_sampling),
            cost_sensitive=cfg.cost_sensitive,
        )

    margin_config = MarginConfig()
    if data.margin_config:
        cfg = data.margin_config
        margin_config = MarginConfig(
            a1=cfg.a1,
            a2=cfg.a2,
            margin_fraction=cfg.margin_fraction,
            class_aware=cfg.class_aware,
            triplet_margin=cfg.triplet_margin,
            lmle_margins=tuple(cfg.lmle_margins),
        )

    schedule_config = ScheduleConfig()
    if data.schedule_config:
        schedule_config = ScheduleConfig(**data.schedule_config.model_dump())

    return TrainConfig(
        loss_kind=LossKind(data.loss_kind),
        cluster_size=data.cluster_size,
        encoder_config=encoder_config,
        optimizer_config=optimizer_config,
        sampler_config=sampler_config,
        margin_config=margin_config,
        schedule_config=schedule_config,
        classifier=ClassifierKind(data.classifier),
        n_retrieve=data.n_retrieve,
        instance_k=data.instance_k,
        seed=data.seed,
    )


def parse_run_config(data: Optional[RunConfigData]) -> RunConfig:
    """解析完整配置文件模型"""
    if data is None:
        return RunConfig()
    spec = SyntheticSpec()
    if data.data:
        raw = data.data.model_dump()
        raw["split_fractions"] = tuple(raw["split_fractions"])
        spec = SyntheticSpec(**raw)
    eval_config = EvalConfig()
    if data.eval:
        eval_config = EvalConfig(
            split=Split(data.eval.split),
            far_targets=tuple(data.eval.far_targets),
            export_predictions=data.eval.export_predictions,
        )
    compare_config = CompareConfig()
    if data.compare:
        compare_config = CompareConfig(
            loss_kinds=tuple(LossKind(k) for k in data.compare.loss_kinds),
            seeds=tuple(data.compare.seeds),
            target_fraction=data.compare.target_fraction,
        )
    return RunConfig(
        spec=spec,
        dataset_path=data.dataset_path,
        train_config=parse_train_config(data.train),
        eval_config=eval_config,
        compare_config=compare_config,
    )


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """
    读取并校验 JSON 配置文件；未给出路径时使用全部默认值

    异常:
        ConfigError: 文件不存在、不是合法 JSON 或不满足配置模型
    """
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"无法读取配置文件: {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"配置文件不是合法JSON: {path}: {e}") from e
    try:
        data = RunConfigData.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"配置校验失败: {e}") from e
    return parse_run_config(data)


def config_schema() -> dict:
    """配置文件的 JSON Schema"""
    return RunConfigData.model_json_schema()
