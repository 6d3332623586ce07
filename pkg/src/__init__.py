"""
CLMLE 算法包：簇间角度间隔嵌入学习与近邻簇分类
"""
from .models import (
    ClassifierKind,
    ClmleConfig,
    EncoderConfig,
    EvalReport,
    LossKind,
    LossOutput,
    MarginBounds,
    MarginConfig,
    OptimizerConfig,
    QuerySampling,
    Quintuplet,
    RocResult,
    SamplerConfig,
    ScheduleConfig,
    Split,
    SyntheticSpec,
    TrainConfig,
    TrainReport,
    UnitVector,
)
from .errors import ClmleError, ConfigError, DivergenceDetected, OutputIoError
from .hypersphere import cos_sim, margin_grid, margin_upper_bounds, normalize
from .clustering import ClusterIndex, cluster_all, cluster_class, refresh_all
from .losses import clmle_loss, hinged_log_ratio, lmle_loss, sample_quintuplets, softmax_ce_loss, triplet_loss
from .encoder import EncoderParams, backward, embed, forward, init_encoder, sgd_step
from .sampler import BatchSampler, LossCache, MiniBatch
from .classifier import ClusterSearchIndex, build_index, knn_clusters, pairwise_verify, predict, tune_N
from .datagen import Dataset, gen_power_law, load_dataset, save_dataset
from .metrics import balanced_accuracy, evaluate, imbalance_level, rank1_identification, roc_tar_far
from .trainer import Trainer, TrainedModel, evaluate_model, pretrain_softmax, seen_samples_to_target, train

__all__ = [
    'ClassifierKind',
    'ClmleConfig',
    'EncoderConfig',
    'EvalReport',
    'LossKind',
    'LossOutput',
    'MarginBounds',
    'MarginConfig',
    'OptimizerConfig',
    'QuerySampling',
    'Quintuplet',
    'RocResult',
    'SamplerConfig',
    'ScheduleConfig',
    'Split',
    'SyntheticSpec',
    'TrainConfig',
    'TrainReport',
    'UnitVector',
    'ClmleError',
    'ConfigError',
    'DivergenceDetected',
    'OutputIoError',
    'cos_sim',
    'margin_grid',
    'margin_upper_bounds',
    'normalize',
    'ClusterIndex',
    'cluster_all',
    'cluster_class',
    'refresh_all',
    'clmle_loss',
    'hinged_log_ratio',
    'lmle_loss',
    'sample_quintuplets',
    'softmax_ce_loss',
    'triplet_loss',
    'EncoderParams',
    'backward',
    'embed',
    'forward',
    'init_encoder',
    'sgd_step',
    'BatchSampler',
    'LossCache',
    'MiniBatch',
    'ClusterSearchIndex',
    'build_index',
    'knn_clusters',
    'pairwise_verify',
    'predict',
    'tune_N',
    'Dataset',
    'gen_power_law',
    'load_dataset',
    'save_dataset',
    'balanced_accuracy',
    'evaluate',
    'imbalance_level',
    'rank1_identification',
    'roc_tar_far',
    'Trainer',
    'TrainedModel',
    'evaluate_model',
    'pretrain_softmax',
    'seen_samples_to_target',
    'train',
]
