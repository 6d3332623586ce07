"""
CLMLE - 训练模块

交替优化：
    1. 用当前嵌入对每个类别做均衡球面 k-means（首轮使用 softmax 预训练得到的嵌入）
    2. 反复采样批次、计算损失、反向传播、更新参数与在线损失缓存
    3. 每 refresh_period 次迭代刷新一次聚类，直到完成全部轮次或验证集指标停滞

同一套调度也驱动三种对照损失（triplet、lmle、softmax）。
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .classifier import N_GRID, build_index, predict_batch, predict_instance_knn, tune_N
from .clustering import ClusterIndex, cluster_all, refresh_all
from .datagen import Dataset
from .encoder import (
    EncoderParams,
    backward,
    embed,
    forward,
    init_encoder,
    init_optimizer,
    sgd_step,
)
from .errors import (
    ConfigError,
    DegenerateCentroidError,
    EmptyQuintupletSetError,
    EmptyTripletSetError,
    DivergenceDetected,
    NonFiniteGradientError,
    SingleClusterBatchError,
)
from .hypersphere import margin_grid, margin_upper_bounds
from .losses import clmle_loss, lmle_loss, sample_quintuplets, softmax_ce_loss, triplet_loss
from .metrics import balanced_accuracy, evaluate, verification_report
from .models import (
    ClassifierKind,
    ClmleConfig,
    EvalReport,
    LossKind,
    LossOutput,
    Split,
    TrainConfig,
    TrainReport,
)
from .sampler import BatchSampler, MiniBatch

logger = logging.getLogger(__name__)


@dataclass
class TrainedModel:
    """训练产物：编码器参数、最终簇索引与推理配置"""
    params: EncoderParams
    loss_kind: LossKind
    classifier: ClassifierKind = ClassifierKind.NEAREST_CLUSTER
    cluster_index: Optional[ClusterIndex] = None
    n_retrieve: Optional[int] = None
    head: Optional[np.ndarray] = None  # softmax 分类权重 (d, C)
    instance_k: int = 10

    def predict(self, features: np.ndarray, train_set: Optional[Dataset] = None) -> np.ndarray:
        """
        对原始特征分类

        softmax 基线使用线性分类头；instance_knn 需要提供训练集；其余使用近邻簇规则
        """
        queries = embed(self.params, features)
        if self.loss_kind == LossKind.SOFTMAX and self.head is not None:
            return np.argmax(queries @ self.head, axis=1).astype(np.int64)
        if self.classifier == ClassifierKind.INSTANCE_KNN:
            if train_set is None:
                raise ConfigError("实例级kNN分类需要训练集")
            return predict_instance_knn(
                embed(self.params, train_set.features), train_set.labels, queries, k=self.instance_k
            )
        if self.cluster_index is None:
            raise ConfigError("模型缺少簇索引，无法按近邻簇分类")
        search = build_index(self.cluster_index, self.n_retrieve or N_GRID[0])
        return predict_batch(search, queries)


@dataclass
class SoftmaxResult:
    params: EncoderParams
    head: np.ndarray
    losses: List[float] = field(default_factory=list)


def validate_train_config(config: TrainConfig) -> None:
    """
    校验训练配置

    异常:
        ConfigError: 任一参数越界
    """
    checks = [
        (config.cluster_size >= 1, f"簇大小必须≥1，实际为{config.cluster_size}"),
        (config.sampler_config.clusters_per_batch >= 2, "每批簇数M必须≥2"),
        (config.sampler_config.n_sub >= 1, "每簇采样数必须≥1"),
        (0.0 < config.sampler_config.loss_cache_decay <= 1.0, "损失缓存衰减系数必须在(0, 1]"),
        (config.schedule_config.refresh_period >= 1, "聚类刷新周期必须≥1"),
        (config.schedule_config.max_rounds >= 1, "交替轮数必须≥1"),
        (config.schedule_config.total_iterations >= 1, "总迭代次数必须≥1"),
        (config.schedule_config.eval_every >= 0, "评估间隔不能为负"),
        (config.schedule_config.plateau_patience >= 1, "停滞容忍次数必须≥1"),
        (config.schedule_config.max_lr_drops >= 0, "学习率下降次数不能为负"),
        (config.schedule_config.pretrain_epochs >= 0, "预训练轮数不能为负"),
        (config.schedule_config.pretrain_batch_size >= 1, "预训练批大小必须≥1"),
        (config.schedule_config.kmeans_max_iters >= 1, "k-means迭代次数必须≥1"),
        (config.optimizer_config.learning_rate >= 0, "学习率不能为负"),
        (0.0 <= config.optimizer_config.momentum < 1.0, "动量必须在[0, 1)"),
        (config.optimizer_config.weight_decay >= 0, "权重衰减不能为负"),
        (config.encoder_config.embedding_dim >= 2, "嵌入维度必须≥2"),
        (all(h >= 1 for h in config.encoder_config.hidden), "隐藏层宽度必须≥1"),
        (config.n_retrieve is None or config.n_retrieve >= 1, "检索簇数必须≥1"),
        (config.instance_k >= 1, "实例kNN的k必须≥1"),
        (config.margin_config.triplet_margin > 0, "三元组间隔必须>0"),
        (len(config.margin_config.lmle_margins) == 3 and all(g > 0 for g in config.margin_config.lmle_margins),
         "五元组间隔必须为三个正数"),
        (0.0 < config.margin_config.margin_fraction <= 1.0, "间隔比例必须在(0, 1]"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)


def resolve_margins(config: TrainConfig, labels: np.ndarray) -> Tuple[float, float]:
    """
    确定簇间间隔 (a1, a2)

    未显式给出时按上界的 margin_fraction 推导；a2 使用最小类别的上界并截断到 a1
    """
    classes, counts = np.unique(labels, return_counts=True)
    bounds = margin_upper_bounds(len(classes), int(counts.min()), int(counts.sum()))
    mc = config.margin_config
    a1 = mc.a1 if mc.a1 is not None else mc.margin_fraction * bounds.a1_max
    a2 = mc.a2 if mc.a2 is not None else min(mc.margin_fraction * bounds.a2_max, a1)
    ClmleConfig(a1=a1, a2=a2).validate(a1_max=bounds.a1_max)
    return float(a1), float(a2)


def train_softmax_head(
    dataset: Dataset,
    epochs: int,
    seed=0,
    params: Optional[EncoderParams] = None,
    hidden: Sequence[int] = (64, 64),
    embedding_dim: int = 16,
    learning_rate: float = 0.1,
    batch_size: int = 64,
    momentum: float = 0.9,
    weight_decay: float = 0.0005,
) -> SoftmaxResult:
    """
    在训练集上按 epoch 做 softmax 交叉熵训练，返回编码器与分类头

    异常:
        DivergenceDetected: 损失或梯度出现非有限值
    """
    train = dataset.subset(Split.TRAIN)
    if train.num_classes < 2:
        raise ConfigError(f"训练集至少需要2个类别，实际为{train.num_classes}")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seed, head_seed, order_seed = ss.spawn(3)
    if params is None:
        params = init_encoder(train.input_dim, hidden, embedding_dim, seed=init_seed)
    num_classes = int(train.labels.max()) + 1
    head = np.random.default_rng(head_seed).normal(0.0, 1.0 / math.sqrt(params.output_dim),
                                                    size=(params.output_dim, num_classes))
    state = init_optimizer(learning_rate, momentum, weight_decay)
    rng = np.random.default_rng(order_seed)
    losses: List[float] = []
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, order.size, batch_size):
            step += 1
            rows = order[start:start + batch_size]
            params, head, state, value = _softmax_step(
                params, head, state, train.features[rows], train.labels[rows], step
            )
            losses.append(value)
    return SoftmaxResult(params=params, head=head, losses=losses)


def pretrain_softmax(dataset: Dataset, epochs: int, seed=0, **kwargs) -> EncoderParams:
    """
    softmax 预训练编码器，作为首轮聚类的先验特征

    参数:
        dataset: 数据集（使用 train 划分）
        epochs: 训练轮数
        seed: 随机种子
        kwargs: 透传给 train_softmax_head（params、learning_rate 等）

    返回:
        EncoderParams
    """
    return train_softmax_head(dataset, epochs, seed=seed, **kwargs).params


def _softmax_step(params, head, state, x, y, iteration):
    u, cache = forward(params, x)
    out = softmax_ce_loss(u, y, head)
    if not math.isfinite(out.value):
        raise DivergenceDetected(iteration)
    try:
        grads = backward(params, cache, out.grads)
        params, state, extra = sgd_step(params, grads, state, extra={"head": (head, out.param_grads["W"])})
    except NonFiniteGradientError as e:
        raise DivergenceDetected(iteration, f"第{iteration}次迭代梯度发散: {e}") from e
    return params, extra["head"], state, out.value


class Trainer:
    """
    交替训练器

    一次训练是对编码器、优化器与采样器状态的单写者过程；给定种子结果完全确定
    """

    def __init__(self, dataset: Dataset, config: TrainConfig):
        """
        参数:
            dataset: 含 train/val 划分的数据集
            config: 训练配置
        """
        validate_train_config(config)
        self.config = config
        self.train_set = dataset.subset(Split.TRAIN)
        self.val_set = dataset.subset(Split.VAL)
        if self.train_set.num_classes < 2:
            raise ConfigError(f"训练集至少需要2个类别，实际为{self.train_set.num_classes}")
        seeds = np.random.SeedSequence(config.seed).spawn(5)
        self._pretrain_seed, self._cluster_seed, self._sampler_seed, self._batch_seed, _ = seeds
        self.report = TrainReport(loss_kind=config.loss_kind, seed=config.seed)
        self.margins = (0.0, 0.0)
        if config.loss_kind == LossKind.CLMLE:
            self.margins = resolve_margins(config, self.train_set.labels)
            self.report.margins = {"a1": self.margins[0], "a2": self.margins[1]}
        elif config.loss_kind == LossKind.TRIPLET:
            self.report.margins = {"g": config.margin_config.triplet_margin}
        elif config.loss_kind == LossKind.LMLE:
            g1, g2, g3 = config.margin_config.lmle_margins
            self.report.margins = {"g1": g1, "g2": g2, "g3": g3}

    # ---------- 公共入口 ----------

    def run(self) -> TrainReport:
        """执行完整训练并返回报告（report.model 为训练产物）"""
        cfg = self.config
        sched = cfg.schedule_config
        warm = train_softmax_head(
            self.train_set,
            sched.pretrain_epochs,
            seed=self._pretrain_seed,
            hidden=cfg.encoder_config.hidden,
            embedding_dim=cfg.encoder_config.embedding_dim,
            learning_rate=sched.pretrain_learning_rate,
            batch_size=sched.pretrain_batch_size,
            momentum=cfg.optimizer_config.momentum,
            weight_decay=cfg.optimizer_config.weight_decay,
        )
        params, head = warm.params, warm.head
        logger.info(f"softmax预训练完成: {sched.pretrain_epochs}轮, {len(warm.losses)}步")
        state = init_optimizer(
            cfg.optimizer_config.learning_rate, cfg.optimizer_config.momentum, cfg.optimizer_config.weight_decay
        )

        index = None
        sampler = None
        if cfg.loss_kind != LossKind.SOFTMAX:
            index = self._cluster(params)
            sampler = BatchSampler(index, len(self.train_set), cfg.sampler_config, seed=self._sampler_seed)
        batch_rng = np.random.default_rng(self._batch_seed)

        total = sched.total_iterations
        iteration = 0
        seen = 0
        lr_drops = 0
        best_val = -np.inf
        stalled = 0
        stop = False
        while iteration < total and self.report.rounds_completed < sched.max_rounds and not stop:
            round_start = time.perf_counter()
            round_end = min(iteration + sched.refresh_period, total)
            while iteration < round_end:
                iteration += 1
                if cfg.loss_kind == LossKind.SOFTMAX:
                    rows = self._uniform_rows(batch_rng)
                    params, head, state, value = _softmax_step(
                        params, head, state, self.train_set.features[rows], self.train_set.labels[rows], iteration
                    )
                    batch_size = rows.size
                else:
                    batch = sampler.next_batch()
                    out = self._batch_loss(params, batch, batch_rng, iteration)
                    if out is None:
                        self.report.skipped_batches += 1
                        batch_size = 0
                    else:
                        value, loss_out, cache = out
                        try:
                            grads = backward(params, cache, loss_out.grads)
                            params, state, _ = sgd_step(params, grads, state)
                        except NonFiniteGradientError as e:
                            raise DivergenceDetected(iteration, f"第{iteration}次迭代梯度发散: {e}") from e
                        sampler.observe(loss_out.per_sample, batch)
                        batch_size = batch.size
                if batch_size:
                    seen += batch_size
                    self.report.losses.append(value)
                    self.report.seen_samples.append(seen)

                if sched.eval_every and iteration % sched.eval_every == 0:
                    acc = self._record_eval(params, head, index, iteration, seen, state.learning_rate)
                    if acc is None:
                        continue
                    if acc >= best_val + sched.plateau_tol:
                        best_val = acc
                        stalled = 0
                    else:
                        stalled += 1
                    if stalled >= sched.plateau_patience:
                        stalled = 0
                        if lr_drops >= sched.max_lr_drops:
                            logger.warning(f"验证集指标停滞且学习率已下降{lr_drops}次，提前结束训练")
                            stop = True
                        else:
                            lr_drops += 1
                            state.learning_rate /= 10.0
                            logger.warning(f"验证集指标停滞，学习率降为{state.learning_rate:g}，提前结束本轮")
                        break

            if cfg.loss_kind != LossKind.SOFTMAX:
                index = self._refresh(params, index, sampler)
                sampler.reset_index(index)
            self.report.rounds_completed += 1
            self.report.round_wall_clock_s.append(time.perf_counter() - round_start)
            if sched.eval_every == 0:
                self._record_eval(params, head, index, iteration, seen, state.learning_rate)

        model = self._finalize(params, head, index)
        self.report.model = model
        return self.report

    # ---------- 内部步骤 ----------

    def _cluster(self, params: EncoderParams) -> ClusterIndex:
        cfg = self.config
        features = embed(params, self.train_set.features)
        index = cluster_all(
            features,
            self.train_set.labels,
            cfg.cluster_size,
            max_iters=cfg.schedule_config.kmeans_max_iters,
            rng_seed=int(self._cluster_seed.generate_state(1)[0]),
        )
        self.report.clustering_passes += 1
        return index

    def _refresh(self, params: EncoderParams, previous: ClusterIndex, sampler: BatchSampler) -> ClusterIndex:
        features = embed(params, self.train_set.features)
        index = refresh_all(
            features,
            self.train_set.labels,
            previous,
            sample_losses=sampler.cache.sample_loss,
            max_iters=self.config.schedule_config.kmeans_max_iters,
            rng_seed=int(self._cluster_seed.generate_state(self.report.clustering_passes + 1)[-1]),
        )
        self.report.clustering_passes += 1
        logger.info(f"第{self.report.clustering_passes}次聚类完成: {index.num_clusters}个簇")
        return index

    def _uniform_rows(self, rng: np.random.Generator) -> np.ndarray:
        sc = self.config.sampler_config
        size = min(sc.clusters_per_batch * sc.n_sub, len(self.train_set))
        return rng.choice(len(self.train_set), size=size, replace=False)

    def _batch_loss(self, params: EncoderParams, batch: MiniBatch, rng: np.random.Generator, iteration: int):
        """返回 (损失值, LossOutput, 前向缓存)；批次退化时返回 None"""
        cfg = self.config
        u, cache = forward(params, self.train_set.features[batch.sample_ids])
        try:
            if cfg.loss_kind == LossKind.CLMLE:
                out = clmle_loss(
                    u,
                    batch.cluster_pos,
                    batch.cluster_labels,
                    ClmleConfig(
                        a1=self.margins[0],
                        a2=self.margins[1],
                        cost_weights=batch.weights,
                        class_aware=cfg.margin_config.class_aware,
                    ),
                )
            elif cfg.loss_kind == LossKind.LMLE:
                out = self._lmle(u, batch)
            else:
                out = self._triplet(u, batch, rng)
        except (DegenerateCentroidError, SingleClusterBatchError, EmptyQuintupletSetError, EmptyTripletSetError) as e:
            logger.warning(f"第{iteration}次迭代跳过退化批次: {e}")
            return None
        if not math.isfinite(out.value):
            raise DivergenceDetected(iteration)
        return out.value, out, cache

    def _lmle(self, u: np.ndarray, batch: MiniBatch) -> LossOutput:
        quints = sample_quintuplets(
            u, batch.labels, batch.cluster_pos, anchors=range(batch.size), ids=batch.sample_ids, skip_invalid=True
        )
        weights = batch.weights[[q.anchor for q in quints]] if quints else None
        return lmle_loss(u, quints, self.config.margin_config.lmle_margins, weights=weights)

    def _triplet(self, u: np.ndarray, batch: MiniBatch, rng: np.random.Generator) -> LossOutput:
        triplets = []
        for anchor in range(batch.size):
            same = np.flatnonzero(batch.labels == batch.labels[anchor])
            same = same[same != anchor]
            other = np.flatnonzero(batch.labels != batch.labels[anchor])
            if same.size == 0 or other.size == 0:
                continue
            triplets.append((anchor, int(rng.choice(same)), int(rng.choice(other))))
        weights = batch.weights[[t[0] for t in triplets]] if triplets else None
        return triplet_loss(u, np.asarray(triplets, dtype=np.int64), self.config.margin_config.triplet_margin,
                            weights=weights)

    def _record_eval(self, params, head, index, iteration, seen, learning_rate) -> Optional[float]:
        if len(self.val_set) == 0:
            return None
        cfg = self.config
        if index is not None:
            index = index.with_centroids(embed(params, self.train_set.features))
        model = TrainedModel(
            params=params,
            loss_kind=cfg.loss_kind,
            classifier=cfg.classifier,
            cluster_index=index,
            n_retrieve=cfg.n_retrieve,
            head=head,
            instance_k=cfg.instance_k,
        )
        acc = balanced_accuracy(model.predict(self.val_set.features, self.train_set), self.val_set.labels)
        self.report.eval_iterations.append(iteration)
        self.report.eval_seen_samples.append(seen)
        self.report.val_balanced_accuracy.append(acc)
        self.report.learning_rates.append(learning_rate)
        logger.info(f"迭代{iteration}: 已见样本{seen}, 验证集均衡准确率{acc:.4f}")
        return acc

    def _finalize(self, params, head, index) -> TrainedModel:
        cfg = self.config
        n_retrieve = cfg.n_retrieve
        if index is not None and cfg.classifier == ClassifierKind.NEAREST_CLUSTER:
            if n_retrieve is None and len(self.val_set) > 0:
                n_retrieve, _ = tune_N(index, embed(params, self.val_set.features), self.val_set.labels)
            elif n_retrieve is None:
                n_retrieve = min(N_GRID[0], index.num_clusters)
            n_retrieve = min(n_retrieve, index.num_clusters)
        model = TrainedModel(
            params=params,
            loss_kind=cfg.loss_kind,
            classifier=cfg.classifier,
            cluster_index=index,
            n_retrieve=n_retrieve,
            head=head if cfg.loss_kind == LossKind.SOFTMAX else None,
            instance_k=cfg.instance_k,
        )
        self.report.n_retrieve = n_retrieve
        if len(self.val_set) > 0:
            self.report.final_val_balanced_accuracy = balanced_accuracy(
                model.predict(self.val_set.features, self.train_set), self.val_set.labels
            )
        else:
            self.report.warnings.append("验证集为空，未计算最终验证指标")
        logger.info(
            f"训练结束: {cfg.loss_kind.value}, {self.report.rounds_completed}轮, "
            f"{self.report.clustering_passes}次聚类, 最终验证集均衡准确率{self.report.final_val_balanced_accuracy:.4f}"
        )
        return model


def train(dataset: Dataset, config: TrainConfig) -> TrainReport:
    """
    训练入口

    参数:
        dataset: 含 train/val/test 划分的数据集
        config: 训练配置

    返回:
        TrainReport，report.model 为 TrainedModel

    异常:
        ConfigError: 配置非法
        DivergenceDetected: 训练发散，携带迭代序号
    """
    return Trainer(dataset, config).run()


def evaluate_model(
    model: TrainedModel,
    dataset: Dataset,
    split: Split = Split.TEST,
    far_targets: Sequence[float] = (),
) -> EvalReport:
    """
    在指定划分上评估模型，可选附带样本对验证 ROC
    """
    part = dataset.subset(split)
    train_set = dataset.subset(Split.TRAIN)
    predictions = model.predict(part.features, train_set)
    roc = None
    if far_targets:
        roc = verification_report(embed(model.params, part.features), part.labels, far_targets)
    return evaluate(predictions, part.labels, roc=roc, n_retrieve=model.n_retrieve)


def seen_samples_to_target(
    report: TrainReport, fraction: float = 0.9, target: Optional[float] = None
) -> Optional[int]:
    """
    验证集均衡准确率首次达到目标时的累计已见样本数

    参数:
        report: 训练报告
        fraction: 目标为最终验证指标的该比例（target 未给出时）
        target: 绝对目标值

    返回:
        已见样本数，从未达到时为 None
    """
    goal = target if target is not None else fraction * report.final_val_balanced_accuracy
    for seen, acc in zip(report.eval_seen_samples, report.val_balanced_accuracy):
        if acc >= goal:
            return int(seen)
    return None


def select_margins(
    dataset: Dataset,
    config: TrainConfig,
    fractions: Sequence[float] = (0.1, 0.25, 0.5),
) -> Tuple[Tuple[float, float], Dict[Tuple[float, float], float]]:
    """
    在 (a1, a2) 网格上按验证集均衡准确率选择簇间间隔，并列取先出现者

    返回:
        (最优间隔, {间隔: 最终验证集均衡准确率})
    """
    train_labels = dataset.subset(Split.TRAIN).labels
    classes, counts = np.unique(train_labels, return_counts=True)
    bounds = margin_upper_bounds(len(classes), int(counts.min()), int(counts.sum()))
    scores: Dict[Tuple[float, float], float] = {}
    for a1, a2 in margin_grid(bounds, tuple(fractions)):
        trial = replace(
            config,
            loss_kind=LossKind.CLMLE,
            margin_config=replace(config.margin_config, a1=a1, a2=a2),
        )
        scores[(a1, a2)] = train(dataset, trial).final_val_balanced_accuracy
        logger.info(f"间隔(a1={a1:.4f}, a2={a2:.4f}) 验证集均衡准确率{scores[(a1, a2)]:.4f}")
    best = max(scores, key=lambda k: scores[k])
    return best, scores
