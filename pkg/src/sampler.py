"""
CLMLE - 批次采样模块

查询簇选择（按类别轮转 + 类内最高缓存损失）、近邻簇检索（保证同类/异类混合）、
簇内成员子采样以及代价敏感权重。
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from .clustering import ClusterIndex
from .errors import ConfigError, EmptyIndexError, TooFewClustersError
from .models import QuerySampling, SamplerConfig

logger = logging.getLogger(__name__)

RngLike = Union[int, np.random.Generator, np.random.SeedSequence, None]


@dataclass
class MiniBatch:
    """
    一个训练批次

    cluster_ids[0] 为查询簇，其后为检索到的 M-1 个近邻簇；
    cluster_pos[i] 为第 i 个样本所属簇在 cluster_ids 中的位置
    """
    query_cluster: int
    cluster_ids: np.ndarray
    sample_ids: np.ndarray
    cluster_pos: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    cluster_labels: np.ndarray

    @property
    def size(self) -> int:
        return int(self.sample_ids.size)

    @property
    def num_clusters(self) -> int:
        return int(self.cluster_ids.size)


@dataclass
class LossCache:
    """
    在线损失缓存

    ema: 每个簇的成员损失指数滑动平均，未打分为 +inf
    sample_loss: 每个样本最近一次观测到的损失，未观测为 NaN（聚类刷新时用于重建簇损失）
    """
    ema: np.ndarray
    decay: float = 0.5
    sample_loss: Optional[np.ndarray] = None

    @classmethod
    def from_index(cls, index: ClusterIndex, num_samples: int, decay: float = 0.5,
                   sample_loss: Optional[np.ndarray] = None) -> "LossCache":
        history = np.full(num_samples, np.nan) if sample_loss is None else sample_loss.copy()
        return cls(ema=index.running_loss.astype(float).copy(), decay=decay, sample_loss=history)


@dataclass
class ClassCursor:
    """类别轮转游标，保证每连续 C 次选择中每个类别恰好一次"""
    classes: List[int]
    position: int = 0

    def advance(self) -> int:
        if not self.classes:
            raise EmptyIndexError("没有可轮转的类别")
        label = self.classes[self.position % len(self.classes)]
        self.position = (self.position + 1) % len(self.classes)
        return label


def select_query_cluster(index: ClusterIndex, cache: LossCache, cursor: ClassCursor) -> int:
    """
    选择查询簇：游标前进到下一个类别，返回该类别缓存损失最大的簇

    参数:
        index: 全局簇索引
        cache: 在线损失缓存
        cursor: 类别轮转游标（会被推进）

    返回:
        簇ID，并列时取最小ID

    异常:
        EmptyIndexError: 索引为空或游标类别没有簇
    """
    if index.num_clusters == 0:
        raise EmptyIndexError("簇索引为空")
    label = cursor.advance()
    candidates = index.clusters_of_class(label)
    if candidates.size == 0:
        raise EmptyIndexError(f"类别{label}没有簇")
    losses = cache.ema[candidates]
    # argmax 返回首个最大值，candidates 升序，即最小ID
    return int(candidates[int(np.argmax(losses))])


def retrieve_nearest_clusters(index: ClusterIndex, query_cluster: int, count: int) -> np.ndarray:
    """
    按质心内积检索查询簇的 count 个最近邻簇，并保证同类/异类混合

    若结果缺少某一类簇而全局存在，则用该类最相似的簇替换另一类中最不相似的一个
    （每类最多替换一个位置）。

    参数:
        index: 全局簇索引
        query_cluster: 查询簇ID
        count: 检索数量 M-1

    返回:
        簇ID数组，按相似度降序（并列时ID小者在前）

    异常:
        TooFewClustersError: 全局簇数 < count + 1
    """
    if index.num_clusters < count + 1:
        raise TooFewClustersError(f"全局只有{index.num_clusters}个簇，无法检索{count}个近邻")
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    centroids = index.centroids
    sims = centroids @ centroids[query_cluster]
    ids = np.arange(index.num_clusters)
    order = np.lexsort((ids, -sims))
    order = order[order != query_cluster]
    top = list(order[:count])
    rest = list(order[count:])

    if count >= 2:
        same = index.labels == index.labels[query_cluster]
        for want_same in (True, False):
            if any(same[c] == want_same for c in top):
                continue
            replacement = next((c for c in rest if same[c] == want_same), None)
            if replacement is None:
                continue
            # top 全部属于另一类，末位即该类中最不相似者
            dropped = top.pop()
            top.append(replacement)
            rest.remove(replacement)
            rest.append(dropped)
            logger.debug(f"检索混合替换: 簇{dropped} -> 簇{replacement}")

    result = np.array(top, dtype=np.int64)
    return result[np.lexsort((result, -sims[result]))]


def subsample_and_weight(
    index: ClusterIndex,
    cluster_ids: Sequence[int],
    n_sub: int,
    rng: RngLike = None,
    labels_of_clusters: Optional[np.ndarray] = None,
    cost_sensitive: bool = True,
) -> MiniBatch:
    """
    每个簇无放回均匀采样 min(n_sub, 簇大小) 个成员，并计算代价敏感权重

    w_i = n / (C_batch · 批内与 i 同类的样本数)，均值恰为 1

    参数:
        index: 全局簇索引
        cluster_ids: 批内簇ID，首个为查询簇
        n_sub: 每簇采样数 (≥1)
        rng: 随机数生成器或种子
        labels_of_clusters: 覆盖簇类别（默认取 index.labels）
        cost_sensitive: False 时所有权重为 1

    返回:
        MiniBatch
    """
    if n_sub < 1:
        raise ConfigError(f"n_sub必须≥1，实际为{n_sub}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    cluster_ids = np.asarray(cluster_ids, dtype=np.int64)
    cluster_labels = (index.labels if labels_of_clusters is None else labels_of_clusters)[cluster_ids]

    sample_parts = []
    pos_parts = []
    for pos, cid in enumerate(cluster_ids):
        members = index.members[int(cid)]
        take = min(n_sub, members.size)
        chosen = members if take == members.size else rng.choice(members, size=take, replace=False)
        sample_parts.append(np.asarray(chosen, dtype=np.int64))
        pos_parts.append(np.full(take, pos, dtype=np.int64))
    sample_ids = np.concatenate(sample_parts)
    cluster_pos = np.concatenate(pos_parts)
    labels = cluster_labels[cluster_pos]

    if cost_sensitive:
        weights = cost_weights(labels)
    else:
        weights = np.ones(sample_ids.size)
    return MiniBatch(
        query_cluster=int(cluster_ids[0]),
        cluster_ids=cluster_ids,
        sample_ids=sample_ids,
        cluster_pos=cluster_pos,
        labels=labels,
        weights=weights,
        cluster_labels=np.asarray(cluster_labels),
    )


def cost_weights(labels: np.ndarray) -> np.ndarray:
    """批内逆类频率权重 n / (C_batch · count(label_i))"""
    labels = np.asarray(labels)
    classes, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    return labels.size / (classes.size * counts[inverse].astype(float))


def update_loss_cache(cache: LossCache, per_sample_losses: np.ndarray, batch: MiniBatch) -> LossCache:
    """
    用批内样本损失更新涉及簇的滑动平均

    ema ← (1-β)·ema + β·mean，+inf 直接替换为观测均值；未涉及的簇保持不变

    返回:
        新的 LossCache（不修改输入）
    """
    losses = np.asarray(per_sample_losses, dtype=float)
    ema = cache.ema.copy()
    beta = cache.decay
    for pos, cid in enumerate(batch.cluster_ids):
        observed = losses[batch.cluster_pos == pos]
        if observed.size == 0:
            continue
        mean = float(observed.mean())
        if math.isinf(ema[cid]):
            ema[cid] = mean
        else:
            ema[cid] = (1.0 - beta) * ema[cid] + beta * mean
    sample_loss = None
    if cache.sample_loss is not None:
        sample_loss = cache.sample_loss.copy()
        sample_loss[batch.sample_ids] = losses
    return LossCache(ema=ema, decay=cache.decay, sample_loss=sample_loss)


class BatchSampler:
    """
    批次采样器

    持有类别游标与损失缓存，按配置产生 MiniBatch；聚类刷新后通过 reset_index 切换索引
    """

    def __init__(self, index: ClusterIndex, num_samples: int, config: SamplerConfig, seed: RngLike = None):
        """
        参数:
            index: 初始簇索引
            num_samples: 训练样本总数（样本ID范围）
            config: 采样配置
            seed: 随机种子
        """
        self.config = config
        self.num_samples = num_samples
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.index = index
        self.cursor = ClassCursor(classes=index.classes)
        self.cache = LossCache.from_index(index, num_samples, decay=config.loss_cache_decay)
        self._warn_if_clamped()

    @property
    def clusters_per_batch(self) -> int:
        return min(self.config.clusters_per_batch, self.index.num_clusters)

    def reset_index(self, index: ClusterIndex) -> None:
        """切换到刷新后的簇索引，簇损失由 index.running_loss 重建，样本损失历史清空从本轮重新记录"""
        self.index = index
        if self.cursor.classes != index.classes:
            self.cursor = ClassCursor(classes=index.classes)
        self.cache = LossCache.from_index(index, self.num_samples, decay=self.config.loss_cache_decay)
        self._warn_if_clamped()

    def _warn_if_clamped(self) -> None:
        if self.index.num_clusters < self.config.clusters_per_batch:
            logger.warning(
                f"全局只有{self.index.num_clusters}个簇，每批簇数由{self.config.clusters_per_batch}截断为簇总数"
            )

    def next_batch(self) -> MiniBatch:
        """选择查询簇、检索近邻并子采样"""
        if self.config.query_sampling == QuerySampling.UNIFORM:
            if self.index.num_clusters == 0:
                raise EmptyIndexError("簇索引为空")
            query = int(self.rng.integers(self.index.num_clusters))
        else:
            query = select_query_cluster(self.index, self.cache, self.cursor)
        neighbours = retrieve_nearest_clusters(self.index, query, self.clusters_per_batch - 1)
        cluster_ids = np.concatenate([[query], neighbours]).astype(np.int64)
        return subsample_and_weight(
            self.index,
            cluster_ids,
            self.config.n_sub,
            rng=self.rng,
            cost_sensitive=self.config.cost_sensitive,
        )

    def observe(self, per_sample_losses: np.ndarray, batch: MiniBatch) -> None:
        self.cache = update_loss_cache(self.cache, per_sample_losses, batch)
