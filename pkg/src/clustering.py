"""
CLMLE - 均衡球面 k-means 模块

为每个类别生成等大小 l 的簇，维护全局簇索引，并在训练过程中用最新特征周期性刷新。
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import (
    DegenerateCentroidError,
    EmptyInputError,
    InvalidCountsError,
    OutputIoError,
)
from .hypersphere import ZERO_NORM_EPS, normalize_rows
from .models import UnitVector

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT_VERSION = 1

Seed = Union[int, Sequence[int]]


@dataclass
class ClassClusters:
    """单个类别的聚类结果"""
    label: int
    members: List[np.ndarray]  # 每个簇的样本ID
    centroids: np.ndarray  # (K, d)，单位范数
    objective_trace: List[float] = field(default_factory=list)  # 每次质心更新后的目标值
    iterations: int = 0

    @property
    def num_clusters(self) -> int:
        return len(self.members)

    @property
    def sizes(self) -> List[int]:
        return [int(m.size) for m in self.members]


@dataclass
class ClusterIndex:
    """
    全局簇索引

    簇ID即其在列表中的位置；同一类别的簇ID连续且按类别升序排列
    """
    cluster_size: int
    labels: np.ndarray  # (K_total,) 每个簇所属类别
    members: List[np.ndarray]  # 每个簇的样本ID
    centroids: np.ndarray  # (K_total, d)
    running_loss: np.ndarray  # (K_total,) 未打分的簇为 +inf

    @property
    def num_clusters(self) -> int:
        return len(self.members)

    @property
    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def clusters_of_class(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def assignment(self, num_samples: int) -> np.ndarray:
        """样本ID → 簇ID，未被索引的样本为 -1"""
        out = np.full(num_samples, -1, dtype=np.int64)
        for cid, ids in enumerate(self.members):
            out[ids] = cid
        return out

    def with_centroids(self, features: np.ndarray) -> "ClusterIndex":
        """
        在不改变划分的前提下，用给定特征重新计算质心

        退化（均值接近零）的簇保留原质心
        """
        centroids = self.centroids.copy()
        for cid, ids in enumerate(self.members):
            try:
                centroids[cid] = recompute_centroid(features[ids]).components
            except DegenerateCentroidError:
                logger.warning(f"簇{cid}均值退化，保留原质心")
        return ClusterIndex(
            cluster_size=self.cluster_size,
            labels=self.labels.copy(),
            members=[m.copy() for m in self.members],
            centroids=centroids,
            running_loss=self.running_loss.copy(),
        )

    def to_dict(self) -> dict:
        return {
            "format_version": SNAPSHOT_FORMAT_VERSION,
            "cluster_size": int(self.cluster_size),
            "clusters": [
                {
                    "cluster_id": cid,
                    "label": int(self.labels[cid]),
                    "members": [int(i) for i in self.members[cid]],
                    "centroid": [float(v) for v in self.centroids[cid]],
                    "running_loss": None if math.isinf(self.running_loss[cid])
                    else float(self.running_loss[cid]),
                }
                for cid in range(self.num_clusters)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterIndex":
        version = data.get("format_version")
        if version != SNAPSHOT_FORMAT_VERSION:
            raise OutputIoError(f"不支持的簇索引版本: {version}")
        clusters = sorted(data["clusters"], key=lambda c: c["cluster_id"])
        if not clusters:
            raise EmptyInputError("簇索引快照为空")
        return cls(
            cluster_size=int(data["cluster_size"]),
            labels=np.array([c["label"] for c in clusters], dtype=np.int64),
            members=[np.array(c["members"], dtype=np.int64) for c in clusters],
            centroids=np.array([c["centroid"] for c in clusters], dtype=float),
            running_loss=np.array(
                [math.inf if c["running_loss"] is None else c["running_loss"] for c in clusters],
                dtype=float,
            ),
        )

    def save(self, path: Union[str, Path]) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")
        except OSError as e:
            raise OutputIoError(f"无法写入簇索引{path}: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ClusterIndex":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise OutputIoError(f"无法读取簇索引{path}: {e}") from e
        return cls.from_dict(data)


def recompute_centroid(member_features: np.ndarray) -> UnitVector:
    """
    计算簇质心：成员均值再归一化

    参数:
        member_features: 成员单位向量 (n, d)

    返回:
        UnitVector: 归一化均值

    异常:
        DegenerateCentroidError: 均值范数 < 1e-12（例如成员互为对径点）
    """
    x = np.atleast_2d(np.asarray(member_features, dtype=float))
    if x.shape[0] == 0:
        raise EmptyInputError("簇成员为空")
    mean = x.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm < ZERO_NORM_EPS:
        raise DegenerateCentroidError(f"簇均值范数{norm:.3e}过小，成员在球面上相互抵消")
    return UnitVector(mean / norm)


def clustering_objective(features: np.ndarray, clusters: ClassClusters) -> float:
    """
    聚类目标 Σ_k Σ_{i∈I_k} f(x_i)ᵀμ_k，空簇不计入

    参数:
        features: 以样本ID为行号的特征矩阵
        clusters: 某类别的聚类结果
    """
    total = 0.0
    for ids, centroid in zip(clusters.members, clusters.centroids):
        if ids.size == 0:
            continue
        total += float(np.sum(features[ids] @ centroid))
    return total


def cluster_class(
    features: np.ndarray,
    cluster_size: int,
    max_iters: int = 50,
    rng_seed: Seed = 0,
    ids: Optional[np.ndarray] = None,
    label: int = -1,
) -> ClassClusters:
    """
    对单个类别执行均衡球面 k-means

    簇数 K = max(1, ⌊L_c/l⌋)。每轮先做容量为 l 的贪心均衡分配，剩余 r = L_c mod l
    个样本再分给最相似的质心（每簇最多额外 ⌈r/K⌉ 个）。

    参数:
        features: 该类别样本特征 (L_c, d)
        cluster_size: 目标簇大小 l
        max_iters: 最大迭代次数
        rng_seed: 随机种子（k-means++ 初始化）
        ids: 样本ID，默认 0..L_c-1
        label: 类别标签

    返回:
        ClassClusters: 划分、质心与目标值轨迹
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("聚类输入为空")
    if cluster_size < 1 or max_iters < 1:
        raise InvalidCountsError(f"簇大小与迭代次数必须≥1，实际l={cluster_size}, max_iters={max_iters}")
    x = normalize_rows(x)
    n = x.shape[0]
    ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
    k = max(1, n // cluster_size)
    rng = np.random.default_rng(rng_seed)

    centroids = _seed_centroids(x, k, rng)
    assign = _balanced_assign(x @ centroids.T, cluster_size)
    centroids = _update_centroids(x, assign, centroids)
    trace = [_objective(x, assign, centroids)]

    iterations = 1
    while iterations < max_iters:
        sims = x @ centroids.T
        candidate = _balanced_assign(sims, cluster_size)
        if np.array_equal(candidate, assign):
            break
        # 贪心分配不保证最优，只接受不降低目标值的分配
        if _assigned_sum(sims, candidate) < _assigned_sum(sims, assign):
            break
        assign = candidate
        centroids = _update_centroids(x, assign, centroids)
        trace.append(_objective(x, assign, centroids))
        iterations += 1

    members = [ids[assign == c] for c in range(k)]
    return ClassClusters(
        label=label,
        members=members,
        centroids=centroids,
        objective_trace=trace,
        iterations=iterations,
    )


def cluster_all(
    features: np.ndarray,
    labels: np.ndarray,
    cluster_size: int,
    max_iters: int = 50,
    rng_seed: int = 0,
    sample_losses: Optional[np.ndarray] = None,
) -> ClusterIndex:
    """
    对所有类别聚类并构建全局簇索引

    参数:
        features: 全部样本特征，行号即样本ID
        labels: 样本类别
        cluster_size: 目标簇大小 l
        max_iters: k-means 最大迭代次数
        rng_seed: 随机种子，各类别按 (seed, label) 派生
        sample_losses: 上一阶段记录的样本损失（NaN 表示未打分），用于初始化簇损失

    返回:
        ClusterIndex
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise EmptyInputError("没有可聚类的样本")
    all_labels: List[int] = []
    all_members: List[np.ndarray] = []
    all_centroids: List[np.ndarray] = []
    for label in sorted(int(c) for c in np.unique(labels)):
        ids = np.flatnonzero(labels == label)
        result = cluster_class(
            features[ids],
            cluster_size,
            max_iters=max_iters,
            rng_seed=(int(rng_seed), label),
            ids=ids,
            label=label,
        )
        all_labels.extend([label] * result.num_clusters)
        all_members.extend(result.members)
        all_centroids.append(result.centroids)

    running = _running_loss_from_samples(all_members, sample_losses)
    index = ClusterIndex(
        cluster_size=cluster_size,
        labels=np.array(all_labels, dtype=np.int64),
        members=all_members,
        centroids=np.vstack(all_centroids),
        running_loss=running,
    )
    logger.info(f"聚类完成: {len(index.classes)}个类别, {index.num_clusters}个簇, l={cluster_size}")
    return index


def refresh_all(
    features: np.ndarray,
    labels: np.ndarray,
    previous: ClusterIndex,
    sample_losses: Optional[np.ndarray] = None,
    max_iters: int = 50,
    rng_seed: int = 0,
) -> ClusterIndex:
    """
    用最新特征重新聚类全部类别

    新簇的运行损失取其成员在上一阶段观测到的损失均值，从未打分的簇为 +inf
    """
    return cluster_all(
        features,
        labels,
        previous.cluster_size,
        max_iters=max_iters,
        rng_seed=rng_seed,
        sample_losses=sample_losses,
    )


def cluster_sizes_by_class(index: ClusterIndex) -> Dict[int, List[int]]:
    """按类别统计簇大小"""
    return {
        label: [int(index.members[cid].size) for cid in index.clusters_of_class(label)]
        for label in index.classes
    }


def _running_loss_from_samples(
    members: List[np.ndarray], sample_losses: Optional[np.ndarray]
) -> np.ndarray:
    running = np.full(len(members), math.inf)
    if sample_losses is None:
        return running
    for cid, ids in enumerate(members):
        observed = sample_losses[ids]
        observed = observed[~np.isnan(observed)]
        if observed.size:
            running[cid] = float(observed.mean())
    return running


def _seed_centroids(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """余弦距离上的 k-means++ 初始化"""
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    closest = np.clip(1.0 - x @ x[chosen[0]], 0.0, None)
    for _ in range(1, k):
        weights = closest ** 2
        weights[chosen] = 0.0
        total = float(weights.sum())
        if total <= 0.0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=weights / total))
        chosen.append(nxt)
        closest = np.minimum(closest, np.clip(1.0 - x @ x[nxt], 0.0, None))
    return x[chosen].copy()


def _balanced_assign(sims: np.ndarray, cluster_size: int) -> np.ndarray:
    """
    贪心均衡分配

    (样本, 质心) 对按相似度降序处理（并列时样本ID、质心ID小者优先），
    每个质心最多接收 l 个样本；剩余样本再按相似度分配，每簇额外上限 ⌈r/K⌉
    """
    n, k = sims.shape
    core = min(n, k * cluster_size)
    assign = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(k, dtype=np.int64)
    placed = 0
    for flat in np.argsort(-sims, axis=None, kind="stable"):
        i, c = divmod(int(flat), k)
        if assign[i] >= 0 or counts[c] >= cluster_size:
            continue
        assign[i] = c
        counts[c] += 1
        placed += 1
        if placed == core:
            break

    leftover = np.flatnonzero(assign < 0)
    if leftover.size:
        cap = math.ceil(leftover.size / k)
        extra = np.zeros(k, dtype=np.int64)
        for flat in np.argsort(-sims[leftover], axis=None, kind="stable"):
            j, c = divmod(int(flat), k)
            i = leftover[j]
            if assign[i] >= 0 or extra[c] >= cap:
                continue
            assign[i] = c
            extra[c] += 1
    return assign


def _update_centroids(x: np.ndarray, assign: np.ndarray, previous: np.ndarray) -> np.ndarray:
    sums = np.zeros_like(previous)
    np.add.at(sums, assign, x)
    norms = np.linalg.norm(sums, axis=1)
    out = previous.copy()
    ok = norms >= ZERO_NORM_EPS * np.maximum(np.bincount(assign, minlength=previous.shape[0]), 1)
    out[ok] = sums[ok] / norms[ok][:, None]
    return out


def _objective(x: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> float:
    return float(np.sum(np.einsum("ij,ij->i", x, centroids[assign])))


def _assigned_sum(sims: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum(sims[np.arange(sims.shape[0]), assign]))
