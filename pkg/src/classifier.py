"""
CLMLE - 近邻簇分类模块

检索查询嵌入的 N 个最近簇，选择"最不相似簇仍比其他类别的簇相似程度高出最多"的类别。
簇检索使用 KD 树：单位向量上 ||a-b||² = 2 - 2aᵀb，欧氏近邻即内积近邻，检索是精确的。
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from sklearn.neighbors import KDTree, KNeighborsClassifier

from .clustering import ClusterIndex
from .errors import EmptyIndexError, EmptyRetrievalError, OutputIoError
from .hypersphere import cos_sim
from .metrics import balanced_accuracy

logger = logging.getLogger(__name__)

N_GRID = tuple(range(20, 201, 10))
TIE_RADIUS_EPS = 1e-9


@dataclass
class ClusterSearchIndex:
    """全部质心上的 KD 树索引"""
    centroids: np.ndarray
    labels: np.ndarray
    cluster_ids: np.ndarray
    n_retrieve: int
    tree: KDTree

    @property
    def num_clusters(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def distance_evaluations(self) -> int:
        """KD 树自上次重置以来的距离计算次数"""
        return int(self.tree.get_n_calls())

    def reset_counter(self) -> None:
        self.tree.reset_n_calls()

    def with_n_retrieve(self, n_retrieve: int) -> "ClusterSearchIndex":
        return ClusterSearchIndex(
            centroids=self.centroids,
            labels=self.labels,
            cluster_ids=self.cluster_ids,
            n_retrieve=max(1, min(int(n_retrieve), self.num_clusters)),
            tree=self.tree,
        )


def build_index(cluster_index: ClusterIndex, n_retrieve: int) -> ClusterSearchIndex:
    """
    在全部类别的质心上建立 KD 树

    参数:
        cluster_index: 全局簇索引
        n_retrieve: 检索簇数 N (≥1)，超过质心总数时截断

    返回:
        ClusterSearchIndex

    异常:
        EmptyIndexError: 没有质心
    """
    return build_index_from_centroids(cluster_index.centroids, cluster_index.labels, n_retrieve)


def build_index_from_centroids(centroids: np.ndarray, labels: np.ndarray, n_retrieve: int) -> ClusterSearchIndex:
    centroids = np.asarray(centroids, dtype=float)
    if centroids.ndim != 2 or centroids.shape[0] == 0:
        raise EmptyIndexError("没有可检索的质心")
    if n_retrieve < 1:
        raise EmptyIndexError(f"检索簇数必须≥1，实际为{n_retrieve}")
    total = centroids.shape[0]
    return ClusterSearchIndex(
        centroids=centroids,
        labels=np.asarray(labels),
        cluster_ids=np.arange(total),
        n_retrieve=min(int(n_retrieve), total),
        tree=KDTree(centroids),
    )


def _ranked(index: ClusterSearchIndex, query: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """返回前 k 个簇ID与相似度，按 (相似度降序, ID升序)"""
    q = np.asarray(query, dtype=float).reshape(1, -1)
    k = min(k, index.num_clusters)
    dist, _ = index.tree.query(q, k=k)
    # 取回与第 k 个距离并列的全部候选，再按精确内积排序
    candidates = index.tree.query_radius(q, r=float(dist[0, -1]) + TIE_RADIUS_EPS)[0]
    sims = index.centroids[candidates] @ q[0]
    order = np.lexsort((candidates, -sims))[:k]
    return candidates[order].astype(np.int64), sims[order]


def knn_clusters(index: ClusterSearchIndex, query) -> List[Tuple[int, int, float]]:
    """
    检索 N 个最近簇

    参数:
        index: 质心索引
        query: 单位向量

    返回:
        [(簇ID, 类别, 相似度)]，按相似度降序，并列时簇ID小者在前
    """
    ids, sims = _ranked(index, np.asarray(query), index.n_retrieve)
    return [(int(c), int(index.labels[c]), float(s)) for c, s in zip(ids, sims)]


def _decide(classes: np.ndarray, sims: np.ndarray) -> int:
    """对数域判别：score_c = min_{c} s - LSE_{≠c} s"""
    if classes.size == 0:
        raise EmptyRetrievalError("检索结果为空")
    unique = np.unique(classes)
    if unique.size == 1:
        return int(unique[0])
    best_label = None
    best_score = -np.inf
    for label in unique:  # 升序，严格大于保证并列取最小类别
        own = sims[classes == label].min()
        score = own - logsumexp(sims[classes != label])
        if score > best_score:
            best_label, best_score = int(label), score
    return best_label


def predict(index: ClusterSearchIndex, query) -> int:
    """
    对单个查询嵌入分类

    仅在检索到的 N 个簇内比较；未被检索到的类别不参与；只检索到一个类别时直接返回该类

    异常:
        EmptyRetrievalError: 检索结果为空
    """
    ids, sims = _ranked(index, np.asarray(query), index.n_retrieve)
    return _decide(index.labels[ids], sims)


def predict_batch(index: ClusterSearchIndex, queries: np.ndarray) -> np.ndarray:
    queries = np.asarray(queries, dtype=float)
    return np.array([predict(index, q) for q in queries], dtype=np.int64)


def predict_naive(index: ClusterSearchIndex, query, all_clusters: bool = False) -> int:
    """
    直接按指数比值实现的判别规则，用作对照

    参数:
        index: 质心索引
        query: 单位向量
        all_clusters: True 时最小值与分母都遍历全部簇（而非仅检索到的 N 个）
    """
    q = np.asarray(query, dtype=float)
    sims = index.centroids @ q
    if all_clusters:
        chosen = np.arange(index.num_clusters)
    else:
        order = np.lexsort((np.arange(index.num_clusters), -sims))
        chosen = order[:index.n_retrieve]
    classes = index.labels[chosen]
    values = sims[chosen]
    if classes.size == 0:
        raise EmptyRetrievalError("检索结果为空")
    unique = sorted(set(int(c) for c in classes))
    if len(unique) == 1:
        return unique[0]
    best_label, best_ratio = None, -np.inf
    for label in unique:
        ratio = np.exp(values[classes == label]).min() / np.exp(values[classes != label]).sum()
        if ratio > best_ratio:
            best_label, best_ratio = label, ratio
    return best_label


def tune_N(
    cluster_index: Union[ClusterIndex, ClusterSearchIndex],
    val_embeddings: np.ndarray,
    val_labels: np.ndarray,
    grid: Optional[Sequence[int]] = None,
) -> Tuple[int, Dict[int, float]]:
    """
    在验证集上网格搜索检索簇数 N

    网格默认为 {20, 30, ..., 200} ∩ [1, 质心总数]，为空时退化为 {质心总数}；并列取最小 N

    返回:
        (最优N, {N: 验证集均衡准确率})
    """
    search = cluster_index if isinstance(cluster_index, ClusterSearchIndex) else build_index(cluster_index, 1)
    total = search.num_clusters
    candidates = sorted(n for n in (grid or N_GRID) if 1 <= n <= total) or [total]
    k_max = max(candidates)
    val_embeddings = np.asarray(val_embeddings, dtype=float)
    ranked = [_ranked(search, q, k_max) for q in val_embeddings]
    classes = sorted(int(c) for c in np.unique(val_labels))

    scores: Dict[int, float] = {}
    for n in candidates:
        preds = np.array([_decide(search.labels[ids[:n]], sims[:n]) for ids, sims in ranked])
        scores[n] = balanced_accuracy(preds, val_labels, classes=classes)
    best = max(candidates, key=lambda n: (scores[n], -n))
    logger.info(f"检索簇数搜索完成: N={best}, 均衡准确率={scores[best]:.4f}")
    return best, scores


def pairwise_verify(a, b, threshold: float) -> bool:
    """内积相似度 ≥ 阈值 判为同一身份"""
    return cos_sim(a, b) >= threshold


def predict_instance_knn(
    train_embeddings: np.ndarray, train_labels: np.ndarray, queries: np.ndarray, k: int = 10
) -> np.ndarray:
    """实例级 kNN 多数投票（对照分类器），单位向量上欧氏近邻等价于内积近邻"""
    k = max(1, min(int(k), len(train_labels)))
    model = KNeighborsClassifier(n_neighbors=k, algorithm="kd_tree")
    model.fit(np.asarray(train_embeddings), np.asarray(train_labels))
    return model.predict(np.asarray(queries)).astype(np.int64)


def export_predictions_csv(
    path: Union[str, Path],
    index: ClusterSearchIndex,
    ids: np.ndarray,
    queries: np.ndarray,
) -> pd.DataFrame:
    """
    导出预测结果：样本ID、预测类别、前 N 个簇ID与相似度（分号分隔）
    """
    rows = []
    for sample_id, q in zip(ids, np.asarray(queries, dtype=float)):
        top, sims = _ranked(index, q, index.n_retrieve)
        rows.append({
            "id": int(sample_id),
            "predicted": _decide(index.labels[top], sims),
            "cluster_ids": ";".join(str(int(c)) for c in top),
            "similarities": ";".join(repr(float(s)) for s in sims),
        })
    frame = pd.DataFrame(rows, columns=["id", "predicted", "cluster_ids", "similarities"])
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OutputIoError(f"写入预测文件失败: {path}: {e}") from e
    return frame
