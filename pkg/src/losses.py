"""
CLMLE - 损失函数模块

实现簇间角度间隔损失及三种对照损失（三元组、五元组三头铰链、softmax交叉熵），
每个损失都返回数值与对批内嵌入的解析梯度。所有 log-sum-exp 均做数值稳定处理。
"""
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .errors import (
    DegenerateCentroidError,
    EmptyQuintupletSetError,
    EmptyTripletSetError,
    InsufficientStructureError,
    LabelOutOfRangeError,
    NonPositiveWeightError,
    RoleViolationError,
    SingleClusterBatchError,
)
from .hypersphere import ZERO_NORM_EPS
from .models import ClmleConfig, LossOutput, Quintuplet


def _resolve_weights(weights: Optional[np.ndarray], count: int) -> np.ndarray:
    if weights is None:
        return np.ones(count)
    w = np.asarray(weights, dtype=float)
    if w.shape != (count,):
        raise NonPositiveWeightError(f"权重数量{w.shape}与样本数{count}不一致")
    if np.any(w <= 0):
        raise NonPositiveWeightError("代价权重必须全部为正")
    return w


def triplet_loss(
    embeddings: np.ndarray,
    triplets: Union[np.ndarray, Sequence[Sequence[int]]],
    margin: float,
    weights: Optional[np.ndarray] = None,
) -> LossOutput:
    """
    三元组损失 mean_t w_t·[D(a,p) - D(a,n) + g]_+，D 为平方欧氏距离

    参数:
        embeddings: 批内嵌入 (n, d)
        triplets: (锚点, 正例, 负例) 行索引
        margin: 间隔 g > 0
        weights: 每个三元组的代价权重（可选）

    返回:
        LossOutput: per_sample 为锚点分摊的损失
    """
    e = np.asarray(embeddings, dtype=float)
    t = np.asarray(triplets, dtype=np.int64).reshape(-1, 3)
    if t.shape[0] == 0:
        raise EmptyTripletSetError("三元组集合为空")
    w = _resolve_weights(weights, t.shape[0])
    a, p, n = e[t[:, 0]], e[t[:, 1]], e[t[:, 2]]
    d_ap = np.sum((a - p) ** 2, axis=1)
    d_an = np.sum((a - n) ** 2, axis=1)
    hinge = d_ap - d_an + margin
    active = hinge > 0
    losses = w * np.where(active, hinge, 0.0)
    count = t.shape[0]

    scale = (w * active / count)[:, None]
    grads = np.zeros_like(e)
    np.add.at(grads, t[:, 0], scale * 2.0 * (n - p))
    np.add.at(grads, t[:, 1], scale * -2.0 * (a - p))
    np.add.at(grads, t[:, 2], scale * 2.0 * (a - n))

    return LossOutput(
        value=float(losses.sum() / count),
        grads=grads,
        per_sample=_spread_to_rows(e.shape[0], t[:, 0], losses),
    )


def lmle_loss(
    embeddings: np.ndarray,
    quintuplets: Union[Sequence[Quintuplet], np.ndarray],
    margins: Sequence[float],
    weights: Optional[np.ndarray] = None,
    labels: Optional[np.ndarray] = None,
    cluster_of: Optional[np.ndarray] = None,
) -> LossOutput:
    """
    五元组三头铰链损失 mean_i (ε_i + τ_i + σ_i)

    ε = [g1 + D(a,p+) - D(a,p-)]_+，τ = [g2 + D(a,p-) - D(a,p--)]_+，
    σ = [g3 + D(a,p--) - D(a,n)]_+

    参数:
        embeddings: 批内嵌入 (n, d)
        quintuplets: 五元组列表或 (Q, 5) 索引数组
        margins: (g1, g2, g3)，均 > 0
        weights: 每个五元组的代价权重（可选）
        labels, cluster_of: 提供时校验五元组角色约束

    返回:
        LossOutput
    """
    e = np.asarray(embeddings, dtype=float)
    q = _quintuplet_array(quintuplets)
    if q.shape[0] == 0:
        raise EmptyQuintupletSetError("五元组集合为空")
    if labels is not None and cluster_of is not None:
        _check_roles(q, np.asarray(labels), np.asarray(cluster_of))
    w = _resolve_weights(weights, q.shape[0])
    g1, g2, g3 = (float(g) for g in margins)

    a = e[q[:, 0]]
    others = [e[q[:, j]] for j in range(1, 5)]
    dists = [np.sum((a - o) ** 2, axis=1) for o in others]  # p+, p-, p--, n
    hinges = [
        g1 + dists[0] - dists[1],
        g2 + dists[1] - dists[2],
        g3 + dists[2] - dists[3],
    ]
    count = q.shape[0]
    grads = np.zeros_like(e)
    total = np.zeros(count)
    for h, (near, far) in zip(hinges, ((0, 1), (1, 2), (2, 3))):
        active = h > 0
        total += np.where(active, h, 0.0)
        scale = (w * active / count)[:, None]
        # d/da [D(a,x) - D(a,y)] = 2(y - x)
        np.add.at(grads, q[:, 0], scale * 2.0 * (others[far] - others[near]))
        np.add.at(grads, q[:, near + 1], scale * -2.0 * (a - others[near]))
        np.add.at(grads, q[:, far + 1], scale * 2.0 * (a - others[far]))
    losses = w * total
    return LossOutput(
        value=float(losses.sum() / count),
        grads=grads,
        per_sample=_spread_to_rows(e.shape[0], q[:, 0], losses),
    )


def sample_quintuplets(
    embeddings: np.ndarray,
    labels: np.ndarray,
    cluster_of: np.ndarray,
    anchors: Sequence[int],
    ids: Optional[np.ndarray] = None,
    skip_invalid: bool = False,
) -> List[Quintuplet]:
    """
    按当前嵌入距离为每个锚点选择五元组角色

    p+ 为同簇最远成员，p- 为异簇同类最近成员，p-- 为异簇同类最远成员，
    n 为异类最近成员；距离并列时样本ID小者优先。

    参数:
        embeddings: 嵌入 (n, d)
        labels: 每行类别
        cluster_of: 每行所属簇
        anchors: 锚点行号
        ids: 用于并列裁决的样本ID，默认即行号
        skip_invalid: True 时跳过无法填充角色的锚点，否则抛出 InsufficientStructureError

    返回:
        五元组列表（行号）
    """
    e = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    cluster_of = np.asarray(cluster_of)
    ids = np.arange(e.shape[0]) if ids is None else np.asarray(ids)
    out: List[Quintuplet] = []
    for anchor in anchors:
        anchor = int(anchor)
        try:
            out.append(_select_roles(e, labels, cluster_of, ids, anchor))
        except InsufficientStructureError:
            if not skip_invalid:
                raise
    return out


def hinged_log_ratio(own_similarity: float, competitor_similarities: np.ndarray, margin: float) -> float:
    """
    单项 [-log(e^{s_own - a} / Σ_k e^{s_k})]_+，竞争集合为空时为 0
    """
    comp = np.asarray(competitor_similarities, dtype=float)
    if comp.size == 0:
        return 0.0
    return max(float(logsumexp(comp) - own_similarity + margin), 0.0)


def clmle_loss(
    embeddings: np.ndarray,
    cluster_of: np.ndarray,
    cluster_labels: np.ndarray,
    config: ClmleConfig,
) -> LossOutput:
    """
    簇间角度间隔损失

    J = 1/(M·l̂) Σ_m Σ_{i∈I_m} w_i·( [LSE_{k:c(k)≠c(m)} s_ik - s_im + a1]_+
                                     + [LSE_{k≠m, c(k)=c(m)} s_ik - s_im + a2]_+ )
    其中 s_ik = f(x_i)ᵀμ̂_k，μ̂ 为批内采样成员的归一化均值。梯度同时经过 f(x_i)
    和每个 μ̂_k 回传到成员嵌入。

    参数:
        embeddings: 批内嵌入 (n, d)
        cluster_of: 每行所属批内簇序号 0..M-1
        cluster_labels: 每个批内簇的类别 (M,)
        config: 间隔 a1/a2、代价权重、是否区分类内/类间

    返回:
        LossOutput: per_sample 为加权后的逐样本损失
    """
    e = np.asarray(embeddings, dtype=float)
    cluster_of = np.asarray(cluster_of, dtype=np.int64)
    cluster_labels = np.asarray(cluster_labels)
    m_count = cluster_labels.shape[0]
    if m_count < 2:
        raise SingleClusterBatchError(f"批次簇数量为{m_count}，至少需要2个")
    n = e.shape[0]
    w = _resolve_weights(config.cost_weights, n)

    counts = np.bincount(cluster_of, minlength=m_count)
    if np.any(counts == 0):
        raise SingleClusterBatchError("批次中存在空簇")
    sums = np.zeros((m_count, e.shape[1]))
    np.add.at(sums, cluster_of, e)
    norms = np.linalg.norm(sums, axis=1)
    if np.any(norms / counts < ZERO_NORM_EPS):
        raise DegenerateCentroidError("批内簇均值退化")
    mu = sums / norms[:, None]

    sims = e @ mu.T  # (n, M)
    own = sims[np.arange(n), cluster_of]
    d_sims = np.zeros_like(sims)
    per_sample = np.zeros(n)
    scale = w / n

    same_class = cluster_labels[None, :] == cluster_labels[:, None]  # (M, M)
    not_self = ~np.eye(m_count, dtype=bool)
    if config.class_aware:
        term_masks = [(~same_class, config.a1), (same_class & not_self, config.a2)]
    else:
        term_masks = [(not_self, config.a1)]

    for mask, margin in term_masks:
        comp_mask = mask[cluster_of]  # (n, M)
        has_comp = comp_mask.any(axis=1)
        if not has_comp.any():
            continue
        masked = np.where(comp_mask, sims, -np.inf)
        lse = np.full(n, -np.inf)
        lse[has_comp] = logsumexp(masked[has_comp], axis=1)
        z = lse - own + margin
        active = has_comp & (z > 0)
        per_sample += np.where(active, z, 0.0)
        if not active.any():
            continue
        rows = np.flatnonzero(active)
        soft = np.exp(masked[rows] - lse[rows, None])
        d_sims[rows] += scale[rows, None] * soft
        d_sims[rows, cluster_of[rows]] -= scale[rows]

    grads = d_sims @ mu
    d_mu = d_sims.T @ e  # (M, d)
    # μ = s/||s||：ds = (I - μμᵀ) dμ / ||s||
    radial = np.sum(d_mu * mu, axis=1, keepdims=True)
    d_sums = (d_mu - radial * mu) / norms[:, None]
    grads += d_sums[cluster_of]

    weighted = w * per_sample
    return LossOutput(value=float(weighted.sum() / n), grads=grads, per_sample=weighted)


def softmax_ce_loss(
    embeddings: np.ndarray,
    labels: np.ndarray,
    class_weights: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> LossOutput:
    """
    softmax 交叉熵，类别得分为 Wᵀf(x)

    参数:
        embeddings: (n, d)
        labels: 类别 0..C-1
        class_weights: 分类权重矩阵 W (d, C)
        weights: 样本代价权重（可选）

    返回:
        LossOutput: param_grads["W"] 为对 W 的梯度
    """
    e = np.asarray(embeddings, dtype=float)
    W = np.asarray(class_weights, dtype=float)
    y = np.asarray(labels, dtype=np.int64)
    num_classes = W.shape[1]
    if np.any(y < 0) or np.any(y >= num_classes):
        raise LabelOutOfRangeError(f"类别标签超出范围[0, {num_classes})")
    n = e.shape[0]
    w = _resolve_weights(weights, n)
    scores = e @ W
    lse = logsumexp(scores, axis=1)
    losses = lse - scores[np.arange(n), y]
    probs = np.exp(scores - lse[:, None])
    probs[np.arange(n), y] -= 1.0
    d_scores = probs * (w / n)[:, None]
    weighted = w * losses
    return LossOutput(
        value=float(weighted.sum() / n),
        grads=d_scores @ W.T,
        per_sample=weighted,
        param_grads={"W": e.T @ d_scores},
    )


def _spread_to_rows(num_rows: int, rows: np.ndarray, losses: np.ndarray) -> np.ndarray:
    """把按锚点计算的损失平均分摊到行"""
    total = np.zeros(num_rows)
    hits = np.zeros(num_rows)
    np.add.at(total, rows, losses)
    np.add.at(hits, rows, 1.0)
    return np.divide(total, hits, out=np.zeros(num_rows), where=hits > 0)


def _quintuplet_array(quintuplets) -> np.ndarray:
    if isinstance(quintuplets, np.ndarray):
        return quintuplets.astype(np.int64).reshape(-1, 5)
    return np.array([q.as_tuple() for q in quintuplets], dtype=np.int64).reshape(-1, 5)


def _check_roles(q: np.ndarray, labels: np.ndarray, cluster_of: np.ndarray) -> None:
    for row in q:
        a, pp, pm, pmm, n = row
        if not (labels[a] == labels[pp] == labels[pm] == labels[pmm]) or labels[n] == labels[a]:
            raise RoleViolationError(f"五元组{tuple(row)}的类别角色不合法")
        if cluster_of[pp] != cluster_of[a]:
            raise RoleViolationError(f"五元组{tuple(row)}中p+不在锚点簇内")
        if cluster_of[pm] == cluster_of[a] or cluster_of[pmm] == cluster_of[a]:
            raise RoleViolationError(f"五元组{tuple(row)}中p-/p--必须来自锚点以外的簇")


def _pick(candidates: np.ndarray, dist: np.ndarray, ids: np.ndarray, farthest: bool) -> int:
    key = -dist if farthest else dist
    order = np.lexsort((ids[candidates], key))
    return int(candidates[order[0]])


def _select_roles(
    e: np.ndarray, labels: np.ndarray, cluster_of: np.ndarray, ids: np.ndarray, anchor: int
) -> Quintuplet:
    dist = np.sum((e - e[anchor]) ** 2, axis=1)
    rows = np.arange(e.shape[0])
    same_class = labels == labels[anchor]
    same_cluster = same_class & (cluster_of == cluster_of[anchor]) & (rows != anchor)
    other_cluster = same_class & (cluster_of != cluster_of[anchor])
    other_class = ~same_class

    if not same_cluster.any():
        raise InsufficientStructureError(f"锚点{anchor}所在簇没有其他成员")
    if not other_cluster.any():
        raise InsufficientStructureError(f"锚点{anchor}所在类别只有一个簇")
    if not other_class.any():
        raise InsufficientStructureError(f"锚点{anchor}没有异类样本")

    cands = np.flatnonzero(same_cluster)
    p_plus = _pick(cands, dist[cands], ids, farthest=True)
    cands = np.flatnonzero(other_cluster)
    p_minus = _pick(cands, dist[cands], ids, farthest=False)
    p_minus_minus = _pick(cands, dist[cands], ids, farthest=True)
    cands = np.flatnonzero(other_class)
    negative = _pick(cands, dist[cands], ids, farthest=False)
    return Quintuplet(anchor, p_plus, p_minus, p_minus_minus, negative)
