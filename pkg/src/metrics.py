"""
CLMLE - 评估指标模块

均衡准确率（各类召回率均值）、ROC 与 TAR@FAR、rank-1 识别率、二分类不平衡程度，
以及汇总成 EvalReport 的 evaluate。
"""
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import confusion_matrix, roc_curve

from .errors import DegeneratePairsError, EmptyClassError, EmptyInputError, NotBinaryError
from .models import EvalReport, RocResult


def per_class_accuracy(
    predictions: np.ndarray, labels: np.ndarray, classes: Optional[Sequence[int]] = None
) -> Dict[int, float]:
    """每个类别的召回率"""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise EmptyInputError(f"预测数量{predictions.shape}与标签数量{labels.shape}不一致")
    if classes is None:
        classes = sorted(int(c) for c in np.unique(labels))
    if len(classes) == 0:
        raise EmptyClassError("没有任何类别")
    result = {}
    for c in classes:
        mask = labels == c
        if not mask.any():
            raise EmptyClassError(f"类别{c}没有样本")
        result[int(c)] = float(np.mean(predictions[mask] == c))
    return result


def balanced_accuracy(
    predictions: np.ndarray, labels: np.ndarray, classes: Optional[Sequence[int]] = None
) -> float:
    """
    均衡准确率：各类召回率的均值；二分类时即 0.5(tp/Np + tn/Nn)

    参数:
        predictions: 预测类别
        labels: 真实类别
        classes: 参与平均的类别，默认取 labels 中出现的类别

    异常:
        EmptyClassError: 指定类别没有样本
    """
    recalls = per_class_accuracy(predictions, labels, classes)
    return float(np.mean(list(recalls.values())))


def roc_tar_far(scores: np.ndarray, is_same: np.ndarray, far_targets: Sequence[float] = ()) -> RocResult:
    """
    阈值扫描得到完整 ROC，并给出每个目标 FAR 下的 TAR

    TAR@FAR 取经验 FAR ≤ 目标的所有阈值中 TAR 最高的工作点

    参数:
        scores: 样本对相似度
        is_same: 样本对是否同类
        far_targets: 目标误识率列表

    异常:
        DegeneratePairsError: 缺少正对或负对
    """
    scores = np.asarray(scores, dtype=float)
    is_same = np.asarray(is_same, dtype=bool)
    if not is_same.any() or is_same.all():
        raise DegeneratePairsError("样本对中必须同时包含正对与负对")
    far, tar, thresholds = roc_curve(is_same, scores, drop_intermediate=False)
    tar_at_far = {float(t): _tar_at(far, tar, t) for t in far_targets}
    return RocResult(
        far=far.tolist(),
        tar=tar.tolist(),
        thresholds=thresholds.tolist(),
        tar_at_far=tar_at_far,
    )


def _tar_at(far: np.ndarray, tar: np.ndarray, target: float) -> float:
    ok = far <= target + 1e-15
    return float(tar[ok].max()) if ok.any() else 0.0


def threshold_at_far(scores: np.ndarray, is_same: np.ndarray, far_target: float) -> float:
    """
    返回达到 TAR@FAR 工作点的相似度阈值（same 当且仅当 score ≥ 阈值）

    FAR 为 0 且没有有限阈值满足时返回 +inf
    """
    scores = np.asarray(scores, dtype=float)
    is_same = np.asarray(is_same, dtype=bool)
    if not is_same.any() or is_same.all():
        raise DegeneratePairsError("样本对中必须同时包含正对与负对")
    far, tar, thresholds = roc_curve(is_same, scores, drop_intermediate=False)
    ok = np.flatnonzero(far <= far_target + 1e-15)
    best = ok[np.argmax(tar[ok])]
    return float(thresholds[best])


def rank1_identification(
    probes: np.ndarray, probe_labels: np.ndarray, gallery: np.ndarray, gallery_labels: np.ndarray
) -> float:
    """
    rank-1 识别率：最相似图库样本与探针同类的比例，并列取图库中靠前者
    """
    probes = np.asarray(probes, dtype=float)
    gallery = np.asarray(gallery, dtype=float)
    if probes.shape[0] == 0 or gallery.shape[0] == 0:
        raise EmptyInputError("探针集与图库不能为空")
    nearest = np.argmax(probes @ gallery.T, axis=1)
    return float(np.mean(np.asarray(gallery_labels)[nearest] == np.asarray(probe_labels)))


def imbalance_level(labels: np.ndarray) -> float:
    """
    二分类任务的不平衡程度 |100·Np/(Np+Nn) - 50|，正类为 1

    异常:
        NotBinaryError: 标签不全是 0/1
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise NotBinaryError("标签为空")
    values = set(np.unique(labels).tolist())
    if not values <= {0, 1}:
        raise NotBinaryError(f"标签取值{sorted(values)}不是二分类")
    positive = float(np.sum(labels == 1))
    return abs(100.0 * positive / labels.size - 50.0)


def pair_scores(embeddings: np.ndarray, labels: np.ndarray, max_pairs: Optional[int] = None,
                seed: int = 0):
    """
    生成全部 (i<j) 样本对的相似度与同类标记；超过 max_pairs 时随机抽取
    """
    embeddings = np.asarray(embeddings, dtype=float)
    labels = np.asarray(labels)
    i, j = np.triu_indices(labels.size, k=1)
    if max_pairs is not None and i.size > max_pairs:
        pick = np.sort(np.random.default_rng(seed).choice(i.size, size=max_pairs, replace=False))
        i, j = i[pick], j[pick]
    scores = np.einsum("ij,ij->i", embeddings[i], embeddings[j])
    return scores, labels[i] == labels[j]


def verification_report(
    embeddings: np.ndarray,
    labels: np.ndarray,
    far_targets: Sequence[float] = (1e-3, 1e-2, 1e-1),
    max_pairs: Optional[int] = 200000,
    seed: int = 0,
) -> RocResult:
    """在带标签的嵌入集合上构造样本对并计算 ROC 与 TAR@FAR"""
    scores, same = pair_scores(embeddings, labels, max_pairs=max_pairs, seed=seed)
    return roc_tar_far(scores, same, far_targets)


def evaluate(
    predictions: np.ndarray,
    labels: np.ndarray,
    roc: Optional[RocResult] = None,
    n_retrieve: Optional[int] = None,
) -> EvalReport:
    """
    汇总评估报告

    混淆矩阵按真实与预测类别的并集排列，行和等于各类样本数；
    imbalance_levels 为每个类别一对其余任务的不平衡程度
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    classes = sorted(int(c) for c in np.unique(labels))
    recalls = per_class_accuracy(predictions, labels, classes)
    matrix_labels = sorted(set(classes) | set(int(p) for p in np.unique(predictions)))
    matrix = confusion_matrix(labels, predictions, labels=matrix_labels)
    warnings: List[str] = []
    extra = sorted(set(matrix_labels) - set(classes))
    if extra:
        warnings.append(f"预测中出现了评估集不存在的类别: {extra}")
    return EvalReport(
        classes=classes,
        per_class_accuracy=recalls,
        balanced_accuracy=float(np.mean(list(recalls.values()))),
        overall_accuracy=float(np.mean(predictions == labels)),
        confusion_matrix=matrix.tolist(),
        class_counts={c: int(np.sum(labels == c)) for c in classes},
        matrix_labels=matrix_labels,
        roc=roc,
        imbalance_levels={
            str(c): imbalance_level((labels == c).astype(int)) for c in classes
        },
        n_retrieve=n_retrieve,
        warnings=warnings,
    )
