"""
CLMLE - 超球面几何模块

单位向量归一化、内积相似度以及角度间隔上界。其余模块都依赖这里的约定：
嵌入位于单位超球面上，相似度一律使用内积。
"""
import math
from typing import Iterable, List, Tuple, Union

import numpy as np

from .errors import DimensionMismatchError, InvalidCountsError, ZeroVectorError
from .models import MarginBounds, UnitVector

ZERO_NORM_EPS = 1e-12

ArrayLike = Union[UnitVector, np.ndarray, Iterable[float]]


def normalize(v: ArrayLike) -> UnitVector:
    """
    将向量投影到单位超球面

    参数:
        v: 维度≥2的实向量

    返回:
        UnitVector: v / ||v||

    异常:
        ZeroVectorError: ||v|| < 1e-12
    """
    arr = np.asarray(v, dtype=float).ravel()
    if arr.size < 2:
        raise DimensionMismatchError(f"向量维度必须≥2，实际为{arr.size}")
    norm = float(np.linalg.norm(arr))
    if norm < ZERO_NORM_EPS:
        raise ZeroVectorError(f"向量范数{norm:.3e}过小，无法归一化")
    return UnitVector(arr / norm)


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """按行归一化，任何一行范数过小都视为退化输出"""
    x = np.asarray(matrix, dtype=float)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = int(np.argmin(norms))
        raise ZeroVectorError(f"第{bad}行范数{norms[bad]:.3e}过小，无法归一化")
    return x / norms[:, None]


def cos_sim(u: ArrayLike, v: ArrayLike) -> float:
    """
    单位向量内积相似度，截断到 [-1, 1]

    参数:
        u, v: 同维单位向量

    返回:
        float: uᵀv
    """
    a = np.asarray(u, dtype=float).ravel()
    b = np.asarray(v, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionMismatchError(f"向量维度不一致: {a.size} vs {b.size}")
    return float(np.clip(np.dot(a, b), -1.0, 1.0))


def margin_upper_bounds(num_classes: int, class_size: int, total_size: int) -> MarginBounds:
    """
    计算类间/类内角度间隔上界（二维极端情形推导）

    a1_max = cos(0) - cos(2π/C)，a2_max = cos(0) - cos(2π·L_c/L)

    参数:
        num_classes: 类别数 C (≥2)
        class_size: 当前类样本数 L_c
        total_size: 总样本数 L

    返回:
        MarginBounds: 用于间隔网格搜索的上界
    """
    if num_classes < 2:
        raise InvalidCountsError(f"类别数必须≥2，实际为{num_classes}")
    if not (1 <= class_size <= total_size):
        raise InvalidCountsError(f"需满足1≤L_c≤L，实际L_c={class_size}, L={total_size}")
    a1_max = math.cos(0.0) - math.cos(2.0 * math.pi / num_classes)
    a2_max = math.cos(0.0) - math.cos(2.0 * math.pi * class_size / total_size)
    return MarginBounds(a1_max=a1_max, a2_max=a2_max)


def margin_grid(
    bounds: MarginBounds, fractions: Tuple[float, ...] = (0.1, 0.25, 0.5)
) -> List[Tuple[float, float]]:
    """
    生成 (a1, a2) 网格候选，只保留 a2 ≤ a1 的组合

    参数:
        bounds: 间隔上界
        fractions: 相对上界的比例

    返回:
        候选列表，按 (a1, a2) 升序
    """
    candidates = set()
    for f1 in fractions:
        for f2 in fractions:
            a1 = f1 * bounds.a1_max
            a2 = f2 * bounds.a2_max
            if a2 <= a1:
                candidates.add((a1, a2))
    return sorted(candidates)
