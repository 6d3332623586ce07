"""
超球面几何测试
"""
import math

import numpy as np
import pytest

from src.errors import DimensionMismatchError, InvalidCountsError, ZeroVectorError
from src.hypersphere import cos_sim, margin_grid, margin_upper_bounds, normalize, normalize_rows
from src.models import UnitVector


def test_normalize_unit_length():
    """测试归一化结果为单位向量"""
    u = normalize([3.0, 4.0])
    np.testing.assert_allclose(u.components, [0.6, 0.8])
    assert isinstance(u, UnitVector)
    assert u.dim == 2


def test_normalize_rejects_zero_vector():
    """测试零向量无法归一化"""
    with pytest.raises(ZeroVectorError):
        normalize([0.0, 0.0, 0.0])
    with pytest.raises(ZeroVectorError):
        normalize([1e-13, 0.0])


def test_normalize_rejects_one_dimension():
    """测试维度小于2报错"""
    with pytest.raises(DimensionMismatchError):
        normalize([1.0])


def test_unit_vector_is_read_only():
    """测试单位向量不可修改"""
    u = normalize([1.0, 1.0])
    with pytest.raises(ValueError):
        u.components[0] = 2.0


def test_normalize_rows_flags_degenerate_row():
    """测试按行归一化遇到零行报错"""
    out = normalize_rows(np.array([[2.0, 0.0], [0.0, -5.0]]))
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ZeroVectorError):
        normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_cos_sim_basic():
    """测试内积相似度"""
    a = normalize([1.0, 0.0])
    b = normalize([0.0, 1.0])
    assert cos_sim(a, a) == pytest.approx(1.0)
    assert cos_sim(a, b) == pytest.approx(0.0)
    assert cos_sim(a, normalize([-1.0, 0.0])) == pytest.approx(-1.0)
    assert cos_sim([1.0 + 1e-15, 0.0], [1.0, 0.0]) <= 1.0


def test_cos_sim_dimension_mismatch():
    """测试维度不一致报错"""
    with pytest.raises(DimensionMismatchError):
        cos_sim([1.0, 0.0], [1.0, 0.0, 0.0])


def test_margin_upper_bounds_table():
    """测试间隔上界公式"""
    table = [
        (2, 50, 100),
        (4, 10, 40),
        (10, 7, 1000),
        (100, 1, 450000),
    ]
    for c, lc, total in table:
        bounds = margin_upper_bounds(c, lc, total)
        assert bounds.a1_max == math.cos(0.0) - math.cos(2.0 * math.pi / c)
        assert bounds.a2_max == math.cos(0.0) - math.cos(2.0 * math.pi * lc / total)
    assert margin_upper_bounds(2, 50, 100).a1_max == pytest.approx(2.0)
    assert margin_upper_bounds(4, 10, 40).a2_max == pytest.approx(1.0)


def test_margin_upper_bounds_invalid():
    """测试非法计数"""
    with pytest.raises(InvalidCountsError):
        margin_upper_bounds(1, 1, 10)
    with pytest.raises(InvalidCountsError):
        margin_upper_bounds(3, 0, 10)
    with pytest.raises(InvalidCountsError):
        margin_upper_bounds(3, 11, 10)


def test_margin_grid_keeps_order():
    """测试间隔网格只保留 a2 ≤ a1 且有序"""
    bounds = margin_upper_bounds(10, 20, 1000)
    grid = margin_grid(bounds)
    assert grid == sorted(grid)
    assert grid, "网格不应为空"
    for a1, a2 in grid:
        assert a2 <= a1
        assert 0 < a1 <= bounds.a1_max


def test_normalize_idempotent():
    """测试归一化幂等"""
    rng = np.random.default_rng(7)
    for _ in range(50):
        u = normalize(rng.normal(size=6) * rng.uniform(0.01, 100.0))
        again = normalize(u)
        np.testing.assert_allclose(again.components, u.components, rtol=0, atol=1e-12)


def test_cos_sim_matches_squared_distance():
    """测试单位向量上 cos_sim = 1 - ||u-v||²/2"""
    rng = np.random.default_rng(8)
    for _ in range(50):
        u = normalize(rng.normal(size=5))
        v = normalize(rng.normal(size=5))
        d2 = float(np.sum((u.components - v.components) ** 2))
        assert cos_sim(u, v) == pytest.approx(1.0 - d2 / 2.0, abs=1e-9)
