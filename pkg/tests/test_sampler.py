"""
批次采样测试：查询簇选择、近邻检索、子采样与代价权重
"""
import numpy as np
import pytest

from src.clustering import ClusterIndex
from src.errors import ConfigError, TooFewClustersError
from src.models import QuerySampling, SamplerConfig
from src.sampler import (
    BatchSampler,
    ClassCursor,
    LossCache,
    cost_weights,
    retrieve_nearest_clusters,
    select_query_cluster,
    subsample_and_weight,
    update_loss_cache,
)


def _make_index(cluster_labels, cluster_size, centroids=None, seed=0):
    """按簇类别与簇大小构造索引，样本ID连续分配"""
    cluster_labels = np.asarray(cluster_labels)
    k = cluster_labels.size
    if centroids is None:
        x = np.random.default_rng(seed).normal(size=(k, 4))
        centroids = x / np.linalg.norm(x, axis=1, keepdims=True)
    members = [np.arange(i * cluster_size, (i + 1) * cluster_size) for i in range(k)]
    return ClusterIndex(
        cluster_size=cluster_size,
        labels=cluster_labels,
        members=members,
        centroids=np.asarray(centroids, dtype=float),
        running_loss=np.full(k, np.inf),
    )


def _angles(degrees):
    rad = np.radians(degrees)
    return np.stack([np.cos(rad), np.sin(rad)], axis=1)


def test_select_query_cluster_highest_loss():
    """测试选择类内缓存损失最大的簇"""
    index = _make_index([0, 0, 1], 5)
    cache = LossCache(ema=np.array([1.2, 3.4, 0.5]))
    assert select_query_cluster(index, cache, ClassCursor([0])) == 1


def test_select_query_cluster_cold_start_lowest_id():
    """测试全部未打分时取最小ID"""
    index = _make_index([0, 0, 0], 5)
    cache = LossCache.from_index(index, 15)
    assert select_query_cluster(index, cache, ClassCursor([0])) == 0


def test_class_cursor_round_robin():
    """测试类别轮转"""
    cursor = ClassCursor([0, 1, 2])
    assert [cursor.advance() for _ in range(7)] == [0, 1, 2, 0, 1, 2, 0]


def test_retrieve_orders_by_similarity():
    """测试检索按相似度降序且排除查询簇"""
    index = _make_index([0, 1, 0, 1], 3, centroids=_angles([0, 10, 50, 30]))
    result = retrieve_nearest_clusters(index, 0, 3)
    assert list(result) == [1, 3, 2]


def test_retrieve_swaps_in_missing_kind():
    """测试近邻全为同类时替换进一个异类簇"""
    index = _make_index([0, 0, 0, 0, 1], 3, centroids=_angles([0, 5, 10, 15, 90]))
    result = retrieve_nearest_clusters(index, 0, 2)
    assert list(result) == [1, 4]
    # 单个近邻时不做替换
    assert list(retrieve_nearest_clusters(index, 0, 1)) == [1]


def test_retrieve_against_brute_force():
    """测试检索结果与暴力排序加混合规则一致"""
    rng = np.random.default_rng(1)
    for trial in range(30):
        k = int(rng.integers(5, 40))
        labels = np.sort(rng.integers(0, 3, size=k))
        index = _make_index(labels, 2, seed=trial)
        query = int(rng.integers(k))
        count = int(rng.integers(2, k))
        sims = index.centroids @ index.centroids[query]
        order = [c for c in sorted(range(k), key=lambda c: (-sims[c], c)) if c != query]
        top, rest = order[:count], order[count:]
        same = labels == labels[query]
        for want in (True, False):
            if not any(same[c] == want for c in top):
                extra = next((c for c in rest if same[c] == want), None)
                if extra is not None:
                    top = top[:-1] + [extra]
        expected = sorted(top, key=lambda c: (-sims[c], c))
        assert list(retrieve_nearest_clusters(index, query, count)) == expected


def test_retrieve_too_few_clusters():
    """测试全局簇数不足"""
    index = _make_index([0, 1], 3)
    with pytest.raises(TooFewClustersError):
        retrieve_nearest_clusters(index, 0, 2)


def test_cost_weights_inverse_frequency():
    """测试 160/80 批次的代价权重"""
    index = _make_index([0] * 8 + [1] * 4, 20)
    batch = subsample_and_weight(index, np.arange(12), n_sub=20, rng=0)
    assert batch.size == 240
    np.testing.assert_allclose(batch.weights[batch.labels == 0], 0.75)
    np.testing.assert_allclose(batch.weights[batch.labels == 1], 1.5)
    assert batch.weights.mean() == pytest.approx(1.0)
    np.testing.assert_allclose(cost_weights(np.array([3, 3, 3])), 1.0)


def test_subsample_caps_and_no_duplicates():
    """测试每簇采样数上限与无重复"""
    index = _make_index([0, 0, 1], 30)
    batch = subsample_and_weight(index, [2, 0, 1], n_sub=10, rng=np.random.default_rng(2))
    assert batch.size == 30
    assert np.unique(batch.sample_ids).size == 30
    assert batch.query_cluster == 2
    for pos, cid in enumerate(batch.cluster_ids):
        chosen = batch.sample_ids[batch.cluster_pos == pos]
        assert chosen.size == 10
        assert np.isin(chosen, index.members[cid]).all()

    small = subsample_and_weight(index, [0, 2], n_sub=100, rng=0, cost_sensitive=False)
    assert small.size == 60
    np.testing.assert_array_equal(small.weights, 1.0)
    with pytest.raises(ConfigError):
        subsample_and_weight(index, [0, 1], n_sub=0)


def test_update_loss_cache():
    """测试滑动平均更新：未打分直接替换，随后按 β 混合"""
    index = _make_index([0, 1, 1], 2)
    cache = LossCache.from_index(index, 6, decay=0.5)
    batch = subsample_and_weight(index, [0, 1], n_sub=2, rng=0)
    cache = update_loss_cache(cache, np.full(batch.size, 2.0), batch)
    assert cache.ema[0] == 2.0
    assert np.isinf(cache.ema[2]), "未涉及的簇应保持不变"
    cache = update_loss_cache(cache, np.full(batch.size, 4.0), batch)
    assert cache.ema[0] == pytest.approx(3.0)
    np.testing.assert_allclose(cache.sample_loss[batch.sample_ids], 4.0)


def test_reset_index_clears_sample_history():
    """测试切换簇索引后样本损失历史只保留新一轮的观测"""
    index = _make_index([0, 1, 1], 2)
    sampler = BatchSampler(index, 6, SamplerConfig(clusters_per_batch=3, n_sub=2), seed=0)
    batch = sampler.next_batch()
    sampler.observe(np.full(batch.size, 5.0), batch)
    assert not np.isnan(sampler.cache.sample_loss).all()
    sampler.reset_index(index)
    assert np.isnan(sampler.cache.sample_loss).all()
    np.testing.assert_array_equal(sampler.cache.ema, index.running_loss)


def test_batch_sampler_contract():
    """测试 l=200、M=12、n_sub=20 的批次规模"""
    index = _make_index([0] * 6 + [1] * 6, 200, seed=3)
    sampler = BatchSampler(index, 2400, SamplerConfig(clusters_per_batch=12, n_sub=20), seed=0)
    batch = sampler.next_batch()
    assert batch.num_clusters == 12
    assert batch.size == 240
    assert batch.weights.mean() == pytest.approx(1.0)


def test_batch_sampler_visits_each_class():
    """测试每连续 C 个批次中每个类别恰好作一次查询"""
    index = _make_index([0, 0, 1, 1, 2, 2], 10, seed=4)
    sampler = BatchSampler(index, 60, SamplerConfig(clusters_per_batch=3, n_sub=5), seed=1)
    for _ in range(3):
        queried = []
        for _ in range(3):
            batch = sampler.next_batch()
            queried.append(int(index.labels[batch.query_cluster]))
            sampler.observe(np.ones(batch.size), batch)
        assert sorted(queried) == [0, 1, 2]


def test_batch_sampler_caps_clusters_and_uniform_queries():
    """测试簇总数少于 M 时截断以及均匀查询模式"""
    index = _make_index([0, 1, 1], 4, seed=5)
    config = SamplerConfig(clusters_per_batch=12, n_sub=4, query_sampling=QuerySampling.UNIFORM)
    sampler = BatchSampler(index, 12, config, seed=2)
    assert sampler.clusters_per_batch == 3
    batch = sampler.next_batch()
    assert sorted(batch.cluster_ids.tolist()) == [0, 1, 2]
