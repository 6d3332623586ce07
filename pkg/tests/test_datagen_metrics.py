"""
合成数据与评估指标测试
"""
import numpy as np
import pytest

from src.classifier import pairwise_verify
from src.datagen import class_sizes, gen_power_law, load_dataset, save_dataset
from src.errors import (
    DegeneratePairsError,
    EmptyClassError,
    NotBinaryError,
    OutputIoError,
    SpecError,
)
from src.hypersphere import cos_sim
from src.metrics import (
    balanced_accuracy,
    evaluate,
    imbalance_level,
    pair_scores,
    rank1_identification,
    roc_tar_far,
    threshold_at_far,
)
from src.models import Split, SyntheticSpec


def _small_spec(**overrides):
    params = dict(num_classes=4, gamma=1.0, l_max=120, l_min=1, modes_per_class=2,
                  input_dim=6, noise_scale=0.1, seed=3)
    params.update(overrides)
    return SyntheticSpec(**params)


def test_power_law_sizes():
    """测试幂律类别规模"""
    spec = SyntheticSpec(num_classes=2, gamma=1.0, l_max=100, l_min=1)
    assert class_sizes(spec) == [50, 33]
    sizes = class_sizes(SyntheticSpec(num_classes=10, gamma=0.7, l_max=500, l_min=5))
    assert all(a >= b for a, b in zip(sizes, sizes[1:])), "类别规模应非递增"
    steep = class_sizes(SyntheticSpec(num_classes=5, gamma=8.0, l_max=100, l_min=1))
    assert steep[0] == 50
    assert steep[-1] == 1


def test_gen_power_law_stratified_splits():
    """测试每类按 70/10/20 分层划分"""
    ds = gen_power_law(_small_spec())
    sizes = class_sizes(ds.spec)
    assert len(ds) == sum(sizes)
    assert ds.classes == [0, 1, 2, 3]
    for label, n in enumerate(sizes):
        mask = ds.labels == label
        assert mask.sum() == n
        n_val = int(np.sum(ds.split[mask] == Split.VAL.value))
        n_test = int(np.sum(ds.split[mask] == Split.TEST.value))
        assert n_val == int(np.floor(0.1 * n + 0.5))
        assert n_test == int(np.floor(0.2 * n + 0.5))
    train = ds.subset(Split.TRAIN)
    assert set(train.split.tolist()) == {"train"}


def test_gen_power_law_deterministic(tmp_path):
    """测试固定种子生成的数据集字节一致"""
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    save_dataset(gen_power_law(_small_spec()), a)
    save_dataset(gen_power_law(_small_spec()), b)
    assert a.read_bytes() == b.read_bytes()
    loaded = load_dataset(a)
    original = gen_power_law(_small_spec())
    np.testing.assert_array_equal(loaded.features, original.features)
    np.testing.assert_array_equal(loaded.labels, original.labels)
    assert loaded.spec == original.spec


def test_save_dataset_refuses_overwrite(tmp_path):
    """测试未加 force 时拒绝覆盖"""
    path = tmp_path / "data.csv"
    ds = gen_power_law(_small_spec())
    save_dataset(ds, path)
    with pytest.raises(OutputIoError):
        save_dataset(ds, path)
    save_dataset(ds, path, force=True)


def test_invalid_spec():
    """测试非法规格"""
    with pytest.raises(SpecError):
        gen_power_law(_small_spec(gamma=0.0))
    with pytest.raises(SpecError):
        gen_power_law(_small_spec(l_min=0))
    with pytest.raises(SpecError):
        # 二维圆周上最多放下 12 个夹角 ≥30° 的方向
        gen_power_law(_small_spec(num_classes=13, modes_per_class=2, input_dim=2, min_mode_angle_deg=30.0))


def test_balanced_accuracy_cases():
    """测试均衡准确率"""
    labels = np.array([0, 0, 1, 1])
    assert balanced_accuracy(labels, labels) == 1.0

    labels = np.array([1] * 90 + [0] * 10)
    assert balanced_accuracy(np.ones(100, dtype=int), labels) == pytest.approx(0.5)

    # Np=10, tp=8, Nn=90, tn=45
    labels = np.array([1] * 10 + [0] * 90)
    preds = np.array([1] * 8 + [0] * 2 + [0] * 45 + [1] * 45)
    assert balanced_accuracy(preds, labels) == pytest.approx(0.65)


def test_balanced_accuracy_empty_class():
    """测试指定类别无样本"""
    with pytest.raises(EmptyClassError):
        balanced_accuracy(np.array([0, 0]), np.array([0, 0]), classes=[0, 1])


def test_roc_perfect_separation():
    """测试完全可分时各 FAR 下 TAR 为 1"""
    scores = np.array([0.9, 0.8, 0.7, 0.1, 0.0, -0.2])
    same = np.array([True, True, True, False, False, False])
    result = roc_tar_far(scores, same, [1e-3, 0.1])
    assert result.tar_at_far[1e-3] == 1.0
    assert result.tar_at_far[0.1] == 1.0


def test_roc_identical_scores():
    """测试所有得分相同时 TAR@FAR<1 为 0"""
    result = roc_tar_far(np.zeros(6), np.array([1, 1, 1, 0, 0, 0], dtype=bool), [0.5])
    assert result.tar_at_far[0.5] == 0.0


def test_roc_matches_threshold_sweep():
    """测试 TAR@FAR 与穷举阈值扫描一致"""
    rng = np.random.default_rng(0)
    same = rng.random(400) < 0.3
    scores = np.where(same, rng.normal(0.5, 0.3, 400), rng.normal(0.0, 0.3, 400))
    result = roc_tar_far(scores, same, [0.1])
    best = 0.0
    for t in np.unique(scores):
        accept = scores >= t
        far = accept[~same].mean()
        if far <= 0.1:
            best = max(best, accept[same].mean())
    assert result.tar_at_far[0.1] == pytest.approx(best)


def test_roc_degenerate_pairs():
    """测试只有一种样本对"""
    with pytest.raises(DegeneratePairsError):
        roc_tar_far(np.array([0.1, 0.2]), np.array([True, True]), [0.1])


def test_threshold_at_far_with_pairwise_verify():
    """测试 FAR 阈值与成对验证一致"""
    rng = np.random.default_rng(1)
    e = rng.normal(size=(60, 4))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    labels = np.arange(60) % 5
    _, same = pair_scores(e, labels)
    i, j = np.triu_indices(60, k=1)
    scores = np.array([cos_sim(e[a], e[b]) for a, b in zip(i, j)])
    threshold = threshold_at_far(scores, same, 1e-2)
    accept = np.array([pairwise_verify(e[a], e[b], threshold) for a, b in zip(i, j)])
    assert accept[~same].mean() <= 1e-2 + 1e-12
    expected = roc_tar_far(scores, same, [1e-2]).tar_at_far[1e-2]
    assert accept[same].mean() == pytest.approx(expected)


def test_rank1_identification():
    """测试 rank-1 识别率"""
    gallery = np.eye(3)
    labels = np.array([0, 1, 2])
    assert rank1_identification(gallery, labels, gallery, labels) == 1.0
    assert rank1_identification(gallery, np.array([1, 2, 0]), gallery, labels) == 0.0


def test_imbalance_level():
    """测试二分类不平衡程度"""
    assert imbalance_level(np.array([0, 1] * 50)) == 0.0
    assert imbalance_level(np.array([1] * 98 + [0] * 2)) == pytest.approx(48.0)
    assert imbalance_level(np.zeros(10, dtype=int)) == 50.0
    with pytest.raises(NotBinaryError):
        imbalance_level(np.array([0, 1, 2]))


def test_evaluate_report():
    """测试评估报告：混淆矩阵行和等于类别样本数"""
    labels = np.array([0, 0, 0, 1, 1, 2])
    preds = np.array([0, 1, 0, 1, 1, 0])
    report = evaluate(preds, labels, n_retrieve=20)
    assert report.classes == [0, 1, 2]
    assert report.per_class_accuracy == {0: pytest.approx(2 / 3), 1: 1.0, 2: 0.0}
    assert report.balanced_accuracy == pytest.approx((2 / 3 + 1.0) / 3)
    assert report.overall_accuracy == pytest.approx(4 / 6)
    assert [sum(row) for row in report.confusion_matrix] == [3, 2, 1]
    assert report.imbalance_levels["2"] == pytest.approx(abs(100 / 6 - 50))
    assert report.n_retrieve == 20
    assert report.warnings == []

    extra = evaluate(np.array([0, 5]), np.array([0, 1]))
    assert extra.matrix_labels == [0, 1, 5]
    assert extra.warnings
