"""
CLMLE 基础流程测试
"""
import numpy as np

from src import (
    ClusterIndex,
    LossKind,
    Split,
    SyntheticSpec,
    TrainConfig,
    build_index,
    gen_power_law,
    predict,
    train,
)
from src.encoder import embed
from src.example import run_example
from src.models import EncoderConfig, SamplerConfig, ScheduleConfig
from src.trainer import evaluate_model
from src.utils import format_eval_report, format_train_report, to_jsonable


def _tiny_config(loss_kind=LossKind.CLMLE):
    return TrainConfig(
        loss_kind=loss_kind,
        cluster_size=8,
        encoder_config=EncoderConfig(hidden=(16,), embedding_dim=4),
        sampler_config=SamplerConfig(clusters_per_batch=4, n_sub=4),
        schedule_config=ScheduleConfig(refresh_period=20, max_rounds=1, eval_every=10,
                                       pretrain_epochs=1, kmeans_max_iters=5),
        seed=1,
    )


def test_end_to_end_example():
    """测试示例流程：生成数据、训练、评估"""
    print("测试1: 示例流程")
    report = run_example(verbose=False)
    assert 0.0 <= report.balanced_accuracy <= 1.0
    assert report.classes == [0, 1, 2, 3]
    print(f"  ✓ 测试集均衡准确率{report.balanced_accuracy:.4f}")


def test_trained_model_predicts_with_cluster_index():
    """测试训练产物按近邻簇规则分类"""
    print("测试2: 近邻簇分类")
    dataset = gen_power_law(SyntheticSpec(num_classes=3, gamma=1.0, l_max=120, l_min=1,
                                          modes_per_class=1, input_dim=5, noise_scale=0.1, seed=2))
    report = train(dataset, _tiny_config())
    model = report.model
    assert isinstance(model.cluster_index, ClusterIndex)
    test = dataset.subset(Split.TEST)
    preds = model.predict(test.features)
    assert preds.shape == test.labels.shape

    search = build_index(model.cluster_index, model.n_retrieve)
    first = predict(search, embed(model.params, test.features[:1])[0])
    assert first == preds[0], "单条预测应与批量预测一致"
    print(f"  ✓ 检索簇数N={model.n_retrieve}")


def test_reports_are_json_friendly():
    """测试报告可序列化"""
    print("测试3: 报告序列化")
    dataset = gen_power_law(SyntheticSpec(num_classes=2, gamma=1.0, l_max=90, l_min=1,
                                          modes_per_class=1, input_dim=4, seed=3))
    report = train(dataset, _tiny_config(LossKind.SOFTMAX))
    payload = to_jsonable(format_train_report(report))
    assert payload["loss_kind"] == "softmax"
    assert all(np.isfinite(payload["validation"]["balanced_accuracy"]))
    evaluation = format_eval_report(evaluate_model(report.model, dataset))
    assert "confusion_matrix" in evaluation
    print("  ✓ 训练与评估报告均可导出")


if __name__ == "__main__":
    test_end_to_end_example()
    test_trained_model_predicts_with_cluster_index()
    test_reports_are_json_friendly()
