"""
CLMLE 使用示例
"""
from .datagen import gen_power_law
from .models import (
    EncoderConfig,
    LossKind,
    SamplerConfig,
    ScheduleConfig,
    Split,
    SyntheticSpec,
    TrainConfig,
)
from .trainer import evaluate_model, train
from .utils import format_eval_report, format_train_report


def run_example(verbose: bool = True):
    spec = SyntheticSpec(num_classes=4, gamma=1.0, l_max=240, l_min=1, modes_per_class=2,
                         input_dim=8, noise_scale=0.15, seed=7)
    dataset = gen_power_law(spec)

    config = TrainConfig(
        loss_kind=LossKind.CLMLE,
        cluster_size=8,
        encoder_config=EncoderConfig(hidden=(32,), embedding_dim=8),
        sampler_config=SamplerConfig(clusters_per_batch=6, n_sub=6),
        schedule_config=ScheduleConfig(
            refresh_period=100, max_rounds=2, eval_every=50, pretrain_epochs=2, kmeans_max_iters=20,
        ),
        seed=7,
    )
    report = train(dataset, config)
    evaluation = evaluate_model(report.model, dataset, Split.TEST)
    if verbose:
        for key, value in format_train_report(report).items():
            print(key, ":", value)
        for key, value in format_eval_report(evaluation).items():
            print(key, ":", value)
    return evaluation


if __name__ == "__main__":
    run_example()
