"""
CLMLE - 命令行入口

子命令: gen-data / train / eval / compare / export-embeddings / tune-n / ablate / schema
失败时向 stderr 输出 JSON 错误并返回非零退出码
"""
import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src.classifier import build_index, export_predictions_csv, tune_N
from src.clustering import ClusterIndex
from src.datagen import Dataset, gen_power_law, load_dataset, save_dataset
from src.encoder import embed, export_embeddings_csv, load_checkpoint, save_checkpoint
from src.errors import ClmleError, ConfigError, DivergenceDetected, OutputIoError
from src.models import (
    ClassifierKind,
    LossKind,
    QuerySampling,
    Split,
    TrainConfig,
)
from src.trainer import TrainedModel, evaluate_model, seen_samples_to_target, train
from src.utils import (
    ensure_directory,
    ensure_writable,
    eval_report_frame,
    format_eval_report,
    format_train_report,
    to_jsonable,
    train_report_frame,
    write_csv,
    write_json,
)

from .schema import RunConfig, config_schema, load_run_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

ENCODER_FILE = "encoder.npz"
CLUSTERS_FILE = "clusters.json"
TRAIN_REPORT_FILE = "train_report.json"
TRAIN_CURVE_FILE = "train_curve.csv"
DATASET_FILE = "dataset.csv"


class ErrorResponse(dict):
    """错误响应"""

    def __init__(self, error: Exception, exit_code: int):
        super().__init__(success=False, error=type(error).__name__, message=str(error), exit_code=exit_code)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clmle", description="CLMLE 不平衡嵌入学习命令行工具")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> argparse.ArgumentParser:
        p.add_argument("--config", help="JSON 配置文件路径")
        p.add_argument("--out", default="runs", help="输出目录")
        p.add_argument("--seed", type=int, help="覆盖配置中的随机种子")
        p.add_argument("--force", action="store_true", help="允许覆盖已有输出")
        p.add_argument("--data", help="数据集CSV路径（覆盖配置）")
        p.add_argument("--log-level", default="INFO", help="日志级别")
        return p

    common(sub.add_parser("gen-data", help="生成幂律不平衡合成数据集"))
    common(sub.add_parser("train", help="训练编码器"))
    p = common(sub.add_parser("eval", help="评估 train 输出的模型"))
    p.add_argument("--split", choices=[s.value for s in Split], help="评估划分（覆盖配置）")
    common(sub.add_parser("compare", help="对比 softmax/triplet/lmle/clmle"))
    p = common(sub.add_parser("export-embeddings", help="导出嵌入CSV"))
    p.add_argument("--split", choices=[s.value for s in Split], help="只导出该划分")
    common(sub.add_parser("tune-n", help="在验证集上搜索检索簇数N"))
    common(sub.add_parser("ablate", help="消融实验：查询采样/代价敏感/分类器"))
    sub.add_parser("schema", help="打印配置文件 JSON Schema")
    return parser


# ---------- 公共步骤 ----------

def _apply_seed(run: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return run
    if seed < 0:
        raise ConfigError(f"随机种子不能为负: {seed}")
    return replace(
        run,
        spec=replace(run.spec, seed=seed),
        train_config=replace(run.train_config, seed=seed),
    )


def _dataset(run: RunConfig, args) -> Dataset:
    """数据集来源优先级: --data > 配置 dataset_path > 输出目录中的 dataset.csv > 按规格生成"""
    path = args.data or run.dataset_path
    if path:
        return load_dataset(path)
    local = Path(args.out) / DATASET_FILE
    if local.exists():
        return load_dataset(local)
    return gen_power_law(run.spec)


def _save_model(out: Path, model: TrainedModel, force: bool) -> Path:
    path = ensure_writable(out / ENCODER_FILE, force)
    metadata = {
        "loss_kind": model.loss_kind.value,
        "classifier": model.classifier.value,
        "n_retrieve": model.n_retrieve,
        "instance_k": model.instance_k,
    }
    save_checkpoint(path, model.params, head=model.head, metadata=metadata)
    if model.cluster_index is not None:
        model.cluster_index.save(ensure_writable(out / CLUSTERS_FILE, force))
    return path


def load_model(out: Path) -> TrainedModel:
    """从 train 输出目录读取模型"""
    params, head, metadata = load_checkpoint(out / ENCODER_FILE)
    clusters_path = out / CLUSTERS_FILE
    index = ClusterIndex.load(clusters_path) if clusters_path.exists() else None
    return TrainedModel(
        params=params,
        loss_kind=LossKind(metadata.get("loss_kind", LossKind.CLMLE.value)),
        classifier=ClassifierKind(metadata.get("classifier", ClassifierKind.NEAREST_CLUSTER.value)),
        cluster_index=index,
        n_retrieve=metadata.get("n_retrieve"),
        head=head,
        instance_k=int(metadata.get("instance_k", 10)),
    )


def _train_once(dataset: Dataset, config: TrainConfig, out: Optional[Path], force: bool):
    report = train(dataset, config)
    if out is not None:
        report.checkpoint_path = str(_save_model(out, report.model, force))
        write_json(out / TRAIN_REPORT_FILE, format_train_report(report), force)
        write_csv(out / TRAIN_CURVE_FILE, train_report_frame(report), force)
    return report


# ---------- 子命令 ----------

def cmd_gen_data(run: RunConfig, args) -> dict:
    dataset = gen_power_law(run.spec)
    out = Path(args.out)
    ensure_directory(out)
    save_dataset(dataset, out / DATASET_FILE, force=args.force)
    counts = np.bincount(dataset.labels).tolist()
    return {"dataset": str(out / DATASET_FILE), "samples": len(dataset), "class_sizes": counts}


def cmd_train(run: RunConfig, args) -> dict:
    dataset = _dataset(run, args)
    report = _train_once(dataset, run.train_config, Path(args.out), args.force)
    return format_train_report(report)


def cmd_eval(run: RunConfig, args) -> dict:
    out = Path(args.out)
    dataset = _dataset(run, args)
    model = load_model(out)
    split = Split(args.split) if args.split else run.eval_config.split
    report = evaluate_model(model, dataset, split, far_targets=run.eval_config.far_targets)
    write_json(out / f"eval_{split.value}.json", format_eval_report(report), args.force)
    write_csv(out / f"eval_{split.value}_per_class.csv", eval_report_frame(report), args.force)
    nearest_cluster = model.classifier == ClassifierKind.NEAREST_CLUSTER and model.loss_kind != LossKind.SOFTMAX
    if run.eval_config.export_predictions and nearest_cluster and model.cluster_index is not None and model.n_retrieve:
        part = dataset.subset(split)
        search = build_index(model.cluster_index, model.n_retrieve)
        export_predictions_csv(
            ensure_writable(out / f"predictions_{split.value}.csv", args.force),
            search,
            part.ids,
            embed(model.params, part.features),
        )
    return format_eval_report(report)


def cmd_export_embeddings(run: RunConfig, args) -> dict:
    out = Path(args.out)
    dataset = _dataset(run, args)
    if args.split:
        dataset = dataset.subset(args.split)
    model = load_model(out)
    path = ensure_writable(out / "embeddings.csv", args.force)
    export_embeddings_csv(path, dataset.ids, dataset.labels, embed(model.params, dataset.features))
    return {"embeddings": str(path), "samples": len(dataset)}


def cmd_tune_n(run: RunConfig, args) -> dict:
    out = Path(args.out)
    dataset = _dataset(run, args)
    model = load_model(out)
    if model.cluster_index is None:
        raise ConfigError("模型没有簇索引（softmax 基线不支持检索簇数搜索）")
    val = dataset.subset(Split.VAL)
    best, scores = tune_N(model.cluster_index, embed(model.params, val.features), val.labels)
    result = {"n_retrieve": best, "scores": {str(n): s for n, s in scores.items()}}
    write_json(out / "tune_n.json", result, args.force)
    return result


def _summarize_runs(rows: List[dict], key: str, target_fraction: float) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """对每个方法取种子均值；收敛速度目标为各方法平均最终验证指标最小值的 target_fraction"""
    frame = pd.DataFrame(rows)
    means = frame.groupby(key, sort=False)["val_balanced_accuracy"].mean()
    target = target_fraction * float(means.min())
    frame["seen_samples_to_target"] = [
        _seen_or_total(r["_report"], target) for r in rows
    ]
    frame = frame.drop(columns=["_report"])
    summary = frame.groupby(key, sort=False).agg(
        val_balanced_accuracy=("val_balanced_accuracy", "mean"),
        test_balanced_accuracy=("test_balanced_accuracy", "mean"),
        seen_samples_to_target=("seen_samples_to_target", "mean"),
        runs=("seed", "count"),
    ).reset_index()
    summary["target_val_balanced_accuracy"] = target
    return frame, summary


def _seen_or_total(report, target: float) -> int:
    """未达到目标的运行按其全部已见样本数计（右删失）"""
    seen = seen_samples_to_target(report, target=target)
    if seen is None:
        return report.seen_samples[-1] if report.seen_samples else 0
    return seen


def _run_variants(dataset: Dataset, variants: Dict[str, TrainConfig], seeds, out: Path, force: bool,
                  key: str) -> List[dict]:
    rows = []
    for name, config in variants.items():
        for seed in seeds:
            run_dir = out / f"{name}_seed{seed}"
            ensure_directory(run_dir)
            report = _train_once(dataset, replace(config, seed=seed), run_dir, force)
            test = evaluate_model(report.model, dataset, Split.TEST)
            rows.append({
                key: name,
                "seed": seed,
                "val_balanced_accuracy": report.final_val_balanced_accuracy,
                "test_balanced_accuracy": test.balanced_accuracy,
                "_report": report,
            })
            logger.info(f"{name} seed={seed}: 测试集均衡准确率{test.balanced_accuracy:.4f}")
    return rows


def cmd_compare(run: RunConfig, args) -> dict:
    out = Path(args.out)
    dataset = _dataset(run, args)
    cc = run.compare_config
    seeds = [args.seed] if args.seed is not None else list(cc.seeds)
    variants = {kind.value: replace(run.train_config, loss_kind=kind) for kind in cc.loss_kinds}
    rows = _run_variants(dataset, variants, seeds, out, args.force, key="loss_kind")
    runs, summary = _summarize_runs(rows, "loss_kind", cc.target_fraction)
    write_csv(out / "compare_runs.csv", runs, args.force)
    write_csv(out / "compare.csv", summary, args.force)
    return {"table": summary.to_dict(orient="records")}


def cmd_ablate(run: RunConfig, args) -> dict:
    out = Path(args.out)
    dataset = _dataset(run, args)
    cc = run.compare_config
    seeds = [args.seed] if args.seed is not None else list(cc.seeds)
    base = replace(run.train_config, loss_kind=LossKind.CLMLE)
    variants = {
        "full": base,
        "uniform_query": replace(base, sampler_config=replace(base.sampler_config,
                                                              query_sampling=QuerySampling.UNIFORM)),
        "no_cost_sensitive": replace(base, sampler_config=replace(base.sampler_config, cost_sensitive=False)),
        "instance_knn": replace(base, classifier=ClassifierKind.INSTANCE_KNN),
    }
    rows = _run_variants(dataset, variants, seeds, out, args.force, key="variant")
    runs, summary = _summarize_runs(rows, "variant", cc.target_fraction)
    write_csv(out / "ablation_runs.csv", runs, args.force)
    write_csv(out / "ablation.csv", summary, args.force)
    return {"table": summary.to_dict(orient="records")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "export-embeddings": cmd_export_embeddings,
    "tune-n": cmd_tune_n,
    "ablate": cmd_ablate,
}


def _exit_code(error: Exception) -> int:
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, (OutputIoError, OSError)):
        return EXIT_IO
    if isinstance(error, DivergenceDetected):
        return EXIT_DIVERGED
    return EXIT_ERROR


def main(argv: Optional[List[str]] = None) -> int:
    """
    命令行主函数

    参数:
        argv: 参数列表，默认取 sys.argv[1:]

    返回:
        退出码：0 成功，1 其他库错误，2 配置错误，3 读写错误，4 训练发散
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "schema":
        print(json.dumps(config_schema(), ensure_ascii=False, indent=2))
        return EXIT_OK

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        run = _apply_seed(load_run_config(args.config), args.seed)
        result = COMMANDS[args.command](run, args)
    except (ClmleError, OSError) as e:
        code = _exit_code(e)
        if code == EXIT_DIVERGED:
            logger.error(f"训练在第{e.iteration}次迭代发散")
        print(json.dumps(ErrorResponse(e, code), ensure_ascii=False), file=sys.stderr)
        return code
    print(json.dumps({"success": True, "result": to_jsonable(result)}, ensure_ascii=False, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
