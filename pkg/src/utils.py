"""
CLMLE - 工具函数

报告格式化与文件输出
"""
import json
import math
from dataclasses import asdict, is_dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

from .errors import OutputIoError
from .models import EvalReport, TrainReport


def ensure_directory(path: Union[str, Path]) -> Path:
    """创建输出目录，路径被普通文件占用等情况转为 OutputIoError"""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputIoError(f"无法创建输出目录: {path}: {e}") from e
    return path


def ensure_writable(path: Union[str, Path], force: bool = False) -> Path:
    """目标已存在且未指定 force 时拒绝覆盖"""
    path = Path(path)
    if path.exists() and not force:
        raise OutputIoError(f"输出文件已存在: {path}（使用 --force 覆盖）")
    ensure_directory(path.parent)
    return path


def to_jsonable(obj: Any) -> Any:
    """递归转换为可 JSON 序列化的对象，非有限浮点数转为 None"""
    if isinstance(obj, Enum):
        return obj.value
    if is_dataclass(obj) and not isinstance(obj, type):
        return to_jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return to_jsonable(obj.item())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def write_json(path: Union[str, Path], data: Any, force: bool = False) -> Path:
    path = ensure_writable(path, force)
    try:
        path.write_text(json.dumps(to_jsonable(data), ensure_ascii=False, indent=2), encoding="utf-8")
    except OSError as e:
        raise OutputIoError(f"写入文件失败: {path}: {e}") from e
    return path


def write_csv(path: Union[str, Path], frame: pd.DataFrame, force: bool = False) -> Path:
    path = ensure_writable(path, force)
    try:
        frame.to_csv(path, index=False)
    except OSError as e:
        raise OutputIoError(f"写入文件失败: {path}: {e}") from e
    return path


def train_report_frame(report: TrainReport) -> pd.DataFrame:
    """逐迭代曲线：iteration, loss, seen_samples"""
    return pd.DataFrame({
        "iteration": np.arange(1, len(report.losses) + 1),
        "loss": report.losses,
        "seen_samples": report.seen_samples,
    })


def eval_report_frame(report: EvalReport) -> pd.DataFrame:
    """逐类别指标：class, accuracy, count"""
    return pd.DataFrame({
        "class": report.classes,
        "accuracy": [report.per_class_accuracy[c] for c in report.classes],
        "count": [report.class_counts.get(c, 0) for c in report.classes],
    })


def format_train_report(report: TrainReport) -> dict:
    """
    格式化训练报告为摘要字典

    参数:
        report: TrainReport对象

    返回:
        不含逐迭代曲线的摘要字典
    """
    if not isinstance(report, TrainReport):
        raise ValueError("输入必须是 TrainReport 类型")
    output = {
        "loss_kind": report.loss_kind.value,
        "seed": report.seed,
        "iterations": len(report.losses),
        "seen_samples": report.seen_samples[-1] if report.seen_samples else 0,
        "final_loss": report.losses[-1] if report.losses else None,
        "final_val_balanced_accuracy": report.final_val_balanced_accuracy,
        "n_retrieve": report.n_retrieve,
        "margins": report.margins or None,
        "schedule": {
            "rounds_completed": report.rounds_completed,
            "clustering_passes": report.clustering_passes,
            "skipped_batches": report.skipped_batches,
            "round_wall_clock_s": report.round_wall_clock_s,
        },
        "validation": {
            "iterations": report.eval_iterations,
            "seen_samples": report.eval_seen_samples,
            "balanced_accuracy": report.val_balanced_accuracy,
            "learning_rates": report.learning_rates,
        },
        "checkpoint_path": report.checkpoint_path,
        "warnings": report.warnings,
    }
    return _remove_none_values(output)


def format_eval_report(report: EvalReport) -> dict:
    """格式化评估报告"""
    if not isinstance(report, EvalReport):
        raise ValueError("输入必须是 EvalReport 类型")
    output = {
        "balanced_accuracy": report.balanced_accuracy,
        "overall_accuracy": report.overall_accuracy,
        "per_class_accuracy": {str(k): v for k, v in report.per_class_accuracy.items()},
        "confusion_matrix": report.confusion_matrix,
        "matrix_labels": report.matrix_labels,
        "imbalance_levels": report.imbalance_levels,
        "n_retrieve": report.n_retrieve,
        "roc": None if report.roc is None else {
            "far": report.roc.far,
            "tar": report.roc.tar,
            "thresholds": report.roc.thresholds,
            "tar_at_far": {repr(k): v for k, v in report.roc.tar_at_far.items()},
        },
        "warnings": report.warnings,
    }
    return _remove_none_values(output)


def _remove_none_values(d):
    """递归移除字典中的None值"""
    if not isinstance(d, dict):
        return d
    return {k: _remove_none_values(v) for k, v in d.items() if v is not None}
