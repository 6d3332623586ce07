"""
CLMLE - 合成数据模块

按幂律 f(c) = L_max / (c^γ + L_min) 生成类别不平衡、每类多模态的高斯数据，
并按类别分层划分 train/val/test。
"""
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import pandas as pd

from .errors import OutputIoError, SpecError
from .models import Split, SyntheticSpec

logger = logging.getLogger(__name__)

MAX_MODE_ATTEMPTS = 10000


@dataclass
class Dataset:
    """带标签数据集，行号与 ids 一一对应"""
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray  # 每个样本的划分名称
    spec: Optional[SyntheticSpec] = None

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, split: Union[Split, str]) -> "Dataset":
        """取出某个划分，保留原样本ID"""
        name = Split(split).value
        mask = self.split == name
        return Dataset(
            ids=self.ids[mask],
            features=self.features[mask],
            labels=self.labels[mask],
            split=self.split[mask],
            spec=self.spec,
        )


def validate_spec(spec: SyntheticSpec) -> None:
    """校验合成数据规格"""
    if spec.num_classes < 2:
        raise SpecError(f"类别数必须≥2，实际为{spec.num_classes}")
    if not spec.gamma > 0:
        raise SpecError(f"gamma必须>0，实际为{spec.gamma}")
    if not (spec.l_max >= spec.l_min >= 1):
        raise SpecError(f"需满足L_max≥L_min≥1，实际L_max={spec.l_max}, L_min={spec.l_min}")
    if spec.modes_per_class < 1:
        raise SpecError(f"每类模态数必须≥1，实际为{spec.modes_per_class}")
    if spec.input_dim < 2:
        raise SpecError(f"输入维度必须≥2，实际为{spec.input_dim}")
    if spec.noise_scale < 0:
        raise SpecError(f"噪声尺度不能为负，实际为{spec.noise_scale}")
    fractions = spec.split_fractions
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"划分比例必须为三个非负数且和为1，实际为{fractions}")


def class_sizes(spec: SyntheticSpec) -> List[int]:
    """
    各类样本数 round(f(c))，c = 1..C，四舍五入且至少为 1
    """
    validate_spec(spec)
    sizes = []
    for c in range(1, spec.num_classes + 1):
        f = spec.l_max / (c ** spec.gamma + spec.l_min)
        sizes.append(max(1, int(math.floor(f + 0.5))))
    return sizes


def _mode_means(spec: SyntheticSpec, rng: np.random.Generator) -> np.ndarray:
    """拒绝采样单位向量，任意两个模态均值夹角 ≥ min_mode_angle_deg"""
    total = spec.num_classes * spec.modes_per_class
    max_cos = math.cos(math.radians(spec.min_mode_angle_deg))
    means = []
    attempts = 0
    while len(means) < total:
        attempts += 1
        if attempts > MAX_MODE_ATTEMPTS * total:
            raise SpecError(
                f"无法在{spec.input_dim}维中放置{total}个夹角≥{spec.min_mode_angle_deg}°的模态"
            )
        v = rng.normal(size=spec.input_dim)
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            continue
        v = v / norm
        if means and np.max(np.asarray(means) @ v) > max_cos:
            continue
        means.append(v)
    return np.asarray(means).reshape(spec.num_classes, spec.modes_per_class, spec.input_dim)


def _split_counts(n: int, fractions) -> List[int]:
    n_val = int(math.floor(fractions[1] * n + 0.5))
    n_test = int(math.floor(fractions[2] * n + 0.5))
    n_train = n - n_val - n_test
    while n_train < 1:
        if n_test > 0:
            n_test -= 1
        else:
            n_val -= 1
        n_train += 1
    return [n_train, n_val, n_test]


def gen_power_law(spec: SyntheticSpec) -> Dataset:
    """
    生成幂律不平衡的多模态合成数据集

    参数:
        spec: 数据规格

    返回:
        Dataset：类别为 0..C-1（对应 c = 1..C），划分按类别分层

    异常:
        SpecError: 规格非法或模态无法满足最小夹角
    """
    sizes = class_sizes(spec)
    rng = np.random.default_rng(spec.seed)
    means = _mode_means(spec, rng)

    features = []
    labels = []
    splits = []
    split_names = np.array([Split.TRAIN.value, Split.VAL.value, Split.TEST.value])
    for label, n in enumerate(sizes):
        modes = np.arange(n) % spec.modes_per_class
        x = spec.mode_radius * means[label, modes] + spec.noise_scale * rng.normal(size=(n, spec.input_dim))
        counts = _split_counts(n, spec.split_fractions)
        assigned = np.repeat(split_names, counts)[rng.permutation(n)]
        features.append(x)
        labels.append(np.full(n, label, dtype=np.int64))
        splits.append(assigned)

    total = int(sum(sizes))
    logger.info(f"生成合成数据: {spec.num_classes}类, 共{total}个样本, 最大类{sizes[0]}, 最小类{sizes[-1]}")
    return Dataset(
        ids=np.arange(total, dtype=np.int64),
        features=np.vstack(features),
        labels=np.concatenate(labels),
        split=np.concatenate(splits).astype(str),
        spec=spec,
    )


def save_dataset(dataset: Dataset, csv_path: Union[str, Path], force: bool = False) -> Path:
    """
    保存为 CSV（id,label,split,x0..）及同名 .spec.json 规格文件

    返回:
        规格文件路径
    """
    csv_path = Path(csv_path)
    spec_path = csv_path.with_suffix(".spec.json")
    for path in (csv_path, spec_path):
        if path.exists() and not force:
            raise OutputIoError(f"输出文件已存在: {path}（使用 --force 覆盖）")
    frame = pd.DataFrame(dataset.features, columns=[f"x{j}" for j in range(dataset.input_dim)])
    frame.insert(0, "split", dataset.split)
    frame.insert(0, "label", dataset.labels)
    frame.insert(0, "id", dataset.ids)
    try:
        frame.to_csv(csv_path, index=False, float_format="%.17g")
        if dataset.spec is not None:
            spec_path.write_text(json.dumps(asdict(dataset.spec), ensure_ascii=False, indent=2), encoding="utf-8")
    except OSError as e:
        raise OutputIoError(f"写入数据集失败: {csv_path}: {e}") from e
    return spec_path


def load_dataset(csv_path: Union[str, Path]) -> Dataset:
    """读取 save_dataset 写出的数据集，规格文件存在时一并读取"""
    csv_path = Path(csv_path)
    try:
        frame = pd.read_csv(csv_path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError) as e:
        raise OutputIoError(f"读取数据集失败: {csv_path}: {e}") from e
    missing = {"id", "label", "split"} - set(frame.columns)
    if missing:
        raise OutputIoError(f"数据集缺少列: {sorted(missing)}")
    feature_cols = [c for c in frame.columns if c.startswith("x")]
    spec = None
    spec_path = csv_path.with_suffix(".spec.json")
    if spec_path.exists():
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
        raw["split_fractions"] = tuple(raw.get("split_fractions", (0.7, 0.1, 0.2)))
        spec = SyntheticSpec(**raw)
    return Dataset(
        ids=frame["id"].to_numpy(dtype=np.int64),
        features=frame[feature_cols].to_numpy(dtype=float),
        labels=frame["label"].to_numpy(dtype=np.int64),
        split=frame["split"].to_numpy(dtype=str),
        spec=spec,
    )
