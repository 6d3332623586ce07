"""
CLMLE - 编码器模块

小型全连接网络 f: R^D -> S^{d-1}，最后一层输出做 L2 归一化。
提供前向、反向、带动量与权重衰减的 SGD 以及检查点读写。
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import NonFiniteGradientError, OutputIoError, ShapeMismatchError, ZeroVectorError
from .hypersphere import ZERO_NORM_EPS

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class EncoderParams:
    """编码器参数：逐层权重 (in, out) 与偏置 (out,)"""
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @property
    def input_dim(self) -> int:
        return int(self.weights[0].shape[0])

    @property
    def output_dim(self) -> int:
        return int(self.weights[-1].shape[1])

    @property
    def hidden(self) -> Tuple[int, ...]:
        return tuple(int(w.shape[1]) for w in self.weights[:-1])

    def copy(self) -> "EncoderParams":
        return EncoderParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class EncoderCache:
    """前向中间结果，反向传播使用"""
    inputs: List[np.ndarray]  # 每层输入
    pre_activations: List[np.ndarray]  # 每层线性输出
    raw_output: np.ndarray  # 归一化前的输出 z
    norms: np.ndarray  # ||z||
    output: np.ndarray  # z / ||z||


@dataclass
class OptimizerState:
    """动量SGD状态"""
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    velocities: Dict[str, List[np.ndarray]] = field(default_factory=dict)


def init_encoder(
    input_dim: int,
    hidden: Sequence[int],
    output_dim: int,
    seed: Union[int, np.random.SeedSequence] = 0,
) -> EncoderParams:
    """
    He 正态初始化权重，偏置置零

    参数:
        input_dim: 输入维度 D
        hidden: 隐藏层宽度，允许为空（单层线性 + 归一化）
        output_dim: 嵌入维度 d (≥2)
        seed: 随机种子

    返回:
        EncoderParams
    """
    if output_dim < 2:
        raise ShapeMismatchError(f"嵌入维度必须≥2，实际为{output_dim}")
    rng = np.random.default_rng(seed)
    dims = [int(input_dim), *(int(h) for h in hidden), int(output_dim)]
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(weights=weights, biases=biases)


def forward(params: EncoderParams, x: np.ndarray) -> Tuple[np.ndarray, EncoderCache]:
    """
    前向计算单位范数嵌入

    参数:
        params: 编码器参数
        x: 输入 (n, D)

    返回:
        (U, cache)：U 形状 (n, d)，每行范数为 1

    异常:
        ZeroVectorError: 某个样本的输出范数 < 1e-12
    """
    h = np.asarray(x, dtype=float)
    if h.ndim != 2 or h.shape[1] != params.input_dim:
        raise ShapeMismatchError(f"输入形状{h.shape}与编码器输入维度{params.input_dim}不一致")
    inputs = []
    pre = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    norms = np.linalg.norm(h, axis=1)
    if np.any(norms < ZERO_NORM_EPS):
        bad = int(np.argmin(norms))
        raise ZeroVectorError(f"第{bad}个样本的编码器输出退化为零向量")
    u = h / norms[:, None]
    return u, EncoderCache(inputs=inputs, pre_activations=pre, raw_output=h, norms=norms, output=u)


def embed(params: EncoderParams, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    """分块前向，只返回嵌入"""
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        return np.zeros((0, params.output_dim))
    parts = [forward(params, x[i:i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
    return np.vstack(parts)


def backward(params: EncoderParams, cache: EncoderCache, grad_embeddings: np.ndarray) -> EncoderParams:
    """
    由 dJ/dU 计算参数梯度

    归一化层雅可比：dz = (dU - U·(Uᵀ dU)) / ||z||

    参数:
        params: 编码器参数
        cache: forward 返回的缓存
        grad_embeddings: dJ/dU (n, d)

    返回:
        EncoderParams: 与 params 同形状的梯度
    """
    g = np.asarray(grad_embeddings, dtype=float)
    if g.shape != cache.output.shape:
        raise ShapeMismatchError(f"梯度形状{g.shape}与嵌入形状{cache.output.shape}不一致")
    u = cache.output
    radial = np.sum(u * g, axis=1, keepdims=True)
    dz = (g - u * radial) / cache.norms[:, None]

    grad_w: List[np.ndarray] = [None] * len(params.weights)
    grad_b: List[np.ndarray] = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        grad_w[i] = cache.inputs[i].T @ dz
        grad_b[i] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ params.weights[i].T
            dz = dh * (cache.pre_activations[i - 1] > 0)
    return EncoderParams(weights=grad_w, biases=grad_b)


def init_optimizer(learning_rate: float, momentum: float = 0.9, weight_decay: float = 0.0005) -> OptimizerState:
    return OptimizerState(learning_rate=learning_rate, momentum=momentum, weight_decay=weight_decay)


def sgd_step(
    params: EncoderParams,
    grads: EncoderParams,
    state: OptimizerState,
    extra: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
) -> Tuple[EncoderParams, OptimizerState, Dict[str, np.ndarray]]:
    """
    动量SGD一步：v = m·v + g + λ·p，p = p - lr·v

    权重衰减作用于全部参数（含偏置与额外参数）。不修改传入的参数与状态。

    参数:
        params: 当前参数
        grads: 参数梯度
        state: 优化器状态
        extra: 额外参数 {名称: (参数, 梯度)}，如 softmax 分类权重 W

    返回:
        (新参数, 新状态, 更新后的额外参数)

    异常:
        NonFiniteGradientError: 任一梯度包含 NaN/Inf
    """
    extra = extra or {}
    for name, arrays in (("weights", grads.weights), ("biases", grads.biases)):
        for i, (p, g) in enumerate(zip(getattr(params, name), arrays)):
            if p.shape != g.shape:
                raise ShapeMismatchError(f"{name}[{i}]梯度形状{g.shape}与参数{p.shape}不一致")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"{name}[{i}]梯度包含非有限值")
    for name, (p, g) in extra.items():
        if p.shape != g.shape:
            raise ShapeMismatchError(f"{name}梯度形状{g.shape}与参数{p.shape}不一致")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"{name}梯度包含非有限值")

    velocities = {k: [v.copy() for v in vs] for k, vs in state.velocities.items()}

    def _update(key: str, values: List[np.ndarray], gradients: List[np.ndarray]) -> List[np.ndarray]:
        prev = velocities.get(key) or [np.zeros_like(v) for v in values]
        new_v = []
        new_p = []
        for p, g, v in zip(values, gradients, prev):
            step = g + state.weight_decay * p
            v = state.momentum * v + step
            new_v.append(v)
            new_p.append(p - state.learning_rate * v)
        velocities[key] = new_v
        return new_p

    new_params = EncoderParams(
        weights=_update("weights", params.weights, grads.weights),
        biases=_update("biases", params.biases, grads.biases),
    )
    new_extra = {
        name: _update(name, [p], [g])[0] for name, (p, g) in extra.items()
    }
    new_state = OptimizerState(
        learning_rate=state.learning_rate,
        momentum=state.momentum,
        weight_decay=state.weight_decay,
        velocities=velocities,
    )
    return new_params, new_state, new_extra


def save_checkpoint(
    path: Union[str, Path],
    params: EncoderParams,
    head: Optional[np.ndarray] = None,
    metadata: Optional[dict] = None,
) -> None:
    """
    保存编码器参数到 npz，附带 JSON 头（格式版本与各层形状）

    参数:
        path: 输出路径
        params: 编码器参数
        head: softmax 分类权重 W (d, C)（可选）
        metadata: 额外元数据
    """
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "num_layers": len(params.weights),
        "shapes": [list(w.shape) for w in params.weights],
        "has_head": head is not None,
        "metadata": metadata or {},
    }
    arrays = {"header": np.array(json.dumps(header, ensure_ascii=False))}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    if head is not None:
        arrays["head"] = np.asarray(head)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as e:
        raise OutputIoError(f"写入检查点失败: {path}: {e}") from e
    logger.info(f"已保存编码器检查点: {path}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[EncoderParams, Optional[np.ndarray], dict]:
    """
    读取 save_checkpoint 写出的检查点

    返回:
        (参数, 分类权重或None, 元数据)
    """
    try:
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
                raise OutputIoError(f"不支持的检查点版本: {header.get('format_version')}")
            n = header["num_layers"]
            weights = [data[f"w{i}"].copy() for i in range(n)]
            biases = [data[f"b{i}"].copy() for i in range(n)]
            head = data["head"].copy() if header.get("has_head") else None
    except (OSError, KeyError, ValueError) as e:
        if isinstance(e, OutputIoError):
            raise
        raise OutputIoError(f"读取检查点失败: {path}: {e}") from e
    for w, shape in zip(weights, header["shapes"]):
        if list(w.shape) != shape:
            raise OutputIoError(f"检查点层形状{w.shape}与头信息{shape}不一致")
    return EncoderParams(weights=weights, biases=biases), head, header.get("metadata", {})


def export_embeddings_csv(
    path: Union[str, Path], ids: np.ndarray, labels: np.ndarray, embeddings: np.ndarray
) -> None:
    """导出嵌入为 CSV：id,label,e0..e{d-1}"""
    frame = pd.DataFrame(embeddings, columns=[f"e{j}" for j in range(embeddings.shape[1])])
    frame.insert(0, "label", np.asarray(labels, dtype=int))
    frame.insert(0, "id", np.asarray(ids, dtype=int))
    try:
        frame.to_csv(path, index=False, float_format="%.17g")
    except OSError as e:
        raise OutputIoError(f"写入嵌入文件失败: {path}: {e}") from e
