"""
命令行测试：子命令、输出文件与退出码
"""
import json

import numpy as np
import pandas as pd
import pytest

from cli.app import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, EXIT_OK, main
from src.models import LossOutput

SMALL_CONFIG = {
    "data": {
        "num_classes": 3, "gamma": 1.0, "l_max": 300, "l_min": 1, "modes_per_class": 1,
        "input_dim": 6, "noise_scale": 0.05, "min_mode_angle_deg": 60.0, "seed": 7,
    },
    "train": {
        "cluster_size": 10,
        "encoder_config": {"hidden": [16], "embedding_dim": 4},
        "sampler_config": {"clusters_per_batch": 4, "n_sub": 5},
        "schedule_config": {
            "refresh_period": 15, "max_rounds": 2, "eval_every": 0,
            "pretrain_epochs": 1, "kmeans_max_iters": 5,
        },
    },
    "eval": {"far_targets": [0.1]},
    "compare": {"seeds": [0]},
}


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG), encoding="utf-8")
    return str(path)


def _result(capsys):
    return json.loads(capsys.readouterr().out)["result"]


def test_schema_command(capsys):
    """测试打印配置 Schema"""
    assert main(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert "properties" in schema
    assert "train" in schema["properties"]


def test_gen_data_deterministic_and_refuses_overwrite(tmp_path, config_path, capsys):
    """测试数据生成确定且未加 --force 时拒绝覆盖"""
    out = tmp_path / "run"
    assert main(["gen-data", "--config", config_path, "--out", str(out)]) == EXIT_OK
    first = (out / "dataset.csv").read_bytes()
    assert _result(capsys)["class_sizes"] == [150, 100, 75]

    assert main(["gen-data", "--config", config_path, "--out", str(out)]) == EXIT_IO
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["success"] is False
    assert error["exit_code"] == EXIT_IO

    assert main(["gen-data", "--config", config_path, "--out", str(out), "--force"]) == EXIT_OK
    assert (out / "dataset.csv").read_bytes() == first


def test_invalid_config_exit_code(tmp_path, capsys):
    """测试配置非法时退出码为2"""
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"cluster_size": 0}}), encoding="utf-8")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    unknown = tmp_path / "unknown.json"
    unknown.write_text(json.dumps({"trian": {}}), encoding="utf-8")
    assert main(["train", "--config", str(unknown), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    assert main(["train", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "run")]) == EXIT_CONFIG
    capsys.readouterr()


def test_output_path_is_a_file(tmp_path, config_path, capsys):
    """测试输出目录被普通文件占用时退出码为3并输出错误JSON"""
    occupied = tmp_path / "occupied"
    occupied.write_text("x", encoding="utf-8")
    assert main(["gen-data", "--config", config_path, "--out", str(occupied)]) == EXIT_IO
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["success"] is False
    assert error["error"] == "OutputIoError"
    assert error["exit_code"] == EXIT_IO


def test_train_then_eval_reproduces_validation(tmp_path, config_path, capsys):
    """测试 train 后 eval --split val 复现训练报告中的验证指标"""
    out = tmp_path / "run"
    assert main(["train", "--config", config_path, "--out", str(out)]) == EXIT_OK
    trained = _result(capsys)
    for name in ("encoder.npz", "clusters.json", "train_report.json", "train_curve.csv"):
        assert (out / name).exists(), f"缺少输出文件{name}"
    curve = pd.read_csv(out / "train_curve.csv")
    assert list(curve.columns) == ["iteration", "loss", "seen_samples"]

    assert main(["eval", "--config", config_path, "--out", str(out), "--split", "val"]) == EXIT_OK
    evaluated = _result(capsys)
    assert abs(evaluated["balanced_accuracy"] - trained["final_val_balanced_accuracy"]) < 1e-12
    assert (out / "eval_val.json").exists()
    assert (out / "eval_val_per_class.csv").exists()
    predictions = pd.read_csv(out / "predictions_val.csv")
    assert list(predictions.columns) == ["id", "predicted", "cluster_ids", "similarities"]

    assert main(["export-embeddings", "--config", config_path, "--out", str(out)]) == EXIT_OK
    capsys.readouterr()
    embeddings = pd.read_csv(out / "embeddings.csv")
    assert list(embeddings.columns) == ["id", "label", "e0", "e1", "e2", "e3"]
    norms = np.linalg.norm(embeddings[["e0", "e1", "e2", "e3"]].to_numpy(), axis=1)
    np.testing.assert_allclose(norms, 1.0)

    assert main(["tune-n", "--config", config_path, "--out", str(out), "--force"]) == EXIT_OK
    assert _result(capsys)["n_retrieve"] >= 1


def test_compare_table(tmp_path, config_path, capsys):
    """测试对比实验输出四种方法的汇总表"""
    out = tmp_path / "cmp"
    assert main(["compare", "--config", config_path, "--out", str(out), "--seed", "0"]) == EXIT_OK
    capsys.readouterr()
    table = pd.read_csv(out / "compare.csv")
    assert sorted(table["loss_kind"]) == ["clmle", "lmle", "softmax", "triplet"]
    assert {"val_balanced_accuracy", "test_balanced_accuracy", "seen_samples_to_target"} <= set(table.columns)
    assert (out / "clmle_seed0" / "encoder.npz").exists()


def test_divergence_exit_code(tmp_path, config_path, capsys, monkeypatch):
    """测试训练发散时退出码为4"""
    def broken_loss(embeddings, cluster_of, cluster_labels, config):
        return LossOutput(value=float("inf"), grads=np.zeros_like(embeddings),
                          per_sample=np.zeros(embeddings.shape[0]))

    monkeypatch.setattr("src.trainer.clmle_loss", broken_loss)
    assert main(["train", "--config", config_path, "--out", str(tmp_path / "run")]) == EXIT_DIVERGED
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "DivergenceDetected"
