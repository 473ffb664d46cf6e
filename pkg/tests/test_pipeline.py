import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import math

import numpy as np
import pandas as pd
import pytest

from app.core.errors import ConfigError
from app.core.models import Arm, BiSSLConfig, ModelPart, SearchSpace, SearchStage
from app.core.seeding import derive_seed
from app.networks.mlp import flatten, init_model
from app.services.manifest import RunManifest, read_manifest
from app.services.pipeline_service import (
    ABLATION_ARMS,
    ArmResult,
    ComparisonReport,
    PipelineService,
    arm_bissl_config,
    bissl_seed,
    data_seed,
    random_search,
    sample_log_uniform,
)
from app.services.stages import evaluate, run_finetune, run_head_warmup, run_pretext_pretrain
from app.data.synthetic import make_datasets
from app.training.checkpoint import load_params, param_hash

from tests.conftest import tiny_run_config


def fake_result(arm, seed_index, accuracy):
    return ArmResult(
        arm=arm, seed_index=seed_index, test_accuracy=accuracy, test_topk_accuracy=1.0, test_loss=0.5,
        val_accuracy=accuracy, val_loss=0.5, best_epoch=1, theta_hash="x",
    )


# ==================== Arms ====================

def test_arm_configs():
    base = BiSSLConfig(T=10, N_U=8)
    assert arm_bissl_config(Arm.BISSL, base) == base
    assert arm_bissl_config(Arm.BISSL_DISCARD_IJ, base).discard_ij is True
    assert arm_bissl_config(Arm.BISSL_NU1, base).N_U == 1
    matched = arm_bissl_config(Arm.BISSL_NU1_MATCHED, base)
    assert (matched.N_U, matched.T) == (1, 80)
    assert arm_bissl_config(Arm.FT_ONLY, base) is None
    assert arm_bissl_config(Arm.WEIGHTED_SUM, base) is None
    assert Arm.FT_ONLY not in ABLATION_ARMS


def test_data_seed_prefers_explicit_seed(tiny_config):
    assert data_seed(tiny_config) == 3
    cfg = tiny_config.model_copy(update={"data": tiny_config.data.model_copy(update={"seed": None})})
    assert data_seed(cfg) == derive_seed(0, "data")


def test_bissl_seed_overrides_pipeline_seed(tmp_path, no_wall_time):
    base = tiny_run_config(arms=[Arm.BISSL])
    seeded = base.model_copy(update={"bissl": base.bissl.model_copy(update={"seed": 7})})
    assert bissl_seed(base) == base.pipeline.seed
    assert bissl_seed(seeded) == 7

    PipelineService(base, tmp_path / "a").run_arm(Arm.BISSL, 0)
    PipelineService(seeded, tmp_path / "b").run_arm(Arm.BISSL, 0)
    # pretraining still follows pipeline.seed, only the BiSSL draws move
    pre_a, _ = load_params(tmp_path / "a" / "pretrained.pt")
    pre_b, _ = load_params(tmp_path / "b" / "pretrained.pt")
    assert param_hash(pre_a["theta"]) == param_hash(pre_b["theta"])
    losses_a = pd.read_csv(tmp_path / "a" / "bissl" / "seed_0" / "bissl_metrics.csv")["loss"]
    losses_b = pd.read_csv(tmp_path / "b" / "bissl" / "seed_0" / "bissl_metrics.csv")["loss"]
    assert not losses_a.equals(losses_b)


def test_ft_only_is_pretrain_then_finetune(tmp_path, tiny_config, no_wall_time):
    service = PipelineService(tiny_config, tmp_path)
    result = service.run_arm(Arm.FT_ONLY, 0)

    cfg = tiny_config
    data = make_datasets(cfg.data)
    pre = run_pretext_pretrain(
        cfg.model, data.pretext, cfg.pretrain, cfg.data.augment,
        seed=derive_seed(0, "init"), augment_seed=derive_seed(0, "augment"),
    )
    head = flatten(init_model(cfg.model, derive_seed(0, "init", 0)), ModelPart.DOWNSTREAM_HEAD)
    ft = run_finetune(cfg.model, pre.theta, head, data.downstream, cfg.finetune, seed=derive_seed(0, "train", 0, 1))
    assert result.theta_hash == param_hash(ft.theta)
    assert result.test_accuracy == ft.test.accuracy
    assert (tmp_path / "ft_only" / "seed_0" / "finetuned.pt").exists()
    assert (tmp_path / "pretrained.pt").exists()


def test_bissl_arm_writes_artifacts(tmp_path, tiny_config, no_wall_time):
    manifest = RunManifest.start(tmp_path, "test")
    service = PipelineService(tiny_config, tmp_path, manifest)
    result = service.run_arm(Arm.BISSL, 0)
    arm_dir = tmp_path / "bissl" / "seed_0"
    rows = pd.read_csv(arm_dir / "bissl_metrics.csv")
    bissl = tiny_config.bissl
    assert len(rows) == bissl.T * (bissl.N_L + bissl.N_U)
    assert (arm_dir / "bissl_state.pt").exists()
    assert math.isfinite(result.stationarity_before) and math.isfinite(result.stationarity_after)
    entries = read_manifest(manifest.path)
    assert entries["command"] == "test"
    assert "hash.dataset" in entries
    assert "stationarity.bissl.seed_0.after" in entries


def test_head_warmup_with_zero_epochs(tiny_config):
    cfg = tiny_config
    data = make_datasets(cfg.data)
    params = init_model(cfg.model, 0)
    head = flatten(params, ModelPart.DOWNSTREAM_HEAD)
    warm = run_head_warmup(
        cfg.model, flatten(params, ModelPart.BACKBONE), head, data.downstream.train,
        cfg.warmup.model_copy(update={"epochs": 0}), seed=1,
    )
    assert warm.phi_d.bitwise_equal(head)


def test_stages_with_zero_epochs(tiny_config):
    cfg = tiny_config
    data = make_datasets(cfg.data)
    pre = run_pretext_pretrain(
        cfg.model, data.pretext, cfg.pretrain.model_copy(update={"epochs": 0}), cfg.data.augment, seed=4, augment_seed=5,
    )
    params = init_model(cfg.model, 4)
    assert pre.theta.bitwise_equal(flatten(params, ModelPart.BACKBONE))
    assert pre.history == []

    head = flatten(params, ModelPart.DOWNSTREAM_HEAD)
    ft = run_finetune(cfg.model, pre.theta, head, data.downstream, cfg.finetune.model_copy(update={"epochs": 0}), seed=1)
    assert ft.best_epoch == 0
    expected = evaluate(cfg.model, pre.theta, head, data.downstream.test, cfg.finetune.topk)
    assert ft.test == expected


# ==================== Comparison table ====================

def test_comparison_summary_statistics():
    results = [fake_result("bissl", r, acc) for r, acc in enumerate([0.5, 0.6, 0.7, 0.8, 0.9])]
    results += [fake_result("ft_only", r, 0.4) for r in range(5)]
    summary = ComparisonReport(results).summary()
    # canonical arm order, not insertion order
    assert summary["arm"].tolist() == ["ft_only", "bissl"]
    bissl = summary.set_index("arm").loc["bissl"]
    assert bissl["seeds"] == 5
    assert bissl["test_accuracy_mean"] == pytest.approx(0.7)
    assert bissl["test_accuracy_std"] == pytest.approx(np.std([0.5, 0.6, 0.7, 0.8, 0.9], ddof=1))
    assert summary.set_index("arm").loc["ft_only", "test_accuracy_std"] == pytest.approx(0.0)


def test_single_seed_std_is_zero(tmp_path):
    report = ComparisonReport([fake_result("bissl", 0, 0.5)], name="one")
    paths = report.write(tmp_path)
    assert report.summary().loc[0, "test_accuracy_std"] == 0.0
    assert set(paths) == {"results", "table", "text"}
    assert "bissl" in paths["text"].read_text()


def test_pipeline_run_table(tmp_path, no_wall_time):
    cfg = tiny_run_config(arms=[Arm.FT_ONLY, Arm.BISSL, Arm.WEIGHTED_SUM], seeds=2)
    report = PipelineService(cfg, tmp_path).run()
    frame = report.frame()
    assert list(zip(frame["seed_index"], frame["arm"])) == [
        (0, "ft_only"), (0, "bissl"), (0, "weighted_sum"), (1, "ft_only"), (1, "bissl"), (1, "weighted_sum"),
    ]
    table = pd.read_csv(tmp_path / "comparison.csv")
    assert table["seeds"].tolist() == [2, 2, 2]
    assert (tmp_path / "comparison.txt").exists()


def test_pipeline_is_deterministic(tmp_path, no_wall_time):
    cfg = tiny_run_config(arms=[Arm.BISSL])
    first = PipelineService(cfg, tmp_path / "a").run().frame().drop(columns=["seconds"])
    second = PipelineService(cfg, tmp_path / "b").run().frame().drop(columns=["seconds"])
    pd.testing.assert_frame_equal(first, second)
    metrics_a = (tmp_path / "a" / "bissl" / "seed_0" / "bissl_metrics.csv").read_bytes()
    metrics_b = (tmp_path / "b" / "bissl" / "seed_0" / "bissl_metrics.csv").read_bytes()
    assert metrics_a == metrics_b


# ==================== Random search ====================

def test_search_single_trial():
    space = SearchSpace(lr_min=0.01, lr_max=0.1, wd_min=1e-4, wd_max=1e-3, trials=1)
    calls = []

    def trainer(index, lr, wd):
        calls.append((index, lr, wd))
        return 0.5, 1.0

    result = random_search(space, 1, SearchStage.FINETUNE, 0, trainer)
    assert len(calls) == 1
    assert (result.best.index, result.best.lr, result.best.weight_decay) == calls[0]


def test_search_selection_rule():
    outcomes = {0: (0.8, 0.5), 1: (0.9, 0.7), 2: (0.9, 0.4), 3: (0.9, 0.4)}
    result = random_search(SearchSpace(), 4, SearchStage.FINETUNE, 1, lambda i, lr, wd: outcomes[i], workers=2)
    assert result.best.index == 2
    assert [t.index for t in result.trials] == [0, 1, 2, 3]
    for t in result.trials:
        assert 1e-4 <= t.lr <= 1.0 and 1e-5 <= t.weight_decay <= 1e-2


def test_log_uniform_sampling():
    rng = np.random.default_rng(0)
    draws = np.array([sample_log_uniform(rng, 1e-4, 1.0) for _ in range(10000)])
    assert draws.min() >= 1e-4 and draws.max() <= 1.0
    assert abs(np.mean(draws < 1e-2) - 0.5) <= 0.02
    with pytest.raises(ConfigError):
        sample_log_uniform(rng, 0.0, 1.0)


def test_sweep_writes_trials(tmp_path, no_wall_time):
    cfg = tiny_run_config()
    manifest = RunManifest.start(tmp_path, "sweep")
    search, report = PipelineService(cfg, tmp_path, manifest).sweep()
    trials = pd.read_csv(tmp_path / "search_trials.csv")
    assert len(trials) == cfg.search.trials
    assert report.name == "search_retrain"
    assert read_manifest(manifest.path)["search.best.index"] == str(search.best.index)
