import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import pandas as pd
import pytest

from app.core.errors import EXIT_CONFIG, EXIT_OK
from app.main import dispatch
from app.services.manifest import MANIFEST_NAME, read_manifest
from app.training.checkpoint import load_params, param_hash

TINY_CONFIG = """
# small enough for a test run
model.input_dim = 4
model.backbone_widths = 6
model.feature_dim = 4
model.pretext_widths = 4, 3
model.num_classes = 3
data.input_dim = 4
data.num_classes = 3
data.pretext_samples = 48
data.downstream_samples = 60
data.pretext_batch_size = 8
data.downstream_batch_size = 6
data.seed = 3
bissl.lam = 0.1
bissl.N_L = 2
bissl.N_U = 2
bissl.T = 2
cg.iterations = 2
pretrain.epochs = 2
pretrain.batch_size = 8
pretrain.warmup_epochs = 1
warmup.epochs = 1
warmup.batch_size = 6
finetune.epochs = 1
finetune.batch_size = 6
finetune.topk = 2
"""


@pytest.fixture
def tiny_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return str(path)


def test_unknown_command():
    assert dispatch(["nonsense"]) == EXIT_CONFIG


def test_bad_override_exits_with_config_error(tmp_path):
    code = dispatch(["pretrain", "--output", str(tmp_path), "--set", "bissl.nonsense=1"])
    assert code == EXIT_CONFIG
    # the manifest is opened before the config is parsed
    assert read_manifest(tmp_path / MANIFEST_NAME)["command"] == "pretrain"


def test_missing_checkpoint(tmp_path, tiny_file):
    assert dispatch(["warmup", "--config", tiny_file, "--output", str(tmp_path)]) == EXIT_CONFIG


def test_verify_passes(tmp_path):
    assert dispatch(["verify", "--output", str(tmp_path)]) == EXIT_OK
    entries = read_manifest(tmp_path / MANIFEST_NAME)
    assert entries["command"] == "verify"
    assert all(v == "pass" for k, v in entries.items() if k.startswith("verify."))


def test_stage_commands_chain(tmp_path, tiny_file, no_wall_time):
    out = ["--config", tiny_file, "--output", str(tmp_path)]
    assert dispatch(["pretrain", *out]) == EXIT_OK
    assert (tmp_path / "pretrained.pt").exists()
    assert dispatch(["warmup", *out]) == EXIT_OK
    warm, _ = load_params(tmp_path / "warmup.pt")
    assert set(warm) == {"theta", "phi_p", "phi_d"}

    # zero alternations hand the input backbone through unchanged
    assert dispatch(["bissl", *out, "--set", "T=0"]) == EXIT_OK
    entries = read_manifest(tmp_path / MANIFEST_NAME)
    assert entries["config.bissl.T"] == "0"
    assert entries["hash.output.theta"] == entries["hash.input.theta"] == param_hash(warm["theta"])

    assert dispatch(["bissl", *out]) == EXIT_OK
    rows = pd.read_csv(tmp_path / "bissl_metrics.csv")
    assert len(rows) == 2 * (2 + 2)

    assert dispatch(["finetune", *out]) == EXIT_OK
    assert "finetune.test_accuracy" in read_manifest(tmp_path / MANIFEST_NAME)
    assert (tmp_path / "finetuned.pt").exists()


def test_gen_data_and_features(tmp_path, tiny_file):
    out = ["--config", tiny_file, "--output", str(tmp_path)]
    assert dispatch(["gen-data", *out]) == EXIT_OK
    assert (tmp_path / "data" / "downstream_train.csv").exists()
    assert dispatch(["pretrain", *out]) == EXIT_OK
    assert dispatch(["export-features", *out]) == EXIT_OK
    features = pd.read_csv(tmp_path / "features" / "downstream_test.csv")
    assert list(features.columns) == ["f_0", "f_1", "f_2", "f_3", "label"]


def test_pipeline_command(tmp_path, tiny_file, no_wall_time):
    code = dispatch([
        "pipeline", "--config", tiny_file, "--output", str(tmp_path),
        "--set", "pipeline.arms=ft_only,bissl", "--seeds", "1",
    ])
    assert code == EXIT_OK
    table = pd.read_csv(tmp_path / "comparison.csv")
    assert table["arm"].tolist() == ["ft_only", "bissl"]
