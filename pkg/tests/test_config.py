import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import pytest
from pydantic import ValidationError

from app.core.config import Settings
from app.core.errors import EXIT_CONFIG, EXIT_NUMERICAL, ConfigError, NumericalAbortError, handle_exception
from app.core.models import Arm, FallbackPolicy, RunConfig
from app.core.run_config import (
    build_run_config,
    config_items,
    load_run_config,
    parse_config_text,
    render_config,
    resolve_key,
)
from app.core.seeding import derive_seed


def test_defaults():
    cfg = load_run_config()
    assert cfg == RunConfig()
    assert cfg.bissl.lam == 0.001
    assert cfg.bissl.N_L == 20 and cfg.bissl.N_U == 8
    assert cfg.bissl.cg.iterations == 5 and cfg.bissl.cg.damping == 10.0
    assert cfg.bissl.clip_threshold == 10.0
    assert cfg.bissl.lower_warmup_steps == 200


def test_precedence_defaults_file_override(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("bissl.lam = 0.5\nbissl.T = 7  # short run\ncg.iterations = 3\n")
    cfg = load_run_config(str(path), ["lam=0.25"])
    assert cfg.bissl.lam == 0.25
    assert cfg.bissl.T == 7
    assert cfg.bissl.cg.iterations == 3
    assert cfg.bissl.N_L == 20


def test_unqualified_and_nested_keys():
    assert resolve_key("T") == ("bissl", "T")
    assert resolve_key("damping") == ("cg", "damping")
    assert resolve_key("finetune.lr") == ("finetune", "lr")
    cfg = build_run_config(overrides=["T=0", "lower.kind=sgd", "fallback=none"])
    assert cfg.bissl.T == 0
    assert cfg.bissl.lower.kind.value == "sgd"
    assert cfg.bissl.cg.fallback is FallbackPolicy.NONE


def test_ambiguous_key():
    with pytest.raises(ConfigError) as info:
        resolve_key("epochs")
    assert "pretrain.epochs" in info.value.details["candidates"]


@pytest.mark.parametrize("key", ["nonsense", "bissl.nonsense", "nosection.T", "bissl.cg"])
def test_unknown_keys(key):
    with pytest.raises(ConfigError):
        resolve_key(key)


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError):
        parse_config_text("bissl.T = 1\nbissl.T = 2\n")
    with pytest.raises(ConfigError):
        parse_config_text("bissl.T 1\n")
    assert parse_config_text("# only comments\n\n") == []


def test_value_coercion():
    cfg = build_run_config(overrides=[
        "model.backbone_widths=8, 4",
        "data.scale_range=0.9,1.1",
        "data.seed=none",
        "discard_ij=true",
        "pipeline.arms=ft_only,bissl",
    ])
    assert cfg.model.backbone_widths == [8, 4]
    assert cfg.data.scale_range == (0.9, 1.1)
    assert cfg.data.seed is None
    assert cfg.bissl.discard_ij is True
    assert cfg.pipeline.arms == [Arm.FT_ONLY, Arm.BISSL]


def test_invalid_values():
    with pytest.raises(ConfigError):
        build_run_config(overrides=["lam=-1"])
    with pytest.raises(ConfigError):
        build_run_config(overrides=["model.input_dim=7"])
    with pytest.raises(ConfigError):
        build_run_config(overrides=["T"])


def test_missing_file():
    with pytest.raises(ConfigError):
        load_run_config("/nonexistent/run.cfg")


def test_render_round_trip(tmp_path):
    cfg = build_run_config(overrides=["T=3", "model.backbone_widths=8,4", "data.seed=5"])
    path = tmp_path / "saved.cfg"
    path.write_text(render_config(cfg))
    assert load_run_config(str(path)) == cfg
    keys = [key for key, _ in config_items(cfg)]
    assert "bissl.T" in keys and "cg.damping" in keys
    assert len(keys) == len(set(keys))


def test_derived_seeds():
    assert derive_seed(0, "init") == derive_seed(0, "init")
    assert derive_seed(0, "init") != derive_seed(0, "augment")
    assert derive_seed(0, "init", 1) != derive_seed(0, "init", 2)
    with pytest.raises(KeyError):
        derive_seed(0, "unknown")


def test_exit_codes():
    assert handle_exception(ConfigError("bad")) == EXIT_CONFIG
    assert handle_exception(NumericalAbortError("diverged")) == EXIT_NUMERICAL


def test_settings_log_level():
    assert Settings(LOG_LEVEL="debug").LOG_LEVEL == "DEBUG"
    with pytest.raises(ValidationError):
        Settings(LOG_LEVEL="chatty")
    assert Settings(BISSL_THREADS=None).worker_count == 1
