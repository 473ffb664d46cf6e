import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import pytest

from app.core.config import settings
from app.core.models import (
    BiSSLConfig,
    CGConfig,
    FinetuneConfig,
    ModelSpec,
    PipelineConfig,
    PretrainConfig,
    RunConfig,
    SearchSpace,
    SynthConfig,
    WarmupConfig,
)


def tiny_run_config(**pipeline) -> RunConfig:
    """A run small enough that every stage finishes in well under a second."""
    return RunConfig(
        model=ModelSpec(input_dim=4, backbone_widths=[6], feature_dim=4, pretext_widths=[4, 3], num_classes=3),
        data=SynthConfig(
            input_dim=4, num_classes=3, pretext_samples=48, downstream_samples=60,
            pretext_batch_size=8, downstream_batch_size=6, seed=3,
        ),
        bissl=BiSSLConfig(lam=0.1, N_L=2, N_U=2, T=3, cg=CGConfig(iterations=2)),
        pretrain=PretrainConfig(epochs=2, batch_size=8, warmup_epochs=1),
        warmup=WarmupConfig(epochs=2, batch_size=6),
        finetune=FinetuneConfig(epochs=2, batch_size=6, topk=2),
        search=SearchSpace(trials=2),
        pipeline=PipelineConfig(**{"seed": 0, "seeds": 1, **pipeline}),
    )


@pytest.fixture
def tiny_config() -> RunConfig:
    return tiny_run_config()


@pytest.fixture
def no_wall_time(monkeypatch):
    """Zero the wall_ms column so repeated runs compare bitwise."""
    monkeypatch.setattr(settings, "RECORD_WALL_TIME", False)
