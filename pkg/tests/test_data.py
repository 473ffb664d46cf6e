import sys
import os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

import numpy as np
import pandas as pd
import pytest
import torch

from app.autodiff.tensor_ops import DTYPE
from app.core.errors import ConfigError
from app.core.models import AugmentConfig, SynthConfig
from app.data.synthetic import (
    augment_views,
    dataset_hash,
    export_datasets_csv,
    export_features_csv,
    make_datasets,
    stratified_split,
)

SMALL = SynthConfig(
    input_dim=6, num_classes=4, pretext_samples=80, downstream_samples=100,
    pretext_batch_size=8, downstream_batch_size=10, seed=11,
)


def test_zero_shift_keeps_cluster_means():
    data = make_datasets(SMALL.model_copy(update={"shift_magnitude": 0.0}))
    assert np.array_equal(data.downstream_means, data.pretext_means)


def test_shift_moves_means_along_unit_direction():
    data = make_datasets(SMALL)
    delta = data.downstream_means - data.pretext_means
    assert np.allclose(delta, SMALL.shift_magnitude * data.shift_direction[None, :])
    assert np.linalg.norm(data.shift_direction) == pytest.approx(1.0)


def test_same_seed_same_data():
    assert dataset_hash(make_datasets(SMALL)) == dataset_hash(make_datasets(SMALL))
    assert dataset_hash(make_datasets(SMALL)) != dataset_hash(make_datasets(SMALL, seed=12))


def test_sizes_and_stratification():
    data = make_datasets(SMALL)
    splits = data.downstream
    assert len(data.pretext) == 80
    assert len(splits.train) + len(splits.val) + len(splits.test) == 100
    # 25 samples per class: 5 val, 5 test, 15 train
    for split, expected in [(splits.train, 15), (splits.val, 5), (splits.test, 5)]:
        counts = torch.bincount(split.labels, minlength=4)
        assert all(abs(int(c) - expected) <= 1 for c in counts)


def test_sample_ids_are_disjoint():
    data = make_datasets(SMALL)
    groups = [data.pretext.sample_ids, data.downstream.train.sample_ids,
              data.downstream.val.sample_ids, data.downstream.test.sample_ids]
    ids = torch.cat(groups)
    assert ids.unique().numel() == ids.numel()


def test_train_samples_per_class():
    data = make_datasets(SMALL.model_copy(update={"train_samples_per_class": 3}))
    assert torch.equal(torch.bincount(data.downstream.train.labels), torch.full((4,), 3))
    assert len(data.downstream.val) == 20


def test_too_few_samples_per_class():
    cfg = SynthConfig(
        input_dim=6, num_classes=10, pretext_samples=80, downstream_samples=40,
        pretext_batch_size=8, downstream_batch_size=10, seed=0,
    )
    with pytest.raises(ConfigError):
        make_datasets(cfg)


def test_missing_seed():
    with pytest.raises(ConfigError):
        make_datasets(SMALL.model_copy(update={"seed": None}))


def test_stratified_split_rejects_empty_train():
    labels = np.array([0, 0, 1, 1])
    with pytest.raises(ConfigError):
        stratified_split(labels, 0.5, 0.4, np.random.default_rng(0))


def test_identity_augmentation():
    x = torch.randn((5, 6), dtype=DTYPE)
    cfg = AugmentConfig(noise_sigma=0.0, scale_range=(1.0, 1.0), mask_fraction=0.0)
    views = augment_views(x, torch.Generator().manual_seed(0), cfg)
    assert torch.equal(views.view_a, x)
    assert torch.equal(views.view_b, x)


def test_full_mask_zeroes_views():
    x = torch.randn((5, 6), dtype=DTYPE)
    views = augment_views(x, torch.Generator().manual_seed(0), AugmentConfig(mask_fraction=1.0))
    assert torch.equal(views.view_a, torch.zeros_like(x))
    assert torch.equal(views.view_b, torch.zeros_like(x))


def test_augmentation_is_unbiased_noise():
    """With unit scale and no mask the view mean stays within 4 standard errors of x"""
    x = torch.ones((20000, 2), dtype=DTYPE)
    cfg = AugmentConfig(noise_sigma=0.5, scale_range=(1.0, 1.0), mask_fraction=0.0)
    views = augment_views(x, torch.Generator().manual_seed(1), cfg)
    mean = views.view_a.mean(dim=0)
    bound = 4 * 0.5 / np.sqrt(20000)
    assert torch.all((mean - 1.0).abs() <= bound)
    assert not torch.equal(views.view_a, views.view_b)


def test_augmentation_is_seeded():
    x = torch.randn((4, 6), dtype=DTYPE)
    cfg = AugmentConfig()
    a = augment_views(x, torch.Generator().manual_seed(5), cfg)
    b = augment_views(x, torch.Generator().manual_seed(5), cfg)
    assert torch.equal(a.view_a, b.view_a) and torch.equal(a.view_b, b.view_b)


def test_csv_export(tmp_path):
    data = make_datasets(SMALL)
    paths = export_datasets_csv(data, tmp_path)
    assert sorted(p.name for p in paths) == [
        "downstream_test.csv", "downstream_train.csv", "downstream_val.csv", "pretext.csv",
    ]
    train = pd.read_csv(tmp_path / "downstream_train.csv")
    assert list(train.columns) == [f"x_{i}" for i in range(6)] + ["label"]
    assert len(train) == len(data.downstream.train)
    assert "label" not in pd.read_csv(tmp_path / "pretext.csv").columns


def test_feature_export(tmp_path):
    path = export_features_csv(torch.zeros((3, 2), dtype=DTYPE), torch.tensor([0, 1, 2]), tmp_path / "f" / "x.csv")
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["f_0", "f_1", "label"]
    assert frame["label"].tolist() == [0, 1, 2]
